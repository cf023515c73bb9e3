"""Adapter variants, UniAdapter weight sharing, freeze control and parameter accounting."""
from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
import math
import warnings

import numpy as np

from . import tensor as T
from .tensor import Tensor, DimensionError
from .backbone import (BackboneConfig, FrozenHooks, HybridModel, backbone_shapes,
                       head_shapes, init_backbone)

VARIANTS = ("none", "linear_probe", "full_finetune", "sequential_adapter",
            "parallel_adapter", "lora", "uniadapter")
SHARING = ("no_share", "share_down", "share_up", "share_both")
ENCODER_OF = {"V": "visual", "T": "text", "C": "fusion"}
MODALITY_OF = {v: k for k, v in ENCODER_OF.items()}
ADAPTER_VARIANTS = ("sequential_adapter", "parallel_adapter", "uniadapter")


class ConfigError(ValueError):
    pass


@dataclass
class AdaptationConfig:
    """What to adapt and how.

    ``insert_layers`` maps a modality letter to 1-based layer numbers (the
    numbering used by the layer-band tables); ``None`` means every layer.
    """
    variant: str = "uniadapter"
    r: int = 16
    scale: float = 0.1
    sharing: str = "share_down"
    modalities: frozenset = frozenset("VTC")
    insert_layers: dict | None = None
    query_residual: bool = True
    query_residual_share: bool = True
    query_residual_form: str = "delta"
    pfa: bool = True
    pfa_normalize: bool = False
    pfa_stop_grad: bool = False
    share_encoder_decoder: bool = True
    activation: str = "relu"
    lora_rank: int = 16
    lora_alpha: float = 16.0
    train_heads: bool = True
    train_temperature: bool = False

    def __post_init__(self):
        self.modalities = frozenset(self.modalities)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.sharing not in SHARING:
            raise ConfigError(f"unknown sharing {self.sharing!r}; expected one of {SHARING}")
        if not self.modalities <= set("VTC"):
            raise ConfigError(f"modalities must be a subset of V,T,C, got {sorted(self.modalities)}")
        if self.r < 1:
            raise ConfigError("bottleneck r must be >= 1")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if not math.isfinite(self.scale):
            raise ConfigError("scale must be finite")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.query_residual_form not in ("delta", "verbatim"):
            raise ConfigError("query_residual_form must be 'delta' or 'verbatim'")
        if self.sharing != "no_share" and self.variant != "uniadapter":
            raise ConfigError("weight sharing across modalities applies to uniadapter only")
        if self.query_residual:
            if self.variant not in ("parallel_adapter", "uniadapter"):
                raise ConfigError("query_residual requires parallel_adapter or uniadapter")
            if "C" in self.modalities and "T" not in self.modalities:
                raise ConfigError("query_residual shares the textual adapter; enable modality T")
        if self.insert_layers is not None:
            self.insert_layers = {m: frozenset(v) for m, v in self.insert_layers.items()}

    @classmethod
    def for_variant(cls, variant, **kw):
        """Config with the conventional defaults of ``variant``."""
        if variant != "uniadapter":
            kw.setdefault("sharing", "no_share")
            kw.setdefault("query_residual", False)
            kw.setdefault("pfa", False)
        return cls(variant=variant, **kw)

    def layers_for(self, modality, depth):
        """0-based layer indices of ``modality`` that carry an adapter."""
        if self.insert_layers is None or modality not in self.insert_layers:
            return list(range(depth))
        layers = sorted(self.insert_layers[modality])
        bad = [l for l in layers if not 1 <= l <= depth]
        if bad:
            raise ConfigError(f"insert layers {bad} out of range 1..{depth} for modality {modality}")
        return [l - 1 for l in layers]


# -- parameter store --------------------------------------------------------

class Meta:
    """Shape-only placeholder used when counting parameters without allocating them."""
    __slots__ = ("shape", "requires_grad")

    def __init__(self, shape):
        self.shape = tuple(shape)
        self.requires_grad = False

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))


class ParameterStore:
    """Named parameters with alias groups and a trainable set.

    Every alias resolves to one canonical tensor object, so a write through
    any alias is visible through all of them.
    """

    def __init__(self):
        self._tensors = {}
        self._canon = {}
        self._trainable = set()

    def add(self, name, value, trainable=False):
        if name in self._canon:
            raise KeyError(f"parameter {name!r} already registered")
        self._tensors[name] = value
        self._canon[name] = name
        if trainable:
            self._trainable.add(name)
        return value

    def alias(self, name, target):
        canon = self._canon[target]
        if name in self._canon:
            raise KeyError(f"parameter {name!r} already registered")
        self._canon[name] = canon

    def canonical(self, name):
        return self._canon[name]

    def is_alias(self, name):
        return self._canon[name] != name

    def __getitem__(self, name):
        return self._tensors[self._canon[name]]

    def __setitem__(self, name, value):
        if name in self._canon:
            self[name].data[...] = np.asarray(value)
        else:
            self.add(name, value if isinstance(value, (Tensor, Meta)) else Tensor(value))

    def __contains__(self, name):
        return name in self._canon

    def __iter__(self):
        return iter(self._canon)

    def __len__(self):
        return len(self._canon)

    def names(self):
        return list(self._canon)

    def canonical_names(self):
        return list(self._tensors)

    def aliases(self):
        return {n: c for n, c in self._canon.items() if n != c}

    def groups(self):
        out = {}
        for n, c in self._canon.items():
            out.setdefault(c, []).append(n)
        return out

    @property
    def trainable(self):
        return frozenset(self._trainable)

    def set_trainable(self, names, flag=True):
        for n in names:
            c = self._canon[n]
            if flag:
                self._trainable.add(c)
            else:
                self._trainable.discard(c)
        self.apply_freeze()

    def apply_freeze(self):
        """Sync each tensor's requires_grad with membership in the trainable set."""
        for n, t in self._tensors.items():
            t.requires_grad = n in self._trainable

    def trainable_items(self):
        return [(n, self._tensors[n]) for n in self._tensors if n in self._trainable]

    def dump(self):
        """Deterministic text report: name, shape, canonical/alias, trainable flag."""
        lines = []
        for n in sorted(self._canon):
            c = self._canon[n]
            shape = "x".join(str(s) for s in self[n].shape) or "scalar"
            role = "canonical" if c == n else f"alias->{c}"
            lines.append(f"{n}\t{shape}\t{role}\t{'trainable' if c in self._trainable else 'frozen'}")
        return "\n".join(lines) + "\n"


# -- adapter maths ----------------------------------------------------------

def adapter_delta(x, down, up, s, act="relu"):
    """s * act(x @ down) @ up, the adapter's residual branch."""
    if x.shape[-1] != down.shape[0] or down.shape[1] != up.shape[0] or up.shape[1] != x.shape[-1]:
        raise DimensionError(f"adapter shapes disagree: x {x.shape}, down {down.shape}, up {up.shape}")
    return T.scale(T.ACTIVATIONS[act](x @ down) @ up, s)


def bottleneck_forward(x, down, up, s, act="relu"):
    return x + adapter_delta(x, down, up, s, act)


def crossmodal_delta(x, down, up_text, up_cross, s, act="relu"):
    a = T.ACTIVATIONS[act](x @ down)
    return T.scale(a @ up_text + a @ up_cross, s)


def lora_linear(x, weight, a, b, alpha):
    """x @ weight plus the low-rank update (alpha / rank) * x @ a @ b."""
    rank = a.shape[1]
    return x @ weight + T.scale((x @ a) @ b, alpha / rank)


@dataclass
class AdapterUnit:
    encoder: str
    layer: int
    down: str
    ups: dict = field(default_factory=dict)


class AdaptationEngine(FrozenHooks):
    """Block hooks realising the configured adapter variant on a ParameterStore."""

    def __init__(self, cfg: AdaptationConfig, store: ParameterStore, units, lora, query_units=None):
        self.cfg = cfg
        self.store = store
        self.units = units
        self.lora = lora
        self.query_units = query_units or {}

    def _unit(self, enc, i):
        return self.units.get((enc, i))

    def project(self, encoder, layer, which, x, w):
        ab = self.lora.get((encoder, layer, which))
        if ab is None:
            return x @ w
        return lora_linear(x, w, self.store[ab[0]], self.store[ab[1]], self.cfg.lora_alpha)

    def unimodal(self, x, modality, layer):
        """UniAdapter on a unimodal stream: shared down with the modality's own up."""
        if modality not in self.cfg.modalities:
            raise ConfigError(f"modality {modality} is not enabled")
        unit = self._unit(ENCODER_OF[modality], layer)
        s = self.store
        return bottleneck_forward(x, s[unit.down], s[unit.ups[modality]], self.cfg.scale, self.cfg.activation)

    def crossmodal(self, x, layer, encoder="fusion"):
        """Cross-modal UniAdapter: textual and cross-modal up branches over one down activation."""
        if "C" not in self.cfg.modalities:
            raise ConfigError("modality C is not enabled")
        return x + self._cross_delta(x, encoder, layer)

    def _cross_delta(self, x, enc, i):
        s, cfg = self.store, self.cfg
        unit = self._unit(enc, i)
        text = self._unit("text", i)
        if cfg.variant == "uniadapter" and text is not None and "T" in text.ups:
            return crossmodal_delta(x, s[unit.down], s[text.ups["T"]], s[unit.ups["C"]],
                                    cfg.scale, cfg.activation)
        return adapter_delta(x, s[unit.down], s[unit.ups["C"]], cfg.scale, cfg.activation)

    def _query_unit(self, i):
        if not self.cfg.query_residual_share:
            return self.query_units.get(i)
        unit = self._unit("text", i)
        if unit is None:
            return None
        return AdapterUnit("text", i, unit.down, {"T": unit.ups["T"]})

    def unimodal_block(self, encoder, layer, h, ffn):
        unit = self._unit(encoder, layer)
        if unit is None:
            return h + ffn(h)
        s, cfg = self.store, self.cfg
        (up,) = unit.ups.values()
        if cfg.variant == "sequential_adapter":
            h2 = bottleneck_forward(h, s[unit.down], s[up], cfg.scale, cfg.activation)
            return h2 + ffn(h2)
        return bottleneck_forward(h, s[unit.down], s[up], cfg.scale, cfg.activation) + ffn(h)

    def multimodal_block(self, encoder, layer, q, h, ffn):
        unit = self._unit(encoder, layer)
        if unit is None:
            return h + ffn(h)
        s, cfg = self.store, self.cfg
        if cfg.variant == "sequential_adapter":
            h2 = bottleneck_forward(h, s[unit.down], s[unit.ups["C"]], cfg.scale, cfg.activation)
            return h2 + ffn(h2)
        out = (h + self._cross_delta(h, encoder, layer)) + ffn(h)
        if cfg.query_residual:
            qu = self._query_unit(layer)
            if qu is None:
                raise ConfigError(f"query residual needs a textual adapter at layer {layer + 1}")
            dq = adapter_delta(q, s[qu.down], s[qu.ups["T"]], cfg.scale, cfg.activation)
            out = out + (q + dq if cfg.query_residual_form == "verbatim" else dq)
        return out


# -- plan construction ------------------------------------------------------

def _kaiming(rng, shape, dtype):
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / shape[0]), shape).astype(dtype))


def build_parameter_plan(bcfg: BackboneConfig, acfg: AdaptationConfig, params=None, seed=0,
                         include_decoder=False, materialize=True):
    """Register backbone and adapter parameters, apply aliasing and freezing.

    Returns a ParameterStore carrying ``units``/``lora``/``query_units`` maps.
    With ``materialize=False`` only shapes are recorded (for count audits).
    """
    if acfg.r > bcfg.d and acfg.variant in ADAPTER_VARIANTS:
        warnings.warn(f"bottleneck r={acfg.r} exceeds hidden size d={bcfg.d}", stacklevel=2)
    store = ParameterStore()
    dtype = T.get_default_dtype()
    if materialize:
        if params is None:
            params = init_backbone(bcfg, seed)
        for n, t in params.items():
            store.add(n, t)
    else:
        for n, shp in {**backbone_shapes(bcfg), **head_shapes(bcfg)}.items():
            store.add(n, Meta(shp))

    rng = np.random.default_rng(seed + 1)
    d, r = bcfg.d, acfg.r

    def new(name, shape, kind):
        if not materialize:
            return store.add(name, Meta(shape), trainable=True)
        if kind == "zero":
            t = Tensor(np.zeros(shape, dtype=dtype))
        else:
            t = _kaiming(rng, shape, dtype)
        return store.add(name, t, trainable=True)

    units, lora, query_units = {}, {}, {}
    enabled = [m for m in "TVC" if m in acfg.modalities]
    adapter_variant = acfg.variant in ADAPTER_VARIANTS

    if adapter_variant:
        layer_sets = {m: set(acfg.layers_for(m, bcfg.depth(ENCODER_OF[m]))) for m in enabled}
        if acfg.variant == "uniadapter" and "C" in layer_sets and "T" in layer_sets \
                and not layer_sets["C"] <= layer_sets["T"] and acfg.query_residual:
            raise ConfigError("query residual needs textual adapters at every cross-modal layer")
        share_down = acfg.sharing in ("share_down", "share_both")
        share_up = acfg.sharing in ("share_up", "share_both")
        depth = max(bcfg.depth(ENCODER_OF[m]) for m in enabled) if enabled else 0
        for i in range(depth):
            owners = [m for m in enabled if i in layer_sets[m]]
            canon_down = canon_up = None
            for m in owners:
                enc = ENCODER_OF[m]
                pre = f"adapter.{enc}.{i}"
                if share_down and canon_down is not None:
                    store.alias(f"{pre}.down", canon_down)
                else:
                    new(f"{pre}.down", (d, r), "kaiming")
                    canon_down = canon_down or f"{pre}.down"
                if share_up and canon_up is not None:
                    store.alias(f"{pre}.up.{m}", canon_up)
                else:
                    new(f"{pre}.up.{m}", (r, d), "zero")
                    canon_up = canon_up or f"{pre}.up.{m}"
                units[(enc, i)] = AdapterUnit(enc, i, f"{pre}.down", {m: f"{pre}.up.{m}"})
            if acfg.query_residual and not acfg.query_residual_share and "C" in owners:
                pre = f"adapter.query.{i}"
                new(f"{pre}.down", (d, r), "kaiming")
                new(f"{pre}.up.T", (r, d), "zero")
                query_units[i] = AdapterUnit("query", i, f"{pre}.down", {"T": f"{pre}.up.T"})
        if include_decoder and "C" in acfg.modalities:
            for i in range(bcfg.decoder_depth):
                pre = f"adapter.decoder.{i}"
                src = units.get(("fusion", i))
                if acfg.share_encoder_decoder:
                    if src is None:
                        continue
                    store.alias(f"{pre}.down", src.down)
                    store.alias(f"{pre}.up.C", src.ups["C"])
                else:
                    new(f"{pre}.down", (d, r), "kaiming")
                    new(f"{pre}.up.C", (r, d), "zero")
                units[("decoder", i)] = AdapterUnit("decoder", i, f"{pre}.down", {"C": f"{pre}.up.C"})

    if acfg.variant == "lora":
        encs = [ENCODER_OF[m] for m in "VTC" if m in acfg.modalities]
        if include_decoder and "C" in acfg.modalities:
            encs.append("decoder")
        for enc in encs:
            mod = MODALITY_OF.get(enc, "C")
            for i in acfg.layers_for(mod, bcfg.depth(enc)) if enc != "decoder" else range(bcfg.decoder_depth):
                for which in ("q", "v"):
                    pre = f"lora.{enc}.{i}.{which}"
                    new(f"{pre}.A", (d, acfg.lora_rank), "kaiming")
                    new(f"{pre}.B", (acfg.lora_rank, d), "zero")
                    lora[(enc, i, which)] = (f"{pre}.A", f"{pre}.B")

    head_names = [n for n in store.canonical_names()
                  if n.startswith("head.") and (n != "head.temp" or acfg.train_temperature)]
    if acfg.variant == "full_finetune":
        store.set_trainable(store.canonical_names())
    elif acfg.variant == "linear_probe" or acfg.train_heads:
        store.set_trainable(head_names)
    if acfg.variant == "none":
        store.set_trainable(store.canonical_names(), False)
    if materialize:
        store.apply_freeze()
    store.units, store.lora, store.query_units = units, lora, query_units
    return store


def build_model(bcfg, acfg, params=None, seed=0, include_decoder=False):
    """Adapted HybridModel whose parameters live in a freshly planned store."""
    store = build_parameter_plan(bcfg, acfg, params, seed, include_decoder)
    engine = AdaptationEngine(acfg, store, store.units, store.lora, store.query_units)
    model = HybridModel(bcfg, store, engine)
    model.adapt_cfg = acfg
    model.store = store
    return model


# -- accounting -------------------------------------------------------------

def format_count(n):
    """Millions rounded half-up to one decimal, e.g. 18874368 -> '18.9M'."""
    m = (Decimal(int(n)) / Decimal(10 ** 6)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return f"{m}M"


def _group_of(name):
    parts = name.split(".")
    if parts[0] == "adapter":
        return parts[1], int(parts[2]), parts[-1] if parts[3] == "up" else "down"
    if parts[0] == "lora":
        return parts[1], int(parts[2]), parts[3]
    return parts[0], None, None


@dataclass
class CountReport:
    total: int
    by_encoder: dict
    by_layer: dict
    by_kind: dict

    @property
    def rounded(self):
        return format_count(self.total)

    def render(self):
        lines = [f"{self.total} ({self.rounded})"]
        for k in sorted(self.by_encoder):
            lines.append(f"  encoder {k}: {self.by_encoder[k]}")
        for k in sorted(self.by_kind):
            lines.append(f"  kind {k}: {self.by_kind[k]}")
        for (enc, i) in sorted(self.by_layer, key=lambda x: (x[0], -1 if x[1] is None else x[1])):
            label = f"{enc}" if i is None else f"{enc}.{i + 1}"
            lines.append(f"  layer {label}: {self.by_layer[(enc, i)]}")
        return "\n".join(lines)


def count_tunable(store: ParameterStore, include_heads=False):
    """Exact tunable-scalar count; each canonical tensor counted once.

    Task heads (projections, matching head, temperature) are left out unless
    ``include_heads``, so adapter plans report only their added parameters.
    """
    total = 0
    by_enc, by_layer, by_kind = {}, {}, {}
    for name, t in sorted(store.trainable_items()):
        if not include_heads and name.startswith("head."):
            continue
        n = int(t.size)
        total += n
        enc, layer, kind = _group_of(name)
        by_enc[enc] = by_enc.get(enc, 0) + n
        by_layer[(enc, layer)] = by_layer.get((enc, layer), 0) + n
        if kind is not None:
            by_kind[kind] = by_kind.get(kind, 0) + n
    return CountReport(total, by_enc, by_layer, by_kind)


def closed_form_count(bcfg, acfg):
    """Independent counting formula for adapter/LoRA plans (no decoder)."""
    d, r = bcfg.d, acfg.r
    mods = [m for m in "VTC" if m in acfg.modalities]
    layer_sets = {m: set(acfg.layers_for(m, bcfg.depth(ENCODER_OF[m]))) for m in mods}
    if acfg.variant == "lora":
        return sum(2 * 2 * d * acfg.lora_rank * len(layer_sets[m]) for m in mods)
    if acfg.variant not in ADAPTER_VARIANTS:
        raise ConfigError("closed form covers adapter and lora variants only")
    total = 0
    depth = max(bcfg.depth(ENCODER_OF[m]) for m in mods)
    for i in range(depth):
        k = sum(1 for m in mods if i in layer_sets[m])
        if k == 0:
            continue
        downs = 1 if acfg.sharing in ("share_down", "share_both") else k
        ups = 1 if acfg.sharing in ("share_up", "share_both") else k
        total += (downs + ups) * d * r
        if acfg.query_residual and not acfg.query_residual_share and i in layer_sets.get("C", ()):
            total += 2 * d * r
    return total
