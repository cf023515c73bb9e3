"""Run configuration and its sectioned key-value file format.

Grammar (INI style, parsed by configparser)::

    [backbone]      BackboneConfig fields, e.g. d = 64
    [adaptation]    AdaptationConfig fields; modalities = VTC;
                    insert_layers = 5-12  or  V:1-4;T:1-12;C:5-12
    [optimizer]     lr, beta1, beta2, weight_decay, eps, warmup_frac
    [task]          task, batch_size, epochs, seed, paths, ...
    [world]         WorldSpec fields for the synthetic data generator

Unknown sections or keys are errors.  Paths may be overridden through the
UNIADAPT_DATA, UNIADAPT_CHECKPOINTS and UNIADAPT_METRICS environment variables.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, asdict, replace
import hashlib
import json
import os
import typing

from .backbone import BackboneConfig
from .adaptation import AdaptationConfig, ConfigError
from .data import WorldSpec

TASKS = ("retrieval-image", "retrieval-video", "vqa")


@dataclass
class OptimConfig:
    lr: float | None = None   # None: per-variant default from train.default_lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.05

    def __post_init__(self):
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("lr must be > 0")


@dataclass
class TaskConfig:
    task: str = "retrieval-image"
    batch_size: int = 32
    epochs: int = 5
    pretrain_epochs: int = 10
    max_steps: int = 0
    seed: int = 0
    train_frames: int = 8
    infer_frames: int = 16
    eval_batch: int = 64
    log_every: int = 0
    data: str = ""
    checkpoints: str = ""
    metrics: str = ""

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.epochs < 1 or self.pretrain_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.train_frames < 1 or self.infer_frames < 1:
            raise ConfigError("frame counts must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    world: WorldSpec = field(default_factory=WorldSpec)

    def __post_init__(self):
        b, w = self.backbone, self.world
        if (b.patches, b.patch_dim) != (w.patches, w.patch_dim):
            raise ConfigError(f"backbone patches/patch_dim {(b.patches, b.patch_dim)} do not match "
                              f"world {(w.patches, w.patch_dim)}")
        if b.vocab < w.vocab_size:
            raise ConfigError(f"backbone vocab {b.vocab} smaller than world vocabulary {w.vocab_size}")

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()

    def backbone_hash(self):
        return hashlib.sha256(json.dumps(asdict(self.backbone), sort_keys=True).encode()).hexdigest()

    def to_dict(self):
        a = asdict(self.adaptation)
        a["modalities"] = "".join(sorted(self.adaptation.modalities))
        if a["insert_layers"] is not None:
            a["insert_layers"] = {m: sorted(v) for m, v in sorted(a["insert_layers"].items())}
        return {"backbone": asdict(self.backbone), "adaptation": a, "optimizer": asdict(self.optimizer),
                "task": asdict(self.task), "world": asdict(self.world)}

    def with_env(self):
        """Apply UNIADAPT_* environment overrides for paths."""
        t = self.task
        t = replace(t, data=os.environ.get("UNIADAPT_DATA", t.data),
                    checkpoints=os.environ.get("UNIADAPT_CHECKPOINTS", t.checkpoints),
                    metrics=os.environ.get("UNIADAPT_METRICS", t.metrics))
        return replace(self, task=t)


SECTIONS = {"backbone": BackboneConfig, "adaptation": AdaptationConfig, "optimizer": OptimConfig,
            "task": TaskConfig, "world": WorldSpec}


def _parse_range_list(text):
    out = set()
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-")
            out.update(range(int(a), int(b) + 1))
        else:
            out.add(int(part))
    return frozenset(out)


def parse_insert_layers(text):
    text = text.strip()
    if text.lower() in ("", "all", "none"):
        return None
    if ":" not in text:
        layers = _parse_range_list(text)
        return {m: layers for m in "VTC"}
    out = {}
    for chunk in text.split(";"):
        if chunk.strip():
            m, spec = chunk.split(":")
            out[m.strip()] = _parse_range_list(spec)
    return out


def _convert(section, key, raw, ftype):
    raw = raw.strip()
    try:
        if key == "insert_layers":
            return parse_insert_layers(raw)
        if key == "modalities":
            return frozenset(c for c in raw.replace(",", "").replace(" ", "").upper())
        if key == "qtype_probs":
            return tuple(float(x) for x in raw.split(","))
        if ftype in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if ftype in (int, "int"):
            return int(raw)
        if ftype in (float, "float"):
            return float(raw)
        if "None" in str(ftype) and raw.lower() == "none":
            return None
        if "int" in str(ftype) and "None" in str(ftype):
            return int(raw)
        if "float" in str(ftype) and "None" in str(ftype):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from e


def parse_config(text, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";;"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    base = base or RunConfig()
    parts = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        cls = SECTIONS[sec]
        hints = typing.get_type_hints(cls)
        names = {f.name for f in fields(cls)}
        kw = {}
        for key, raw in cp.items(sec):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            kw[key] = _convert(sec, key, raw, hints[key])
        parts[sec] = kw
    try:
        backbone = replace(base.backbone, **parts.get("backbone", {}))
        a = parts.get("adaptation", {})
        if "variant" in a and a["variant"] != base.adaptation.variant:
            adaptation = AdaptationConfig.for_variant(a.pop("variant"), **a)
        else:
            adaptation = replace(base.adaptation, **a)
        optimizer = replace(base.optimizer, **parts.get("optimizer", {}))
        task = replace(base.task, **parts.get("task", {}))
        world = replace(base.world, **parts.get("world", {}))
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    return RunConfig(backbone, adaptation, optimizer, task, world)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text).with_env()


def render_config(cfg: RunConfig) -> str:
    """Serialize back to the sectioned text format."""
    d = cfg.to_dict()
    lines = []
    for sec in ("backbone", "adaptation", "optimizer", "task", "world"):
        lines.append(f"[{sec}]")
        for k, v in d[sec].items():
            if k == "insert_layers":
                v = "all" if v is None else ";".join(f"{m}:{','.join(map(str, ls))}" for m, ls in v.items())
            elif isinstance(v, (list, tuple)):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
