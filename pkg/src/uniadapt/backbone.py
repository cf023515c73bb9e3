"""Miniature hybrid-stream vision-language backbone.

Visual and textual unimodal encoders, a multimodal (fusion) encoder that
injects visual tokens through cross-attention, and a causal answer decoder.
All blocks are pre-norm.  Parameters live in a flat name -> Tensor mapping so
that the adaptation engine can alias, freeze and serialize them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, BOS, EOS = 0, 1, 2
NEG_INF = -1e9


class ShapeError(ValueError):
    pass


@dataclass
class BackboneConfig:
    d: int = 64
    heads: int = 4
    visual_depth: int = 4
    text_depth: int = 4
    fusion_depth: int = 4
    decoder_depth: int = 2
    patches: int = 8
    patch_dim: int = 16
    vocab: int = 64
    max_len: int = 16
    ffn_mult: int = 4
    embed_dim: int | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        for name in ("visual_depth", "text_depth", "fusion_depth", "decoder_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim is None:
            self.embed_dim = self.d

    @classmethod
    def full_scale(cls):
        """Base-size dimensions used when auditing tunable-parameter counts."""
        return cls(d=768, heads=12, visual_depth=12, text_depth=12, fusion_depth=12,
                   decoder_depth=12, embed_dim=256)

    def depth(self, encoder):
        return {"visual": self.visual_depth, "text": self.text_depth,
                "fusion": self.fusion_depth, "decoder": self.decoder_depth}[encoder]


@dataclass
class FeatureSet:
    """Encoder output.  ``seq`` is [B, L, d] (or [L, d] unbatched); row 0 is CLS."""
    seq: Tensor
    modality: str
    mask: np.ndarray | None = None

    @property
    def cls(self):
        return self.seq[..., 0, :]

    @property
    def tokens(self):
        return self.seq[..., 1:, :]

    @property
    def batched(self):
        return self.seq.ndim == 3


# -- parameter initialisation ---------------------------------------------

def _linear_shapes(prefix, d, ffn):
    return {
        f"{prefix}.ffn.w1": (d, ffn), f"{prefix}.ffn.b1": (ffn,),
        f"{prefix}.ffn.w2": (ffn, d), f"{prefix}.ffn.b2": (d,),
    }


def _block_shapes(prefix, d, ffn, cross, n_ln):
    shapes = {}
    for k in "qkvo":
        shapes[f"{prefix}.attn.{k}"] = (d, d)
    if cross:
        for k in "qkvo":
            shapes[f"{prefix}.xattn.{k}"] = (d, d)
    for j in range(1, n_ln + 1):
        shapes[f"{prefix}.ln{j}.g"] = (d,)
        shapes[f"{prefix}.ln{j}.b"] = (d,)
    shapes.update(_linear_shapes(prefix, d, ffn))
    return shapes


def backbone_shapes(cfg: BackboneConfig):
    """Ordered name -> shape map of every backbone parameter."""
    d, ffn = cfg.d, cfg.ffn_mult * cfg.d
    s = {
        "visual.patch.w": (cfg.patch_dim, d), "visual.patch.b": (d,),
        "visual.cls": (d,), "visual.pos": (cfg.patches + 1, d),
    }
    for i in range(cfg.visual_depth):
        s.update(_block_shapes(f"visual.{i}", d, ffn, False, 2))
    s.update({"visual.lnf.g": (d,), "visual.lnf.b": (d,)})
    s.update({"text.tok": (cfg.vocab, d), "text.cls": (d,), "text.pos": (cfg.max_len + 1, d)})
    for i in range(cfg.text_depth):
        s.update(_block_shapes(f"text.{i}", d, ffn, False, 2))
    s.update({"text.lnf.g": (d,), "text.lnf.b": (d,)})
    for i in range(cfg.fusion_depth):
        s.update(_block_shapes(f"fusion.{i}", d, ffn, True, 3))
    s.update({"fusion.lnf.g": (d,), "fusion.lnf.b": (d,)})
    s.update({"decoder.tok": (cfg.vocab, d), "decoder.pos": (cfg.max_len + 1, d)})
    for i in range(cfg.decoder_depth):
        s.update(_block_shapes(f"decoder.{i}", d, ffn, True, 3))
    s.update({"decoder.lnf.g": (d,), "decoder.lnf.b": (d,), "decoder.head": (d, cfg.vocab)})
    return s


def head_shapes(cfg: BackboneConfig):
    """Task heads: contrastive projections, matching head and temperature."""
    e = cfg.embed_dim
    return {
        "head.vision_proj": (cfg.d, e), "head.text_proj": (cfg.d, e),
        "head.itm.w": (cfg.d, 1), "head.itm.b": (1,), "head.temp": (),
    }


def init_backbone(cfg: BackboneConfig, seed=0):
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    params = {}
    for name, shape in {**backbone_shapes(cfg), **head_shapes(cfg)}.items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "head.temp":
            arr = np.array(0.07)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape)
        elif leaf in ("cls", "pos", "tok"):
            arr = rng.normal(0.0, 0.02, shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        params[name] = Tensor(arr.astype(dtype))
    return params


# -- default (unadapted) hooks ----------------------------------------------

class FrozenHooks:
    """Block hooks for an unadapted backbone.  The adaptation engine overrides these."""

    def project(self, encoder, layer, which, x, w):
        return x @ w

    def unimodal_block(self, encoder, layer, h, ffn):
        return h + ffn(h)

    def multimodal_block(self, encoder, layer, q, h, ffn):
        return h + ffn(h)


# -- building blocks --------------------------------------------------------

def attention_bias(batch, tq, key_mask=None, causal=False, tk=None, dtype=np.float32):
    tk = tq if tk is None else tk
    bias = np.zeros((batch, 1, tq, tk), dtype=dtype)
    if key_mask is not None:
        bias = bias + np.where(key_mask, 0.0, NEG_INF)[:, None, None, :].astype(dtype)
    if causal:
        bias = bias + np.triu(np.full((tq, tk), NEG_INF, dtype=dtype), k=1)[None, None]
    return bias


def multihead_attention(xq, xkv, wq, wk, wv, wo, heads, bias=None, project=None, return_weights=False):
    """Scaled dot-product attention over [B, T, d] inputs with optional additive bias."""
    if project is None:
        def project(which, x, w):
            return x @ w
    B, tq, d = xq.shape
    tk = xkv.shape[1]
    dh = d // heads
    q = project("q", xq, wq).reshape(B, tq, heads, dh).transpose(0, 2, 1, 3)
    k = project("k", xkv, wk).reshape(B, tk, heads, dh).transpose(0, 2, 1, 3)
    v = project("v", xkv, wv).reshape(B, tk, heads, dh).transpose(0, 2, 1, 3)
    scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = scores + Tensor(bias, dtype=scores.dtype)
    att = T.softmax(scores, axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, tq, d)
    out = project("o", out, wo)
    return (out, att) if return_weights else out


class HybridModel:
    """Forward passes of the hybrid-stream model over a flat parameter mapping.

    ``params`` maps names to tensors (a ParameterStore works too); ``hooks``
    injects adaptation at the self-attention/FFN seam of every block.
    """

    def __init__(self, cfg: BackboneConfig, params, hooks=None):
        self.cfg = cfg
        self.params = params
        self.hooks = hooks if hooks is not None else FrozenHooks()

    # -- generic blocks --
    def _self_attn(self, enc, i, x, bias):
        p = self.params
        pre = f"{enc}.{i}"
        z = T.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], self.cfg.ln_eps)

        def project(which, xx, w):
            return self.hooks.project(enc, i, which, xx, w)

        return x + multihead_attention(z, z, p[f"{pre}.attn.q"], p[f"{pre}.attn.k"],
                                       p[f"{pre}.attn.v"], p[f"{pre}.attn.o"],
                                       self.cfg.heads, bias, project)

    def _cross_attn(self, enc, i, q, kv, bias):
        p = self.params
        pre = f"{enc}.{i}"
        z = T.layer_norm(q, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], self.cfg.ln_eps)
        return q + multihead_attention(z, kv, p[f"{pre}.xattn.q"], p[f"{pre}.xattn.k"],
                                       p[f"{pre}.xattn.v"], p[f"{pre}.xattn.o"],
                                       self.cfg.heads, bias)

    def _ffn(self, enc, i, ln):
        p, eps, pre = self.params, self.cfg.ln_eps, f"{enc}.{i}"

        def f(x):
            z = T.layer_norm(x, p[f"{pre}.{ln}.g"], p[f"{pre}.{ln}.b"], eps)
            z = T.gelu(z @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"])
            return z @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]

        return f

    def _unimodal(self, enc, x, mask):
        B, L = x.shape[:2]
        bias = attention_bias(B, L, mask, dtype=x.dtype) if mask is not None else None
        for i in range(self.cfg.depth(enc)):
            h = self._self_attn(enc, i, x, bias)
            x = self.hooks.unimodal_block(enc, i, h, self._ffn(enc, i, "ln2"))
        p = self.params
        return T.layer_norm(x, p[f"{enc}.lnf.g"], p[f"{enc}.lnf.b"], self.cfg.ln_eps)

    # -- encoders --
    def encode_visual(self, patches):
        """Encode [p, patch_dim] (or [B, p, patch_dim]) patch features."""
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[1] != self.cfg.patches or x.shape[2] != self.cfg.patch_dim:
            raise ShapeError(f"expected patches [*, {self.cfg.patches}, {self.cfg.patch_dim}], "
                             f"got {tuple(x.shape)}")
        p = self.params
        B = x.shape[0]
        emb = x @ p["visual.patch.w"] + p["visual.patch.b"]
        cls = T.reshape(p["visual.cls"], (1, 1, self.cfg.d)) * Tensor(np.ones((B, 1, 1), dtype=emb.dtype))
        seq = T.concat([cls, emb], axis=1) + p["visual.pos"]
        out = self._unimodal("visual", seq, None)
        if squeeze:
            out = out[0]
        return FeatureSet(out, "visual")

    def encode_video(self, frames):
        """Encode [B, n, p, patch_dim] frame grids; returns [B, n, p+1, d]."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        B, n = x.shape[:2]
        fs = self.encode_visual(x.reshape(B * n, *x.shape[2:]))
        return fs.seq.reshape(B, n, self.cfg.patches + 1, self.cfg.d)

    def encode_text(self, tokens):
        """Encode a token list (or a batch of token lists, padded internally)."""
        single = len(tokens) == 0 or np.isscalar(tokens[0])
        batch = [list(tokens)] if single else [list(t) for t in tokens]
        ids, mask = pad_tokens(batch, self.cfg)
        p = self.params
        B, L = ids.shape
        emb = T.embedding(p["text.tok"], ids)
        cls = T.reshape(p["text.cls"], (1, 1, self.cfg.d)) * Tensor(np.ones((B, 1, 1), dtype=emb.dtype))
        seq = T.concat([cls, emb], axis=1) + p["text.pos"][: L + 1]
        full_mask = np.concatenate([np.ones((B, 1), bool), mask], axis=1)
        out = self._unimodal("text", seq, None if full_mask.all() else full_mask)
        if single:
            return FeatureSet(out[0], "text", full_mask[0])
        return FeatureSet(out, "text", full_mask)

    def fuse(self, text: FeatureSet, visual_tokens, visual_mask=None):
        """Multimodal encoder: text stream queries visual tokens in every layer."""
        v = visual_tokens if isinstance(visual_tokens, Tensor) else Tensor(visual_tokens)
        x = text.seq
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
            if v.ndim == 2:
                v = v.reshape(1, *v.shape)
        if v.shape[1] == 0:
            raise ValueError("fuse needs at least one visual token")
        B, L = x.shape[:2]
        tmask = text.mask if text.mask is None or text.mask.ndim == 2 else text.mask[None]
        sbias = attention_bias(B, L, tmask, dtype=x.dtype) if tmask is not None and not tmask.all() else None
        xbias = None
        if visual_mask is not None:
            xbias = attention_bias(B, L, visual_mask, tk=v.shape[1], dtype=x.dtype)
        for i in range(self.cfg.fusion_depth):
            q = self._self_attn("fusion", i, x, sbias)
            h = self._cross_attn("fusion", i, q, v, xbias)
            x = self.hooks.multimodal_block("fusion", i, q, h, self._ffn("fusion", i, "ln3"))
        p = self.params
        out = T.layer_norm(x, p["fusion.lnf.g"], p["fusion.lnf.b"], self.cfg.ln_eps)
        if squeeze:
            out = out[0]
        return FeatureSet(out, "fusion", text.mask)

    def decode_logits(self, fused: FeatureSet, prompt):
        """Causal decoder logits [B, L, vocab] for prompt token lists."""
        single = len(prompt) > 0 and np.isscalar(prompt[0])
        batch = [list(prompt)] if single else [list(t) for t in prompt]
        if any(len(t) == 0 for t in batch):
            raise ValueError("decoder prompt must be nonempty")
        if any(len(t) > self.cfg.max_len + 1 for t in batch):
            raise ValueError(f"decoder prompt longer than {self.cfg.max_len + 1}")
        ids, mask = pad_tokens(batch, self.cfg, limit=self.cfg.max_len + 1)
        mem = fused.seq
        mmask = fused.mask
        if mem.ndim == 2:
            mem = mem.reshape(1, *mem.shape)
            mmask = None if mmask is None else mmask[None]
        p = self.params
        B, L = ids.shape
        x = T.embedding(p["decoder.tok"], ids) + p["decoder.pos"][:L]
        sbias = attention_bias(B, L, mask, causal=True, dtype=x.dtype)
        xbias = None if mmask is None or mmask.all() else attention_bias(B, L, mmask, tk=mem.shape[1], dtype=x.dtype)
        for i in range(self.cfg.decoder_depth):
            q = self._self_attn("decoder", i, x, sbias)
            h = self._cross_attn("decoder", i, q, mem, xbias)
            x = self.hooks.multimodal_block("decoder", i, q, h, self._ffn("decoder", i, "ln3"))
        x = T.layer_norm(x, p["decoder.lnf.g"], p["decoder.lnf.b"], self.cfg.ln_eps)
        logits = x @ p["decoder.head"]
        return logits[0] if single else logits

    def decode_answer(self, fused: FeatureSet, prompt):
        """Per-position vocabulary distributions for the prompt."""
        return T.softmax(self.decode_logits(fused, prompt), axis=-1)

    def greedy_decode(self, fused: FeatureSet, max_new=4):
        """Greedy answer generation from BOS; returns token lists without BOS/EOS."""
        B = 1 if fused.seq.ndim == 2 else fused.seq.shape[0]
        seqs = [[BOS] for _ in range(B)]
        done = [False] * B
        with T.no_grad():
            for _ in range(max_new):
                logits = self.decode_logits(fused, seqs if B > 1 or fused.seq.ndim == 3 else seqs[0])
                data = logits.data if logits.ndim == 3 else logits.data[None]
                for b in range(B):
                    if done[b]:
                        seqs[b].append(PAD)
                        continue
                    tok = int(np.argmax(data[b, len(seqs[b]) - 1]))
                    seqs[b].append(tok)
                    done[b] = tok == EOS
                if all(done):
                    break
        out = []
        for s in seqs:
            ans = []
            for t in s[1:]:
                if t in (EOS, PAD):
                    break
                ans.append(t)
            out.append(ans)
        return out

    # -- task heads --
    def embed(self, cls, which):
        """L2-normalised contrastive embedding of CLS features."""
        w = self.params["head.vision_proj" if which == "visual" else "head.text_proj"]
        return T.l2_normalize(cls @ w, axis=-1)

    def itm_logits(self, fused_cls):
        p = self.params
        return (fused_cls @ p["head.itm.w"] + p["head.itm.b"]).reshape(-1)


def pad_tokens(batch, cfg, limit=None):
    limit = cfg.max_len if limit is None else limit
    L = max((len(t) for t in batch), default=0)
    if L > limit:
        raise ValueError(f"token sequence of length {L} exceeds max_len={limit}")
    ids = np.full((len(batch), L), PAD, dtype=np.int64)
    mask = np.zeros((len(batch), L), dtype=bool)
    for b, toks in enumerate(batch):
        arr = np.asarray(toks, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab):
            raise IndexError(f"token index out of range [0, {cfg.vocab})")
        ids[b, : len(arr)] = arr
        mask[b, : len(arr)] = True
    return ids, mask
