"""Finite-difference verification of every differentiable op and adapter form.

Runs in 64-bit on tiny shapes (d=8, r=2, two layers).  Each case returns a
closure producing a scalar and the tensors to differentiate; the report lists
the max relative error per op and fails any op above the tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass
import time

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .adaptation import (AdaptationConfig, AdaptationEngine, AdapterUnit, ParameterStore,
                         bottleneck_forward, build_model, crossmodal_delta, lora_linear)
from .backbone import BackboneConfig, multihead_attention
from .frames import VideoFeatures, frame_concat, pfa_apply, pfa_weights, video_visual_tokens
from .objectives import contrastive_loss, itm_loss, lm_loss

TOL = 1e-6
STEP = 1e-4
D, R = 8, 2


@dataclass
class OpResult:
    op: str
    error: float
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < self.tol)


def tiny_backbone(**kw):
    base = dict(d=D, heads=2, visual_depth=2, text_depth=2, fusion_depth=2, decoder_depth=2,
                patches=3, patch_dim=5, vocab=12, max_len=6, ffn_mult=2)
    base.update(kw)
    return BackboneConfig(**base)


def _p(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


def _w(rng, *shape):
    return _p(rng, *shape, scale=1.0 / np.sqrt(shape[0]))


# -- primitive cases ---------------------------------------------------------

def _unary(fn, positive=False):
    def case(rng):
        x = _p(rng, 3, 4)
        if positive:
            x.data = np.abs(x.data) + 0.5
        c = Tensor(rng.normal(size=(3, 4)))
        return (lambda: T.tsum(fn(x) * c)), [x]
    return case


def _binary(fn, positive_b=False):
    def case(rng):
        a, b = _p(rng, 3, 4), _p(rng, 1, 4)
        if positive_b:
            b.data = np.abs(b.data) + 0.5
        c = Tensor(rng.normal(size=(3, 4)))
        return (lambda: T.tsum(fn(a, b) * c)), [a, b]
    return case


def _case_matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    return (lambda: _weighted_fixed(a @ b, 0)), [a, b]


def _case_batched_matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 2, 4, 3)
    return (lambda: _weighted_fixed(a @ b, 1)), [a, b]


def _weighted_fixed(out, seed):
    """Fixed random linear functional of ``out`` so every output entry matters."""
    c = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return T.tsum(out * c)


def _case_softmax(rng):
    x = _p(rng, 3, 5)
    return (lambda: _weighted_fixed(T.softmax(x, axis=-1), 2)), [x]


def _case_log_softmax(rng):
    x = _p(rng, 3, 5)
    return (lambda: _weighted_fixed(T.log_softmax(x, axis=0), 3)), [x]


def _case_layer_norm(rng):
    x, g, b = _p(rng, 2, 3, D), _p(rng, D), _p(rng, D)
    return (lambda: _weighted_fixed(T.layer_norm(x, g, b), 4)), [x, g, b]


def _case_cross_entropy(rng):
    x = _p(rng, 4, 6)
    tgt = np.array([0, 5, 2, 3])
    mask = np.array([1.0, 1.0, 0.0, 1.0])
    return (lambda: T.cross_entropy(x, tgt, mask)), [x]


def _case_bce(rng):
    x = _p(rng, 6)
    y = np.array([1, 0, 0, 1, 1, 0], dtype=float)
    return (lambda: T.bce_with_logits(x, y)), [x]


def _case_l2(rng):
    x = _p(rng, 3, 4)
    return (lambda: _weighted_fixed(T.l2_normalize(x), 5)), [x]


def _case_reduce(rng):
    x = _p(rng, 2, 3, 4)
    return (lambda: T.tsum(T.mean(x, axis=1) * T.mean(x, axis=1)) + T.tsum(x, axis=None) * 0.3), [x]


def _case_shape_ops(rng):
    x = _p(rng, 2, 3, 4)
    y = _p(rng, 2, 3, 4)

    def f():
        z = T.concat([T.reshape(x, (2, 12)), T.reshape(T.swapaxes(y, 1, 2), (2, 12))], axis=1)
        return _weighted_fixed(T.transpose(z), 6) + _weighted_fixed(x[:, 1:, ::2], 7)
    return f, [x, y]


def _case_embedding(rng):
    w = _p(rng, 6, 4)
    idx = np.array([[0, 2, 2], [5, 1, 0]])
    return (lambda: _weighted_fixed(T.embedding(w, idx), 8)), [w]


def _case_attention(rng):
    xq, xkv = _p(rng, 2, 3, D), _p(rng, 2, 4, D)
    ws = [_w(rng, D, D) for _ in range(4)]
    bias = np.zeros((2, 1, 1, 4))
    bias[1, ..., -1] = -1e9
    return (lambda: _weighted_fixed(multihead_attention(xq, xkv, *ws, heads=2, bias=bias), 9)), [xq, xkv, *ws]


# -- adapter forms ------------------------------------------------------------

def _case_adapter(act):
    def case(rng):
        x, down, up = _p(rng, 2, 3, D), _w(rng, D, R), _w(rng, R, D)
        return (lambda: _weighted_fixed(bottleneck_forward(x, down, up, 0.1, act), 10)), [x, down, up]
    return case


def _case_uniadapter_unimodal(rng):
    """Shared down, modality-specific ups, applied to visual and textual features."""
    xv, xt = _p(rng, 2, 4, D), _p(rng, 2, 3, D)
    down, uv, ut = _w(rng, D, R), _w(rng, R, D), _w(rng, R, D)

    def f():
        return (_weighted_fixed(bottleneck_forward(xv, down, uv, 0.1), 11)
                + _weighted_fixed(bottleneck_forward(xt, down, ut, 0.1), 12))
    return f, [xv, xt, down, uv, ut]


def _case_uniadapter_crossmodal(rng):
    x, down, ut, uc = _p(rng, 2, 3, D), _w(rng, D, R), _w(rng, R, D), _w(rng, R, D)
    return (lambda: _weighted_fixed(x + crossmodal_delta(x, down, ut, uc, 0.1), 13)), [x, down, ut, uc]


def _case_lora(rng):
    x, w, a, b = _p(rng, 2, 3, D), _w(rng, D, D), _w(rng, D, R), _w(rng, R, D)
    return (lambda: _weighted_fixed(lora_linear(x, w, a, b, 4.0), 14)), [x, w, a, b]


def _ffn_closure(rng):
    g, b = _p(rng, D), _p(rng, D)
    w1, b1, w2, b2 = _w(rng, D, 2 * D), _p(rng, 2 * D), _w(rng, 2 * D, D), _p(rng, D)

    def ffn(h):
        z = T.layer_norm(h, g, b)
        return T.gelu(z @ w1 + b1) @ w2 + b2
    return ffn, [g, b, w1, b1, w2, b2]


def _engine(variant, rng, modalities="VTC", **kw):
    """AdaptationEngine over a hand-built store with random (nonzero) adapter weights."""
    acfg = AdaptationConfig.for_variant(variant, r=R, modalities=frozenset(modalities), **kw)
    store = ParameterStore()
    units = {}
    shared_down = None
    for m, enc in (("T", "text"), ("V", "visual"), ("C", "fusion")):
        if m not in modalities:
            continue
        if variant == "uniadapter" and acfg.sharing in ("share_down", "share_both") and shared_down:
            down = shared_down
        else:
            down = f"adapter.{enc}.0.down"
            store.add(down, _w(rng, D, R))
            shared_down = shared_down or down
        ups = {}
        for um in ("T", "C") if (m == "C" and variant == "uniadapter") else (m,):
            name = f"adapter.{enc}.0.up.{um}"
            if um == "T" and m == "C":
                name = "adapter.text.0.up.T"
            elif name not in store:
                store.add(name, _w(rng, R, D))
            ups[um] = name
        units[(enc, 0)] = AdapterUnit(enc, 0, down, ups)
    query_units = {0: units[("text", 0)]} if acfg.query_residual else {}
    return AdaptationEngine(acfg, store, units, {}, query_units), store


def _case_block(variant, encoder, **kw):
    def case(rng):
        eng, store = _engine(variant, rng, **kw)
        ffn, fp = _ffn_closure(rng)
        h, q = _p(rng, 2, 3, D), _p(rng, 2, 3, D)
        adapter_params = [store[n] for n in store.canonical_names()]
        if encoder == "fusion":
            def f():
                return _weighted_fixed(eng.multimodal_block("fusion", 0, q, h, ffn), 15)
            return f, [h, q, *adapter_params, *fp]

        def f():
            return _weighted_fixed(eng.unimodal_block(encoder, 0, h, ffn), 16)
        return f, [h, *adapter_params, *fp]
    return case


def _case_pfa_weights(rng):
    fc, tc = _p(rng, 2, 4, D, scale=0.5), _p(rng, 2, D, scale=0.5)
    return (lambda: _weighted_fixed(pfa_weights(fc, tc), 17)), [fc, tc]


def _case_pfa_apply(rng):
    frames = _p(rng, 2, 3, 4, D)
    wts = _p(rng, 2, 3)
    return (lambda: _weighted_fixed(pfa_apply(VideoFeatures(frames), wts), 18)), [frames, wts]


def _case_video_tokens(rng):
    frames, tc = _p(rng, 2, 3, 4, D, scale=0.5), _p(rng, 2, D, scale=0.5)

    def f():
        v = VideoFeatures(frames)
        return (_weighted_fixed(video_visual_tokens(v, tc, use_pfa=True), 19)
                + _weighted_fixed(frame_concat(v), 20))
    return f, [frames, tc]


# -- objectives -------------------------------------------------------------

def _case_itc(rng):
    v, t = _p(rng, 4, D), _p(rng, 4, D)
    temp = Tensor(np.array([0.2]), requires_grad=True)
    return (lambda: contrastive_loss(v, t, temp)), [v, t, temp]


def _case_itm(rng):
    x = _p(rng, 6)
    y = np.array([1, 1, 0, 0, 0, 0])
    return (lambda: itm_loss(x, y)), [x]


def _case_lm(rng):
    logits = _p(rng, 2, 4, 7)
    answers = [[4, 5], [6]]
    return (lambda: lm_loss(logits, answers)), [logits]


# -- whole tiny models -------------------------------------------------------

def _randomize(store, rng, names):
    for n in names:
        store[n].data[...] = rng.normal(0, 0.5, store[n].shape)


def _case_model(variant, task="image", **kw):
    def case(rng):
        from .train import Batch, retrieval_loss, vqa_loss
        bcfg = tiny_backbone()
        # Smooth activation here: a ReLU kink within one finite-difference step of a
        # pre-activation would swamp the comparison.  ReLU forms are checked above.
        acfg = AdaptationConfig.for_variant(variant, r=R, lora_rank=R, lora_alpha=float(R),
                                            activation="gelu", **kw)
        model = build_model(bcfg, acfg, seed=int(rng.integers(1 << 30)), include_decoder=task == "vqa")
        store = model.store
        names = [n for n in store.canonical_names() if n.startswith(("adapter.", "lora."))]
        _randomize(store, rng, names)
        inputs = [store[n] for n in names]
        B = 3
        if task == "video":
            visual = rng.normal(size=(B, 2, bcfg.patches, bcfg.patch_dim))
        else:
            visual = rng.normal(size=(B, bcfg.patches, bcfg.patch_dim))
        caps = [[5, 6, 7], [8, 3], [9, 4, 10, 11]]
        batch = Batch(visual, caps, caps, [[4, 5], [6], [7, 8]])
        if task == "vqa":
            return (lambda: vqa_loss(model, batch)[0]), inputs
        return (lambda: retrieval_loss(model, batch)[0]), inputs
    return case


def cases():
    """Ordered mapping of op name -> case builder."""
    c = {
        "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul),
        "div": _binary(T.div, positive_b=True), "neg": _unary(T.neg),
        "scale": _unary(lambda x: T.scale(x, 0.37)), "power": _unary(lambda x: T.power(x, 3)),
        "exp": _unary(T.exp), "log": _unary(T.log, positive=True), "relu": _unary(T.relu),
        "gelu": _unary(T.gelu), "tanh": _unary(T.tanh), "sigmoid": _unary(T.sigmoid),
        "sum/mean": _case_reduce, "reshape/transpose/concat/getitem": _case_shape_ops,
        "embedding": _case_embedding, "matmul": _case_matmul, "matmul.batched": _case_batched_matmul,
        "softmax": _case_softmax, "log_softmax": _case_log_softmax, "layer_norm": _case_layer_norm,
        "cross_entropy": _case_cross_entropy, "bce_with_logits": _case_bce, "l2_normalize": _case_l2,
        "attention": _case_attention,
        "adapter.relu": _case_adapter("relu"), "adapter.gelu": _case_adapter("gelu"),
        "uniadapter.unimodal": _case_uniadapter_unimodal,
        "uniadapter.crossmodal": _case_uniadapter_crossmodal,
        "lora.linear": _case_lora,
        "block.sequential.unimodal": _case_block("sequential_adapter", "text", modalities="T"),
        "block.sequential.fusion": _case_block("sequential_adapter", "fusion", modalities="C"),
        "block.parallel.unimodal": _case_block("parallel_adapter", "visual", modalities="V"),
        "block.parallel.fusion": _case_block("parallel_adapter", "fusion", modalities="C"),
        "block.parallel.query_residual": _case_block("parallel_adapter", "fusion", modalities="TC",
                                                     query_residual=True),
        "block.uniadapter.unimodal": _case_block("uniadapter", "visual", query_residual=False, pfa=False),
        "block.uniadapter.fusion": _case_block("uniadapter", "fusion", query_residual=False),
        "block.uniadapter.query_residual": _case_block("uniadapter", "fusion"),
        "block.uniadapter.query_residual.verbatim": _case_block("uniadapter", "fusion",
                                                                query_residual_form="verbatim"),
        "pfa.weights": _case_pfa_weights, "pfa.apply": _case_pfa_apply, "pfa.video_tokens": _case_video_tokens,
        "loss.itc": _case_itc, "loss.itm": _case_itm, "loss.lm": _case_lm,
        "model.sequential_adapter": _case_model("sequential_adapter"),
        "model.parallel_adapter": _case_model("parallel_adapter"),
        "model.lora": _case_model("lora"),
        "model.uniadapter.no_share": _case_model("uniadapter", sharing="no_share"),
        "model.uniadapter.share_up": _case_model("uniadapter", sharing="share_up"),
        "model.uniadapter.share_both": _case_model("uniadapter", sharing="share_both"),
        "model.uniadapter.video_pfa": _case_model("uniadapter", task="video"),
        "model.uniadapter.vqa": _case_model("uniadapter", task="vqa"),
    }
    return c


def run_gradcheck(seed=0, tol=TOL, only=None, step=STEP):
    """Return one OpResult per case; runs under 64-bit default dtype."""
    table = cases()
    unknown = sorted(set(only or ()) - set(table))
    if unknown:
        raise KeyError(f"unknown gradcheck op(s): {', '.join(unknown)}")
    results = []
    with T.default_dtype(np.float64):
        for i, (name, build) in enumerate(table.items()):
            if only is not None and name not in only:
                continue
            rng = np.random.default_rng([seed, i])
            f, inputs = build(rng)
            results.append(OpResult(name, T.check_grad(f, inputs, step), tol))
    return results


def report(results):
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.op:<42} max rel err {r.error:.2e}" for r in results]
    failed = [r.op for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} ops passed"
                 + (f"; failing: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)


if __name__ == "__main__":  # pragma: no cover
    t0 = time.perf_counter()
    res = run_gradcheck()
    print(report(res))
    print(f"{time.perf_counter() - t0:.1f}s")
