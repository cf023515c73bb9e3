"""Training loops, optimizer and evaluation for the desk-scale workflows."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
import queue
import threading

import numpy as np

from . import tensor as T
from .adaptation import AdaptationConfig
from .frames import VideoFeatures, frame_concat, pfa_apply, pfa_weights
from .objectives import (MetricsRecord, contrastive_loss, hardest_negatives, itm_loss, lm_loss,
                         retrieval_metrics, similarity, teacher_forcing, vqa_accuracy)

log = logging.getLogger(__name__)

TEMP_RANGE = (0.001, 0.5)

# Base learning rates picked on the desk-scale world: bottleneck adapters with
# s = 0.1 need a much larger step than dense weights to move in five epochs.
PRETRAIN_LR = 2e-3
VARIANT_LR = {"full_finetune": 1e-3, "none": 1e-3}
ADAPTER_LR = 3e-2


def default_lr(variant, pretrain=False):
    if pretrain:
        return PRETRAIN_LR
    return VARIANT_LR.get(variant, ADAPTER_LR)


class DivergenceError(RuntimeError):
    pass


class AdamW:
    """Decoupled weight-decay Adam over (name, tensor) pairs."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params}
        self.t = 0

    def zero_grad(self):
        for _, t in self.params:
            t.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for n, t in self.params:
            if t.grad is None:
                continue
            g = t.grad.astype(t.data.dtype, copy=False)
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.wd and t.data.ndim >= 2:
                t.data -= (lr * self.wd) * t.data
            t.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(t.data.dtype)


def cosine_lr(step, total, base_lr, warmup_frac=0.05):
    """Linear warmup over ``warmup_frac`` of the steps, cosine decay to zero after."""
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return base_lr * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(1.0, progress)))


def prefetch(iterable, depth=2):
    """Produce items on a background thread through a bounded queue."""
    q = queue.Queue(maxsize=depth)
    sentinel = object()

    def producer():
        try:
            for item in iterable:
                q.put(item)
        finally:
            q.put(sentinel)

    th = threading.Thread(target=producer, daemon=True)
    th.start()
    while True:
        item = q.get()
        if item is sentinel:
            break
        yield item
    th.join()


# -- batching ---------------------------------------------------------------

@dataclass
class Batch:
    visual: np.ndarray
    captions: list
    questions: list = field(default_factory=list)
    answers: list = field(default_factory=list)

    @property
    def size(self):
        return self.visual.shape[0]


def collate(samples):
    return Batch(np.stack([s.payload for s in samples]).astype(T.get_default_dtype()),
                 [list(s.caption) for s in samples],
                 [list(s.question) for s in samples],
                 [list(s.answer) for s in samples])


def batches(samples, batch_size, rng=None, drop_last=True):
    idx = np.arange(len(samples))
    if rng is not None:
        rng.shuffle(idx)
    stop = len(idx) - (len(idx) % batch_size if drop_last else 0)
    for i in range(0, stop, batch_size):
        chunk = idx[i: i + batch_size]
        if len(chunk) >= 2 or not drop_last:
            yield collate([samples[j] for j in chunk])


# -- forward passes ---------------------------------------------------------

def _adapt_cfg(model):
    return getattr(model, "adapt_cfg", None) or AdaptationConfig.for_variant("none")


def encode_pair_batch(model, batch: Batch):
    """Unimodal features; videos are encoded frame by frame."""
    t = model.encode_text(batch.captions)
    if batch.visual.ndim == 4:
        frames = model.encode_video(batch.visual)
        v_cls = T.mean(frames[:, :, 0, :], axis=1)
        return t, frames, v_cls
    v = model.encode_visual(batch.visual)
    return t, v.seq, v.cls


def pfa_tokens(model, video: VideoFeatures, text_cls):
    """Fusion input for videos; PFA scores frames against text in the shared projection space."""
    cfg = _adapt_cfg(model)
    if not cfg.pfa:
        return frame_concat(video)
    p = model.params
    weights = pfa_weights(video.cls @ p["head.vision_proj"], text_cls @ p["head.text_proj"],
                          normalize=cfg.pfa_normalize, stop_grad=cfg.pfa_stop_grad)
    return pfa_apply(video, weights)


def _visual_tokens(model, visual, idx, text_cls):
    sel = visual[idx]
    if sel.ndim == 4:
        return pfa_tokens(model, VideoFeatures(sel), text_cls)
    return sel


def retrieval_loss(model, batch: Batch):
    """ITC + ITM with in-batch hardest negatives."""
    t, visual, v_cls = encode_pair_batch(model, batch)
    temp = model.params["head.temp"]
    v_emb = model.embed(v_cls, "visual")
    t_emb = model.embed(t.cls, "text")
    itc = contrastive_loss(v_emb, t_emb, temp)
    B = batch.size
    sim = similarity(t_emb, v_emb, temp).data
    neg_v = hardest_negatives(sim)      # hardest visual for each text
    neg_t = hardest_negatives(sim.T)    # hardest text for each visual
    ti = np.concatenate([np.arange(B), np.arange(B), neg_t])
    vi = np.concatenate([np.arange(B), neg_v, np.arange(B)])
    labels = np.concatenate([np.ones(B), np.zeros(2 * B)])
    text_seq = t.seq[ti]
    text_mask = None if t.mask is None else t.mask[ti]
    from .backbone import FeatureSet
    tfs = FeatureSet(text_seq, "text", text_mask)
    vis = _visual_tokens(model, visual, vi, t.cls[ti])
    fused = model.fuse(tfs, vis)
    itm = itm_loss(model.itm_logits(fused.cls), labels)
    return itc + itm, {"itc": float(itc.data), "itm": float(itm.data)}


def vqa_loss(model, batch: Batch):
    v = model.encode_visual(batch.visual)
    q = model.encode_text(batch.questions)
    fused = model.fuse(q, v.seq)
    prompts, _ = teacher_forcing(batch.answers)
    logits = model.decode_logits(fused, prompts)
    lm = lm_loss(logits, batch.answers)
    return lm, {"lm": float(lm.data)}


def task_loss(model, batch, task, pretrain=False):
    if task == "vqa":
        lm, parts = vqa_loss(model, batch)
        if pretrain:
            ret, p2 = retrieval_loss(model, batch)
            parts.update(p2)
            return lm + ret, parts
        return lm, parts
    return retrieval_loss(model, batch)


# -- training ---------------------------------------------------------------

def train(model, samples, task, run_cfg, epochs, pretrain=False, on_step=None, max_steps=0):
    """AdamW + warmup/cosine over the store's trainable set; returns per-step losses."""
    opt_cfg = run_cfg.optimizer
    bs = run_cfg.task.batch_size
    steps_per_epoch = len(samples) // bs
    total = steps_per_epoch * epochs
    if max_steps:
        total = min(total, max_steps) if total else max_steps
    params = model.store.trainable_items()
    lr = opt_cfg.lr if opt_cfg.lr is not None else default_lr(_adapt_cfg(model).variant, pretrain)
    opt = AdamW(params, lr, (opt_cfg.beta1, opt_cfg.beta2), opt_cfg.eps, opt_cfg.weight_decay)
    rng = np.random.default_rng(run_cfg.task.seed)
    losses = []
    step = 0
    temp = model.params["head.temp"]
    while step < total:
        for batch in prefetch(batches(samples, bs, rng)):
            if step >= total:
                break
            opt.zero_grad()
            loss, parts = task_loss(model, batch, task, pretrain)
            val = float(loss.data)
            if not math.isfinite(val):
                raise DivergenceError(f"loss became {val} at step {step} ({parts})")
            T.backward(loss)
            opt.step(cosine_lr(step, total, lr, opt_cfg.warmup_frac))
            if temp.requires_grad:
                np.clip(temp.data, *TEMP_RANGE, out=temp.data)
            losses.append(val)
            if on_step is not None:
                on_step(step, val, parts)
            step += 1
    return losses


# -- evaluation -------------------------------------------------------------

def retrieval_scores(model, samples, eval_batch=64):
    """Text x visual cosine-similarity matrix over ``samples`` (ITC scoring)."""
    t_embs, v_embs = [], []
    with T.no_grad():
        for batch in batches(samples, eval_batch, None, drop_last=False):
            t, _, v_cls = encode_pair_batch(model, batch)
            t_embs.append(model.embed(t.cls, "text").data)
            v_embs.append(model.embed(v_cls, "visual").data)
    t_all, v_all = np.concatenate(t_embs), np.concatenate(v_embs)
    return t_all @ v_all.T


def evaluate(model, samples, task, split="test", step=None, eval_batch=64):
    if task == "vqa":
        preds, gold = [], []
        losses = []
        with T.no_grad():
            for batch in batches(samples, eval_batch, None, drop_last=False):
                v = model.encode_visual(batch.visual)
                q = model.encode_text(batch.questions)
                fused = model.fuse(q, v.seq)
                preds.extend(model.greedy_decode(fused, max_new=3))
                gold.extend(batch.answers)
                losses.append(float(vqa_loss(model, batch)[0].data) * batch.size)
        rec = MetricsRecord(acc=vqa_accuracy(preds, gold), split=split, step=step, task=task)
        rec.loss = sum(losses) / len(samples)
        return rec
    scores = retrieval_scores(model, samples, eval_batch)
    rec = retrieval_metrics(scores, split=split, step=step)
    rec.task = task
    return rec


def backbone_names(store):
    return [n for n in store.canonical_names() if not n.startswith(("adapter.", "lora."))]


def frozen_backbone_names(store):
    return [n for n in backbone_names(store) if n not in store.trainable]
