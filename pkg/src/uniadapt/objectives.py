"""Training losses and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass
import csv
import io
import os

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .backbone import BOS, EOS

CSV_FIELDS = ("step", "split", "task", "loss", "r1", "r5", "r10", "mdr", "rmean", "acc")


def similarity(t_emb, v_emb, temp):
    """Text-row x visual-column cosine similarities divided by the temperature."""
    t_n, v_n = T.l2_normalize(t_emb), T.l2_normalize(v_emb)
    sim = t_n @ T.swapaxes(v_n, -1, -2)
    if isinstance(temp, Tensor):
        return T.div(sim, temp)
    return T.scale(sim, 1.0 / temp)


def contrastive_loss(v_cls, t_cls, temp=0.07):
    """Symmetric in-batch cross-entropy over the scaled cosine-similarity matrix."""
    B = v_cls.shape[0]
    if B < 2 or t_cls.shape[0] != B:
        raise ValueError(f"contrastive loss needs equal batches of size >= 2, got {v_cls.shape[0]} and {t_cls.shape[0]}")
    sim = similarity(t_cls, v_cls, temp)
    target = np.arange(B)
    return T.scale(T.cross_entropy(sim, target) + T.cross_entropy(T.swapaxes(sim, 0, 1), target), 0.5)


def hardest_negatives(sim):
    """Per row, the off-diagonal column of maximal similarity (lowest index on ties)."""
    s = np.array(sim, dtype=np.float64, copy=True)
    np.fill_diagonal(s, -np.inf)
    return np.argmax(s, axis=1)


def itm_loss(logits, labels):
    """Binary cross-entropy of matching logits; needs both classes present."""
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        raise ValueError("itm batch needs at least one positive and one negative")
    return T.bce_with_logits(logits, labels)


def teacher_forcing(answers):
    """Decoder prompts [BOS, a...] and targets [a..., EOS] for answer token lists."""
    if any(len(a) == 0 for a in answers):
        raise ValueError("answers must be nonempty")
    prompts = [[BOS] + list(a) for a in answers]
    targets = [list(a) + [EOS] for a in answers]
    return prompts, targets


def lm_loss(logits, answers):
    """Mean token cross-entropy of decoder logits (from teacher-forced prompts)."""
    _, targets = teacher_forcing(answers)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
    B, L = logits.shape[:2]
    tgt = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, t in enumerate(targets):
        tgt[b, : len(t)] = t
        mask[b, : len(t)] = True
    return T.cross_entropy(logits, tgt, mask)


@dataclass
class MetricsRecord:
    r1: float | None = None
    r5: float | None = None
    r10: float | None = None
    mdr: float | None = None
    rmean: float | None = None
    acc: float | None = None
    split: str = ""
    step: int | None = None
    task: str = ""
    loss: float | None = None

    def as_row(self):
        row = {}
        for f in CSV_FIELDS:
            v = getattr(self, f)
            row[f] = "" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))
        return row


def write_metrics_csv(path, records, append=True):
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if not (append and exists):
            w.writeheader()
        for r in records:
            w.writerow(r.as_row())


def metrics_csv_text(records):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.as_row())
    return buf.getvalue()


def ranks_of_truth(scores, truth):
    """1-based rank of each query's ground-truth item; ties go to the lower gallery index."""
    scores = np.asarray(scores)
    truth = np.asarray(truth)
    q = np.arange(scores.shape[0])
    gt = scores[q, truth][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    better = (scores > gt) | ((scores == gt) & (idx < truth[:, None]))
    return better.sum(axis=1) + 1


def retrieval_metrics(scores, truth=None, ks=(1, 5, 10), split="", step=None):
    """R@K percentages, median rank and mean recall for a [Q, G] score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    Q, G = scores.shape
    truth = np.arange(Q) if truth is None else np.asarray(truth)
    if max(ks) > G:
        raise ValueError(f"K={max(ks)} exceeds gallery size {G}")
    ranks = ranks_of_truth(scores, truth)
    rec = {k: 100.0 * float(np.mean(ranks <= k)) for k in ks}
    out = MetricsRecord(split=split, step=step)
    out.r1, out.r5, out.r10 = rec.get(1), rec.get(5), rec.get(10)
    out.mdr = float(np.median(ranks))
    out.rmean = float(np.mean(list(rec.values())))
    return out


def vqa_accuracy(predicted, gold):
    if len(predicted) != len(gold):
        raise ValueError("prediction and gold counts differ")
    if not gold:
        return 0.0
    hits = sum(1 for p, g in zip(predicted, gold) if list(p) == list(g))
    return 100.0 * hits / len(gold)
