"""Desk-scale experiment drivers shared by the scripts, the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace
import time

import numpy as np

from . import tensor as T
from .adaptation import AdaptationConfig, build_model
from .config import RunConfig
from .data import generate
from .train import evaluate, train

TRANSFER_VARIANTS = ("linear_probe", "sequential_adapter", "uniadapter", "full_finetune")


@dataclass
class TransferResult:
    variant: str
    record: object
    final_loss: float
    seconds: float

    @property
    def score(self):
        """R@1 for retrieval, accuracy for VQA."""
        return self.record.acc if self.record.task == "vqa" else self.record.r1


def pretrain_backbone(cfg: RunConfig, task=None, epochs=None, seed=None):
    """Train every backbone weight on the pretraining split; returns name -> array."""
    task = task or cfg.task.task
    model = build_model(cfg.backbone, AdaptationConfig.for_variant("full_finetune", train_temperature=True),
                        seed=cfg.task.seed if seed is None else seed,
                        include_decoder=task == "vqa")
    samples = generate(cfg.world, task, "pretrain")
    train(model, samples, task, cfg, epochs or cfg.task.pretrain_epochs, pretrain=True)
    return {n: model.store[n].data.copy() for n in model.store.canonical_names()}


def adapt_from(backbone: dict, cfg: RunConfig, acfg: AdaptationConfig, task=None):
    """Fresh copy of ``backbone`` wrapped by the plan of ``acfg``."""
    params = {n: T.Tensor(np.array(a, copy=True)) for n, a in backbone.items()}
    return build_model(cfg.backbone, acfg, params=params, seed=cfg.task.seed,
                       include_decoder=(task or cfg.task.task) == "vqa")


def transfer_ordering(cfg: RunConfig | None = None, backbone=None, variants=TRANSFER_VARIANTS,
                      task="retrieval-image", log=None):
    """Adapt one pretrained backbone with each variant on the shifted split."""
    cfg = cfg or RunConfig()
    cfg = replace(cfg, task=replace(cfg.task, task=task))
    if backbone is None:
        backbone = pretrain_backbone(cfg, task)
    train_set = generate(cfg.world, task, "train")
    test_set = generate(cfg.world, task, "test")
    out = {}
    for v in variants:
        acfg = AdaptationConfig.for_variant(v, r=cfg.adaptation.r)
        model = adapt_from(backbone, cfg, acfg, task)
        t0 = time.perf_counter()
        losses = train(model, train_set, task, cfg, cfg.task.epochs)
        rec = evaluate(model, test_set, task)
        out[v] = res = TransferResult(v, rec, losses[-1], time.perf_counter() - t0)
        if log:
            name = "acc" if task == "vqa" else "R@1"
            log(f"{v:<20} {name} {res.score:6.2f}  loss {res.final_loss:.3f}  {res.seconds:.1f}s")
    return out


def pfa_salience(backbone: dict, cfg: RunConfig | None = None, n=200, n_frames=8, offset=0, chunk=50):
    """Share of videos whose salient frames get a higher mean PFA weight than the distractors.

    Videos carry one salient frame (every other frame is a distractor) and are
    drawn from indices ``offset..offset+n``; offset 0 is the pretraining
    distribution. Weights are computed exactly as the fusion input sees them.
    """
    from .data import gen_video_pair
    from .frames import pfa_weights

    cfg = cfg or RunConfig()
    world = replace(cfg.world, noise_frame_prob=1.0)
    model = adapt_from(backbone, cfg, AdaptationConfig.for_variant("none"), "retrieval-image")
    p = model.params
    samples = [gen_video_pair(world, offset + i, n_frames) for i in range(n)]
    wins = 0
    with T.no_grad():
        for i in range(0, n, chunk):
            part = samples[i: i + chunk]
            frames = model.encode_video(np.stack([s.payload for s in part]).astype(T.get_default_dtype()))
            text = model.encode_text([s.caption for s in part])
            a = pfa_weights(frames[:, :, 0, :] @ p["head.vision_proj"], text.cls @ p["head.text_proj"]).data
            for s, w in zip(part, a):
                sal = np.zeros(n_frames, bool)
                sal[s.salient] = True
                wins += bool(w[sal].mean() > w[~sal].mean())
    return wins / n
