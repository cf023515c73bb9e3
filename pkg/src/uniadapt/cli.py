"""Command-line entry point: gen-data | pretrain | adapt | eval | params | gradcheck."""
from __future__ import annotations

import argparse
from dataclasses import replace
import logging
import os
import sys
import time

import numpy as np

from . import tensor as T
from .adaptation import (AdaptationConfig, ConfigError, build_model, build_parameter_plan,
                         count_tunable)
from .backbone import BackboneConfig
from .checkpoint import CheckpointError, checksum, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import DataError, load_split, write_dataset
from .objectives import MetricsRecord, write_metrics_csv
from .train import DivergenceError, evaluate, frozen_backbone_names, train

log = logging.getLogger("uniadapt")


class CommandError(RuntimeError):
    """A refused command; the message is shown to the user and the exit code is 2."""


def _config(args) -> RunConfig:
    path = getattr(args, "config", None)
    cfg = load_config(path) if path else RunConfig().with_env()
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = replace(cfg, task=replace(cfg.task, seed=seed))
    return cfg


def _path(explicit, configured, what):
    p = explicit or configured
    if not p:
        raise CommandError(f"no {what} path: pass it as a flag, set it in the config, "
                           f"or use the UNIADAPT_* environment variables")
    return p


def _metrics_path(args, cfg, default_dir):
    return args.metrics or cfg.task.metrics or os.path.join(default_dir, "metrics.csv")


def _step_logger(cfg, task, split, records):
    every = cfg.task.log_every

    def on_step(step, loss, parts):
        records.append(MetricsRecord(split=split, step=step, task=task, loss=loss))
        if every and step % every == 0:
            detail = " ".join(f"{k}={v:.4f}" for k, v in parts.items())
            log.info("step %d loss %.4f %s", step, loss, detail)
    return on_step


def _vqa(cfg):
    return cfg.task.task == "vqa"


# -- gen-data ------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _config(args)
    world = cfg.world if args.seed is None else replace(cfg.world, seed=args.seed)
    out = _path(args.out, cfg.task.data, "data output")
    manifest = write_dataset(world, cfg.task.task, out)
    for split, info in manifest["splits"].items():
        print(f"{split}: {info['count']} records -> {os.path.join(out, info['file'])}")
    print(f"spec hash {manifest['spec_hash']}")
    return 0


# -- pretrain -----------------------------------------------------------------

def cmd_pretrain(args):
    cfg = _config(args)
    data = _path(args.data, cfg.task.data, "data")
    task = cfg.task.task
    samples = load_split(data, "pretrain", cfg.world)
    acfg = AdaptationConfig.for_variant("full_finetune", train_temperature=True)
    model = build_model(cfg.backbone, acfg, seed=cfg.task.seed, include_decoder=_vqa(cfg))
    records = []
    t0 = time.perf_counter()
    try:
        train(model, samples, task, cfg, cfg.task.pretrain_epochs, pretrain=True,
              on_step=_step_logger(cfg, task, "pretrain", records), max_steps=cfg.task.max_steps)
    except DivergenceError as e:
        raise CommandError(f"pretraining diverged: {e}") from e
    held = evaluate(model, samples[: cfg.task.eval_batch * 2], "retrieval-image" if task == "retrieval-video" else task,
                    split="pretrain-heldin", step=len(records))
    records.append(held)
    out = _path(args.out, cfg.task.checkpoints and os.path.join(cfg.task.checkpoints, "backbone.uadc"),
                "checkpoint output")
    meta = {"kind": "backbone", "task": task, "backbone_hash": cfg.backbone_hash(),
            "decoder": _vqa(cfg)}
    save_checkpoint(out, model.store, cfg.config_hash(), meta)
    write_metrics_csv(_metrics_path(args, cfg, os.path.dirname(os.path.abspath(out))), records)
    score = held.acc if task == "vqa" else held.r1
    print(f"pretrained in {time.perf_counter() - t0:.1f}s; final loss {records[-2].loss:.4f}; "
          f"held-in {'acc' if task == 'vqa' else 'R@1'} {score:.2f}")
    print(f"backbone checkpoint -> {out}")
    return 0


# -- adapt --------------------------------------------------------------------

def _load_backbone(path, cfg):
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "backbone":
        raise CommandError(f"{path} is not a backbone checkpoint (kind={ckpt.meta.get('kind')!r})")
    if ckpt.meta.get("backbone_hash") != cfg.backbone_hash():
        raise CommandError(f"backbone hash mismatch: checkpoint {path} was trained with a different "
                           f"[backbone] config ({ckpt.meta.get('backbone_hash', '?')[:12]} != "
                           f"{cfg.backbone_hash()[:12]})")
    if _vqa(cfg) and not ckpt.meta.get("decoder"):
        raise CommandError(f"task vqa needs a backbone pretrained with the answer decoder; {path} has none")
    return ckpt


def _adapted_model(cfg, backbone_tensors):
    params = {n: T.Tensor(np.array(a, copy=True)) for n, a in backbone_tensors.items()}
    return build_model(cfg.backbone, cfg.adaptation, params=params, seed=cfg.task.seed,
                       include_decoder=_vqa(cfg))


def cmd_adapt(args):
    cfg = _config(args)
    data = _path(args.data, cfg.task.data, "data")
    task = cfg.task.task
    bb_path = _path(args.backbone_ckpt, cfg.task.checkpoints and os.path.join(cfg.task.checkpoints, "backbone.uadc"),
                    "backbone checkpoint")
    bb = _load_backbone(bb_path, cfg)
    model = _adapted_model(cfg, bb.tensors)
    store = model.store
    frozen = frozen_backbone_names(store)
    before = checksum(store, frozen)
    samples = load_split(data, "train", cfg.world)
    records = []
    if args.eval_step0:
        records.append(evaluate(model, load_split(data, "test", cfg.world), task, split="test", step=0))
    t0 = time.perf_counter()
    try:
        train(model, samples, task, cfg, cfg.task.epochs, on_step=_step_logger(cfg, task, "train", records),
              max_steps=cfg.task.max_steps)
    except DivergenceError as e:
        raise CommandError(f"adaptation diverged: {e}") from e
    after = checksum(store, frozen)
    if after != before:
        raise CommandError("frozen backbone parameters changed during adaptation")
    out = _path(args.out, cfg.task.checkpoints and os.path.join(cfg.task.checkpoints, "adapted.uadc"),
                "checkpoint output")
    meta = {"kind": "adapted", "task": task, "variant": cfg.adaptation.variant,
            "backbone_hash": cfg.backbone_hash(), "backbone_checksum": before,
            "backbone_path": os.path.abspath(bb_path), "adaptation": cfg.to_dict()["adaptation"]}
    names = sorted(store.trainable)
    save_checkpoint(out, store, cfg.config_hash(), meta, names=names)
    write_metrics_csv(_metrics_path(args, cfg, os.path.dirname(os.path.abspath(out))), records)
    report = count_tunable(store)
    print(f"adapted ({cfg.adaptation.variant}) in {time.perf_counter() - t0:.1f}s; "
          f"{report.total} tunable ({report.rounded}) + heads; final loss {records[-1].loss:.4f}")
    print(f"backbone checksum unchanged: {before[:16]}")
    print(f"adapted checkpoint -> {out}")
    return 0


# -- eval ---------------------------------------------------------------------

def _subsample_frames(samples, n):
    """Evenly spaced ``n`` frames when stored videos carry more."""
    out = []
    for s in samples:
        if s.payload.ndim == 3 and s.payload.shape[0] > n:
            idx = np.linspace(0, s.payload.shape[0] - 1, n).round().astype(int)
            s = replace(s, payload=s.payload[idx])
        out.append(s)
    return out


def load_for_eval(cfg, ckpt_path, backbone_path=None):
    ckpt = load_checkpoint(ckpt_path)
    task = cfg.task.task
    if ckpt.meta.get("task") != task:
        raise CommandError(f"task mismatch: checkpoint {ckpt_path} was trained for "
                           f"{ckpt.meta.get('task')!r}, config asks for {task!r}")
    if ckpt.meta.get("kind") == "backbone":
        _load_backbone(ckpt_path, cfg)
        frozen = replace(cfg, adaptation=AdaptationConfig.for_variant("none"))
        return _adapted_model(frozen, ckpt.tensors)
    if ckpt.meta.get("kind") != "adapted":
        raise CommandError(f"{ckpt_path}: unknown checkpoint kind {ckpt.meta.get('kind')!r}")
    if ckpt.meta.get("adaptation") != cfg.to_dict()["adaptation"]:
        raise CommandError(f"adaptation config differs from the one {ckpt_path} was trained with")
    bb = _load_backbone(backbone_path or ckpt.meta.get("backbone_path", ""), cfg)
    model = _adapted_model(cfg, bb.tensors)
    missing = [n for n in ckpt.tensors if n not in model.store]
    if missing:
        raise CommandError(f"checkpoint tensors not in the adaptation plan: {missing[:4]}")
    for n, arr in ckpt.tensors.items():
        model.store[n] = arr
    return model


def cmd_eval(args):
    cfg = _config(args)
    data = _path(args.data, cfg.task.data, "data")
    task = cfg.task.task
    model = load_for_eval(cfg, args.ckpt, args.backbone_ckpt)
    samples = load_split(data, args.split, cfg.world)
    if task == "retrieval-video":
        samples = _subsample_frames(samples, args.frames or cfg.task.infer_frames)
    try:
        rec = evaluate(model, samples, task, split=args.split, eval_batch=cfg.task.eval_batch)
    except ValueError as e:
        raise CommandError(f"cannot evaluate split {args.split!r} ({len(samples)} items): {e}") from e
    path = _metrics_path(args, cfg, os.path.dirname(os.path.abspath(args.ckpt)))
    write_metrics_csv(path, [rec])
    if task == "vqa":
        print(f"{args.split}: acc {rec.acc:.2f}")
    else:
        print(f"{args.split}: R@1 {rec.r1:.2f} R@5 {rec.r5:.2f} R@10 {rec.r10:.2f} "
              f"MdR {rec.mdr:g} R@Mean {rec.rmean:.2f}")
    print(f"metrics -> {path}")
    return 0


# -- params -------------------------------------------------------------------

def cmd_params(args):
    if args.audit:
        from .audit import audit
        results = audit()
        for r in results:
            print(r.line())
        return 0 if all(r.exact_ok for r in results) else 1
    cfg = _config(args)
    bcfg = BackboneConfig.full_scale() if args.full_scale else cfg.backbone
    acfg = cfg.adaptation
    over = {}
    if args.variant:
        acfg = AdaptationConfig.for_variant(args.variant, r=args.r or acfg.r)
    for key in ("r", "sharing", "modalities"):
        v = getattr(args, key)
        if v:
            over[key] = frozenset(v.upper()) if key == "modalities" else v
    if over:
        acfg = replace(acfg, **over)
    store = build_parameter_plan(bcfg, acfg, materialize=False)
    report = count_tunable(store, include_heads=args.include_heads)
    print(report.render())
    if args.expect:
        want = args.expect.strip()
        ok = want == report.rounded if want.upper().endswith("M") else int(want) == report.total
        if not ok:
            print(f"expected {want}, got {report.total} ({report.rounded})", file=sys.stderr)
            return 1
    return 0


# -- gradcheck ----------------------------------------------------------------

def cmd_gradcheck(args):
    from .gradcheck import report, run_gradcheck
    seed = args.seed if args.seed is not None else 0
    try:
        results = run_gradcheck(seed=seed, only=args.op or None)
    except KeyError as e:
        raise CommandError(e.args[0]) from e
    print(report(results))
    return 0 if all(r.passed for r in results) else 1


# -- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="uniadapt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-step losses")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", "--spec", dest="config", help="sectioned config file")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        return sp

    g = common(sub.add_parser("gen-data", help="write the synthetic dataset splits"))
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    pt = common(sub.add_parser("pretrain", help="train the miniature backbone"))
    pt.add_argument("--data")
    pt.add_argument("--out")
    pt.add_argument("--metrics")
    pt.set_defaults(func=cmd_pretrain)

    ad = common(sub.add_parser("adapt", help="train an adaptation plan on a frozen backbone"))
    ad.add_argument("--backbone-ckpt")
    ad.add_argument("--data")
    ad.add_argument("--out")
    ad.add_argument("--metrics")
    ad.add_argument("--eval-step0", action="store_true", help="evaluate before the first update")
    ad.set_defaults(func=cmd_adapt)

    ev = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--backbone-ckpt", help="override the backbone path recorded in an adapted checkpoint")
    ev.add_argument("--data")
    ev.add_argument("--split", default="test", choices=("pretrain", "train", "test"))
    ev.add_argument("--frames", type=int, help="inference frame count for video (default: config)")
    ev.add_argument("--metrics")
    ev.set_defaults(func=cmd_eval)

    pa = common(sub.add_parser("params", help="count tunable parameters of a plan"), seed=False)
    pa.add_argument("--full-scale", action="store_true", help="d=768 with 12-layer encoders")
    pa.add_argument("--variant")
    pa.add_argument("--r", type=int)
    pa.add_argument("--sharing")
    pa.add_argument("--modalities", help="subset of VTC")
    pa.add_argument("--include-heads", action="store_true")
    pa.add_argument("--audit", action="store_true", help="check every published full-scale cell")
    pa.add_argument("--expect", help="exact integer or rounded figure such as 19.0M")
    pa.set_defaults(func=cmd_params)

    gc = common(sub.add_parser("gradcheck", help="finite-difference verification in 64-bit"))
    gc.add_argument("--op", action="append", help="restrict to the named op (repeatable)")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, CheckpointError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
