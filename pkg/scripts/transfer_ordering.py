#!/usr/bin/env python3
"""Pretrain the desk-scale backbone once, then adapt it with each transfer variant.

Prints downstream R@1 (or VQA accuracy) per variant and checks the expected
ordering: linear probe < sequential adapter <= uniadapter, uniadapter >= 0.9 x full.
"""
import argparse
import time

import numpy as np

from uniadapt.config import RunConfig, load_config
from uniadapt.experiments import TRANSFER_VARIANTS, pretrain_backbone, transfer_ordering


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--task", default="retrieval-image", choices=("retrieval-image", "retrieval-video", "vqa"))
    ap.add_argument("--backbone", help="reuse a pretrained backbone saved with --save-backbone")
    ap.add_argument("--save-backbone")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.backbone:
        backbone = dict(np.load(args.backbone))
    else:
        t0 = time.perf_counter()
        backbone = pretrain_backbone(cfg, args.task)
        print(f"pretrained in {time.perf_counter() - t0:.1f}s")
        if args.save_backbone:
            np.savez(args.save_backbone, **backbone)
    res = transfer_ordering(cfg, backbone, TRANSFER_VARIANTS, task=args.task, log=print)
    s = {v: r.score for v, r in res.items()}
    ok = (s["linear_probe"] < s["sequential_adapter"] <= s["uniadapter"]
          and s["uniadapter"] >= 0.9 * s["full_finetune"])
    print(f"uniadapter / full_finetune = {s['uniadapter'] / s['full_finetune']:.3f}")
    print("ordering holds" if ok else "ordering VIOLATED")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
