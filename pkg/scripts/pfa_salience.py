#!/usr/bin/env python3
"""How often PFA puts more weight on the caption's frame than on distractors.

Each video has one salient frame out of ``--frames``; the backbone is the
desk-scale pretrained one (trained on clean image pairs only).
"""
import argparse

import numpy as np

from uniadapt.config import RunConfig
from uniadapt.experiments import pfa_salience, pretrain_backbone


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--backbone", help="npz saved by transfer_ordering.py --save-backbone")
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--frames", type=int, default=8)
    args = ap.parse_args()
    cfg = RunConfig()
    backbone = dict(np.load(args.backbone)) if args.backbone else pretrain_backbone(cfg, "retrieval-image")
    for label, offset in (("pretrain distribution", 0), ("downstream distribution", cfg.world.n_pretrain)):
        rate = pfa_salience(backbone, cfg, n=args.n, n_frames=args.frames, offset=offset)
        print(f"{label:<24} salient frame favoured in {100 * rate:.1f}% of {args.n} videos")


if __name__ == "__main__":
    main()
