#!/usr/bin/env python3
"""Paired fixture runs with and without each loss term; prints a metrics table.

    python scripts/occupancy_ablation.py --steps 200
"""
import argparse

from gspretrain.config import fixture_config
from gspretrain.loss import LossWeights
from gspretrain.train import FrameContext, evaluate, init_state, train

VARIANTS = {
    "rgb+depth+occ": LossWeights(10.0, 1.0, 10.0),
    "rgb+depth": LossWeights(10.0, 1.0, 0.0),
    "rgb+occ": LossWeights(10.0, 0.0, 10.0),
    "depth+occ": LossWeights(0.0, 1.0, 10.0),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--only", nargs="+", choices=sorted(VARIANTS))
    args = ap.parse_args()

    ctx = None
    print(f"{'terms':16s} {'rgb_l1':>8s} {'depth_l1':>9s} {'occ_iou':>8s}")
    for name in args.only or VARIANTS:
        cfg = fixture_config(steps=args.steps, seed=args.seed, loss=VARIANTS[name])
        ctx = ctx or FrameContext.build(cfg)  # the frame does not depend on the loss weights
        state = init_state(cfg, ctx)
        train(state, ctx)
        m = evaluate(state, ctx)
        print(f"{name:16s} {m['rgb_l1']:8.4f} {m['depth_l1']:9.4f} {m['occ_iou']:8.4f}")


if __name__ == "__main__":
    main()
