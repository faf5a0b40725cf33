#!/usr/bin/env python3
"""Fixture-scene reference run: train, log the loss trace and print held-out metrics.

    python scripts/reference_run.py --steps 200 --out runs/reference
"""
import argparse
import json
import os
import time

from gspretrain.checkpoint import save_checkpoint
from gspretrain.config import fixture_config
from gspretrain.loss import MetricsLog
from gspretrain.train import FrameContext, evaluate, init_state, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--mode", choices=["ray", "splat"], default="ray")
    ap.add_argument("--encoder", choices=["grid", "lss"], default="grid")
    ap.add_argument("--eval-every", type=int, default=50)
    ap.add_argument("--out", default="runs/reference")
    args = ap.parse_args()

    cfg = fixture_config(steps=args.steps, seed=args.seed, render_mode=args.mode, encoder=args.encoder)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    log = MetricsLog(os.path.join(args.out, "metrics.jsonl"))
    ctx = FrameContext.build(cfg)
    state = init_state(cfg, ctx)
    evals = [{"step": 0, **evaluate(state, ctx)}]
    print(json.dumps(evals[-1]))

    def on_step(st, breakdown):
        if breakdown is not None:
            log.append(st.step - 1, breakdown)
        if st.step % args.eval_every == 0:
            evals.append({"step": st.step, **evaluate(st, ctx)})
            print(json.dumps(evals[-1]))

    t0 = time.perf_counter()
    train(state, ctx, cfg.steps, on_step)
    elapsed = time.perf_counter() - t0
    save_checkpoint(os.path.join(args.out, "checkpoint.gpck"), state, ctx)
    with open(os.path.join(args.out, "eval.json"), "w") as fh:
        json.dump(evals, fh, indent=1)
    first, last = state.history[0]["L"], state.history[-1]["L"]
    print(f"loss {first:.4f} -> {last:.4f}, {state.skipped} skipped steps, {elapsed:.1f}s")


if __name__ == "__main__":
    main()
