"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (one JSON line on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, fixture_config, reference_config
from .errors import GSPretrainError
from .gradcheck import CHECKS, EXTRA_CHECKS, TOLERANCE, run_suite
from .io import to_uint8, write_pfm, write_ply, write_ppm
from .loss import MetricsLog
from .masking import generate_patch_mask, mask_visualization, validate_mask
from .synth import Frame, generate_scene, make_rig, save_scene
from .train import STREAM_EVAL, STREAM_TRAIN, FrameContext, evaluate, forward, init_state, make_batch, train

log = logging.getLogger("gspretrain")

PRESETS = {"reference": reference_config, "fixture": fixture_config}


class CommandError(GSPretrainError):
    kind = "CommandFailed"


def _add_config_args(p):
    p.add_argument("--config", help="TrainConfig JSON file (overrides --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="reference")
    p.add_argument("--scene", help="scene JSON written by `synth`")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=["ray", "splat"])
    p.add_argument("--encoder", choices=["lss", "grid"])


def build_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else PRESETS[args.preset]()
    d = cfg.to_dict()
    for key, attr in (("scene_path", "scene"), ("seed", "seed"), ("steps", "steps"),
                      ("render_mode", "mode"), ("encoder", "encoder")):
        value = getattr(args, attr, None)
        if value is not None:
            d[key] = value
    return TrainConfig.from_dict(d)


def _dump(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_synth(args):
    rc = PRESETS[args.preset]().rig
    scene = generate_scene(args.seed)
    rig = make_rig(rc.n_cameras, rc.width, rc.height, rc.fov_deg, rc.radius, rc.cam_height,
                   rc.lidar_origin, rc.rings, rc.elevation_deg, rc.azimuth_steps, rc.max_range)
    frame = Frame.build(scene, rig)
    os.makedirs(args.out, exist_ok=True)
    save_scene(os.path.join(args.out, "scene.json"), scene, rig)
    for i, (img, dep) in enumerate(zip(frame.images, frame.depths)):
        write_ppm(os.path.join(args.out, f"cam{i}.ppm"), img)
        write_pfm(os.path.join(args.out, f"cam{i}.pfm"), dep)
    write_ply(os.path.join(args.out, "lidar.ply"), frame.cloud.points)
    _dump({"out": args.out, "cameras": len(rig.cameras), "lidar_points": len(frame.cloud)})


def _load_state(args, cfg):
    if getattr(args, "checkpoint", None):
        state = load_checkpoint(args.checkpoint, cfg)
        return state, FrameContext.build(state.cfg)
    ctx = FrameContext.build(cfg)
    return init_state(cfg, ctx), ctx


def cmd_pretrain(args):
    if args.resume:
        state = load_checkpoint(args.resume, build_config(args) if args.config else None)
        d = state.cfg.to_dict()
        if args.steps is not None:
            d["steps"] = args.steps
        state.cfg = TrainConfig.from_dict(d)
        cfg = state.cfg
    else:
        cfg = build_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.to_json())
        return
    if not args.out:
        raise CommandError("--out is required unless --dump-config is given")
    os.makedirs(args.out, exist_ok=True)
    ctx = FrameContext.build(cfg)
    if not args.resume:
        state = init_state(cfg, ctx)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    metrics = MetricsLog(os.path.join(args.out, "metrics.jsonl"))
    ckpt = os.path.join(args.out, "checkpoint.gpck")

    def on_step(st, breakdown):
        if breakdown is not None:
            metrics.append(st.step - 1, breakdown)
            log.info("step %d  L=%.5f", st.step - 1, breakdown["L"])
        if cfg.checkpoint_interval and st.step % cfg.checkpoint_interval == 0:
            save_checkpoint(ckpt, st, ctx)

    train(state, ctx, cfg.steps, on_step)
    save_checkpoint(ckpt, state, ctx)
    last = state.history[-1] if state.history else {}
    _dump({"steps": state.step, "skipped": state.skipped, "loss": last.get("L"), "checkpoint": ckpt})


def cmd_eval(args):
    cfg = build_config(args)
    state, ctx = _load_state(args, cfg)
    metrics = evaluate(state, ctx, args.batches)
    _dump({"step": state.step, **metrics})


def cmd_render(args):
    cfg = build_config(args)
    state, ctx = _load_state(args, cfg)
    cfg = state.cfg
    batch = make_batch(cfg, ctx, STREAM_EVAL, args.batch)
    res = forward(cfg, state.store.params, ctx, batch, grads=False)
    out = res.output
    os.makedirs(args.out, exist_ok=True)
    rays = batch.rays
    for i, (img, dep) in enumerate(zip(ctx.frame.images, ctx.frame.depths)):
        vm = batch.valid_masks[i]
        recon = mask_visualization(img, vm)
        pred_depth = np.zeros_like(dep)
        sel = rays.camera_index == i
        u, v = rays.pixels[sel, 0].astype(int), rays.pixels[sel, 1].astype(int)
        recon[v, u] = out.rgb[sel]
        pred_depth[v, u] = out.depth[sel]
        write_ppm(os.path.join(args.out, f"render_cam{i}.ppm"), np.hstack([img, recon]))
        gt_depth = np.where(np.isfinite(dep), dep, 0.0)
        write_pfm(os.path.join(args.out, f"depth_cam{i}.pfm"), np.hstack([gt_depth, pred_depth]))
    _dump({"out": args.out, "rays": int(len(rays.pixels)), "loss": res.loss})


def cmd_gradcheck(args):
    names = args.only or list(CHECKS)
    results = run_suite(args.cases, args.seed, names)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:16s} cases={r.cases} max_rel_err={r.max_rel_error:.3e} ({r.seconds:.1f}s)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CommandError(f"relative error >= {TOLERANCE:g} in: {', '.join(failed)}")


def cmd_mask_debug(args):
    cfg = build_config(args)
    ctx = FrameContext.build(cfg)
    os.makedirs(args.out, exist_ok=True)
    summary = []
    for i, cam in enumerate(ctx.cameras):
        pm = generate_patch_mask(cam.image_size, cfg.mask, image_index=i,
                                 seed=[cfg.seed, STREAM_TRAIN, args.index, i])
        vm = validate_mask(pm, ctx.projections[i], cfg.mask)
        vis = mask_visualization(to_uint8(ctx.frame.images[i]), vm)
        write_ppm(os.path.join(args.out, f"mask_cam{i}.ppm"), vis)
        summary.append({"camera": i, "masked": len(vm.masked), "valid": len(vm.patches)})
    _dump({"out": args.out, "cameras": summary})


def build_parser():
    parser = argparse.ArgumentParser(prog="gspretrain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a scene, camera images, depth maps and a LiDAR sweep")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--preset", choices=sorted(PRESETS), default="fixture")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="run pre-training")
    _add_config_args(p)
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="held-out reconstruction metrics as JSON")
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--batches", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="dump reconstructed patches and depth beside ground truth")
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--batch", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="+", choices=sorted(CHECKS) + sorted(EXTRA_CHECKS))
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("mask-debug", help="write masked/valid patch overlays as PPM")
    _add_config_args(p)
    p.add_argument("--index", type=int, default=0, help="training step whose masks to draw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask_debug)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except GSPretrainError as exc:
        kind, msg = exc.kind, str(exc)
    except OSError as exc:
        kind, msg = "IO", str(exc)
    except (ValueError, KeyError) as exc:
        kind, msg = "InvalidInput", str(exc)
    else:
        return 0
    sys.stderr.write(json.dumps({"error": kind, "message": msg}) + "\n")
    return 1


if __name__ == "__main__":
    sys.exit(main())
