"""Command-line entry point.

Subcommands: synth, init, fit, render, confidence, guide, eval, inspect.
Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import guide as gmod, io as dio
from .errors import (DegenerateQuaternion, EngineError, NonFiniteLoss, ZeroBlend)
from .model import Model
from .optim import TrainConfig, fit
from .raster import Camera, confidence_map, surface_normal_from_depth

_NUMERICAL = (NonFiniteLoss, ZeroBlend, DegenerateQuaternion, FloatingPointError)


def _vec3(s: str) -> tuple:
    parts = [float(x) for x in s.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected x,y,z")
    return tuple(parts)


def _add_train_flags(p: argparse.ArgumentParser):
    d = TrainConfig()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--bones", type=int, default=d.n_bones)
    p.add_argument("--stage1-iters", type=int, default=d.stage1_iters)
    p.add_argument("--stage2-iters", type=int, default=d.stage2_iters)
    p.add_argument("--normal-start", type=int, default=d.normal_start)
    p.add_argument("--rays", type=int, default=d.rays_per_batch)
    p.add_argument("--samples", type=int, default=d.samples_per_ray)
    p.add_argument("--mesh-resolution", type=int, default=d.mesh_resolution)
    p.add_argument("--max-surfels", type=int, default=d.max_surfels)
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--warp-depth", type=int, default=d.warp_depth)
    p.add_argument("--sdf-depth", type=int, default=d.sdf_depth)
    p.add_argument("--single-branch", action="store_true",
                   help="train only the plain surfel branch")
    p.add_argument("--lambda-photo", type=float, default=d.lambda_photo)
    p.add_argument("--lambda-normal", type=float, default=d.lambda_normal)
    p.add_argument("--lambda-cycle", type=float, default=d.lambda_cycle)
    p.add_argument("--lambda-mask", type=float, default=d.lambda_mask)
    p.add_argument("--lambda-motion", type=float, default=d.lambda_motion)
    p.add_argument("--lambda-anchor", type=float, default=d.lambda_anchor)
    p.add_argument("--root-only-iters", type=int, default=d.root_only_iters)
    p.add_argument("--lr-final-scale", type=float, default=d.lr_final_scale)
    p.add_argument("--photo-beta", type=float, default=d.photo_beta)
    p.add_argument("--densify-every", type=int, default=d.densify_every)
    p.add_argument("--eval-every", type=int, default=d.eval_every)
    p.add_argument("--temperature", type=float, default=d.temperature)
    p.add_argument("--scene-radius", type=float, default=d.scene_radius)


def _train_config(args) -> TrainConfig:
    return TrainConfig(seed=args.seed, n_bones=args.bones,
                       stage1_iters=args.stage1_iters, stage2_iters=args.stage2_iters,
                       normal_start=args.normal_start, rays_per_batch=args.rays,
                       samples_per_ray=args.samples, mesh_resolution=args.mesh_resolution,
                       max_surfels=args.max_surfels, hidden=args.hidden,
                       warp_depth=args.warp_depth, sdf_depth=args.sdf_depth,
                       dual_branch=not args.single_branch,
                       lambda_photo=args.lambda_photo, lambda_normal=args.lambda_normal,
                       lambda_cycle=args.lambda_cycle, lambda_mask=args.lambda_mask,
                       lambda_motion=args.lambda_motion, lambda_anchor=args.lambda_anchor,
                       root_only_iters=args.root_only_iters,
                       lr_final_scale=args.lr_final_scale, photo_beta=args.photo_beta,
                       densify_every=args.densify_every, eval_every=args.eval_every,
                       temperature=args.temperature, scene_radius=args.scene_radius)


def _load_model(path: str) -> tuple[Model, dict]:
    sections = dio.load_checkpoint(path)
    return Model.from_sections(sections), sections


def _camera_from_args(args, dataset=None) -> Camera:
    if dataset is not None and args.eye is None:
        return dataset.camera_for()
    eye = args.eye if args.eye is not None else (0.0, 0.25, 2.6)
    target = args.target if args.target is not None else (0.0, 0.0, 0.0)
    return Camera.look_at(eye=eye, target=target, width=args.width, height=args.height,
                          fov_deg=args.fov)


def _add_camera_flags(p: argparse.ArgumentParser):
    p.add_argument("--eye", type=_vec3, default=None, help="camera position x,y,z")
    p.add_argument("--target", type=_vec3, default=None)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov", type=float, default=40.0)


def _frame_list(spec: str, F: int) -> list:
    if spec == "all":
        return list(range(F))
    return [int(x) for x in spec.split(",")]


def _render_frames(model: Model, cam: Camera, m: int, frames: list, branch: str):
    for f in frames:
        outs, fb = model.render_frame(m, f, cam, branch=branch)
        yield f, fb


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = dio.SynthConfig(n_frames=args.frames, width=args.width, height=args.height,
                          n_bones=args.bones, n_surfels=args.surfels,
                          bone_rot_amp_deg=args.bone_rot_deg, bone_wobble_amp=args.wobble,
                          orbit_deg=args.orbit_deg, n_videos=args.videos,
                          write_masks=not args.no_masks)
    dio.synth_scene(args.seed, cfg, args.out)
    print(f"wrote dataset to {args.out}")
    return 0


def cmd_fit(args) -> int:
    dataset = dio.load_dataset(args.data)
    cfg = _train_config(args)
    _, ckpt = fit(dataset, cfg, args.out, resume=args.resume)
    print(f"wrote {ckpt}")
    return 0


def cmd_init(args) -> int:
    dataset = dio.load_dataset(args.data)
    cfg = _train_config(args)
    cfg.stage2_iters = 0
    _, ckpt = fit(dataset, cfg, args.out)
    print(f"wrote {ckpt} (field initialization only)")
    return 0


def cmd_render(args) -> int:
    model, _ = _load_model(args.checkpoint)
    dataset = dio.load_dataset(args.data) if args.data else None
    cam = _camera_from_args(args, dataset)
    os.makedirs(args.out, exist_ok=True)
    frames = _frame_list(args.frames, model.times.shape[1])
    for f, fb in _render_frames(model, cam, args.video, frames, args.branch):
        dio.write_png(os.path.join(args.out, f"render_f{f:04d}_m{args.video}.png"), fb.color)
        if args.write_depth:
            d = fb.depth / max(fb.depth.max(), 1e-6)
            dio.write_png(os.path.join(args.out, f"depth_f{f:04d}_m{args.video}.png"), d)
        if args.write_normal:
            n = 0.5 * (fb.normal + 1.0)
            dio.write_png(os.path.join(args.out, f"normal_f{f:04d}_m{args.video}.png"), n)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def cmd_confidence(args) -> int:
    model, _ = _load_model(args.checkpoint)
    dataset = dio.load_dataset(args.data) if args.data else None
    cam = _camera_from_args(args, dataset)
    os.makedirs(args.out, exist_ok=True)
    frames = _frame_list(args.frames, model.times.shape[1])
    for f, fb in _render_frames(model, cam, args.video, frames, args.branch):
        N, valid = surface_normal_from_depth(fb, cam)
        cm = confidence_map(fb, N, valid, args.threshold)
        dio.write_png(os.path.join(args.out, f"confidence_f{f:04d}_m{args.video}.png"),
                      cm.mask.astype(np.float64))
    print(f"wrote {len(frames)} confidence maps to {args.out}")
    return 0


def cmd_guide(args) -> int:
    model, _ = _load_model(args.checkpoint)
    dataset = dio.load_dataset(args.data) if args.data else None
    cam = _camera_from_args(args, dataset)
    os.makedirs(args.out, exist_ok=True)
    F = model.times.shape[1]
    frames = _frame_list(args.frames, F)
    renders, masks = [], []
    for f, fb in _render_frames(model, cam, args.video, frames, args.branch):
        N, valid = surface_normal_from_depth(fb, cam)
        cm = confidence_map(fb, N, valid, args.threshold)
        renders.append(fb.color)
        masks.append(cm.mask.astype(np.float64))
    renders = np.stack(renders)
    masks = np.stack(masks)

    traj = gmod.Trajectory(kind=args.trajectory, p_mean=args.p_mean, p_std=args.p_std)
    if args.model == "zero":
        vmodel = gmod.ZeroVelocity()
    elif args.model == "constant":
        vmodel = gmod.ConstantVelocity(args.const_value)
    else:
        vmodel = gmod.LinearToTarget(gmod.IdentityCodec().encode(renders)
                                     if args.codec == "identity"
                                     else gmod.PoolCodec().encode(renders))
    codec = gmod.IdentityCodec() if args.codec == "identity" else gmod.PoolCodec()
    video = gmod.generate(args.seed, gmod.Schedule.uniform(args.steps), renders, masks,
                          traj, vmodel, codec=codec, resample_eps=args.resample_eps)
    for i, f in enumerate(frames):
        dio.write_png(os.path.join(args.out, f"guided_f{f:04d}_m{args.video}.png"),
                      np.clip(video[i], 0.0, 1.0))
    print(f"wrote {len(frames)} guided frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _ = _load_model(args.checkpoint)
    dataset = dio.load_dataset(args.data)
    cam = dataset.camera_for()
    M = model.times.shape[0]
    frame_of = {}
    for m in range(M):
        frame_of[m] = np.nonzero(dataset.videos == m)[0]
    rows = []
    val_set = set(dataset.val_idx.tolist())
    train_set = set(dataset.train_idx.tolist())
    for m in range(M):
        for f in range(model.times.shape[1]):
            g = int(frame_of[m][f])
            split = "val" if g in val_set else ("train" if g in train_set else "skip")
            if split == "skip" and not args.all_frames:
                continue
            outs, fb = model.render_frame(m, f, cam, branch=args.branch)
            # datasets are 8-bit; compare on the same quantized grid
            img = np.round(np.clip(fb.color, 0.0, 1.0) * 255.0) / 255.0
            rows.append((m, f, split, dio.psnr(img, dataset.images[g]),
                         dio.ssim(img, dataset.images[g])))
    print(f"{'video':>5} {'frame':>5} {'split':>6} {'psnr':>8} {'ssim':>7}")
    for m, f, split, p, s in rows:
        print(f"{m:>5} {f:>5} {split:>6} {p:8.2f} {s:7.4f}")
    for split in ("train", "val"):
        sel = [r for r in rows if r[2] == split]
        if sel:
            print(f"mean {split}: psnr={np.mean([r[3] for r in sel]):.2f} "
                  f"ssim={np.mean([r[4] for r in sel]):.4f}")
    return 0


def cmd_inspect(args) -> int:
    sections = dio.load_checkpoint(args.checkpoint)
    cfg = json.loads(sections["config"].decode("utf-8")) if "config" in sections else {}
    print(f"checkpoint: {args.checkpoint}")
    print(f"config: {json.dumps(cfg, indent=1, sort_keys=True)}")
    for name in sorted(sections):
        v = sections[name]
        if isinstance(v, bytes):
            print(f"  {name:40s} bytes[{len(v)}]")
        else:
            print(f"  {name:40s} {v.dtype} {list(v.shape)}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynsurf",
                                 description="Dynamic Gaussian surfel engine")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--bones", type=int, default=1)
    p.add_argument("--surfels", type=int, default=700)
    p.add_argument("--orbit-deg", type=float, default=40.0)
    p.add_argument("--bone-rot-deg", type=float, default=2.0)
    p.add_argument("--wobble", type=float, default=0.05)
    p.add_argument("--videos", type=int, default=1)
    p.add_argument("--no-masks", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="two-stage training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("init", help="stage-1 field initialization only")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="dataset dir for the canonical camera")
    p.add_argument("--frames", default="all")
    p.add_argument("--video", type=int, default=0)
    p.add_argument("--branch", choices=("plain", "refined"), default="refined")
    p.add_argument("--write-depth", action="store_true")
    p.add_argument("--write-normal", action="store_true")
    _add_camera_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("confidence", help="confidence maps from normal alignment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--frames", default="all")
    p.add_argument("--video", type=int, default=0)
    p.add_argument("--branch", choices=("plain", "refined"), default="plain")
    p.add_argument("--threshold", type=float, default=0.1)
    _add_camera_flags(p)
    p.set_defaults(func=cmd_confidence)

    p = sub.add_parser("guide", help="masked-denoising guided generation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--frames", default="all")
    p.add_argument("--video", type=int, default=0)
    p.add_argument("--branch", choices=("plain", "refined"), default="refined")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--trajectory", choices=("rf", "edm", "vp"), default="rf")
    p.add_argument("--model", choices=("zero", "constant", "linear"), default="zero")
    p.add_argument("--const-value", type=float, default=0.0)
    p.add_argument("--codec", choices=("identity", "pool"), default="identity")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p-mean", type=float, default=-1.2)
    p.add_argument("--p-std", type=float, default=1.2)
    p.add_argument("--resample-eps", action="store_true")
    _add_camera_flags(p)
    p.set_defaults(func=cmd_guide)

    p = sub.add_parser("eval", help="PSNR/SSIM against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--branch", choices=("plain", "refined"), default="refined")
    p.add_argument("--all-frames", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="checkpoint summary")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except _NUMERICAL as exc:
        print(f"error: numerical: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    except EngineError as exc:
        print(f"error: data: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
