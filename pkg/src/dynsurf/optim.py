"""Losses, Adam, gradient verification, pose-guided sampling, densify/prune,
and the two-stage training loop (field initialization -> surfel stage).

The metric log is newline-delimited ``key=value`` records, one per
iteration: iter, stage, loss terms, and validation PSNR on eval iterations.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, asdict, field as dc_field

import numpy as np

from . import geom, io as dio, tape, tgeom
from .errors import DatasetEmpty, EmptyMask, NonFiniteLoss
from .field import FieldConfig, extract_mesh, sdf_render_rays, seed_surfels, transfer_init
from .model import CloudParams, Model, ModelConfig
from .raster import Camera
from .surfel import SurfelCloud
from .tape import Tensor, as_tensor


# ---------------------------------------------------------------------------
# losses


def _gauss_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _blur_tape(img: Tensor, k: np.ndarray) -> Tensor:
    """Separable valid-mode blur of (H, W, C) over the two leading axes."""
    w = tape.unfold1d(img, k.size, axis=0)
    img = (w * k).sum(axis=-1)
    w = tape.unfold1d(img, k.size, axis=1)
    return (w * k).sum(axis=-1)


def ssim_map(a: Tensor, b: np.ndarray, window: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03) -> Tensor:
    """Differentiable SSIM map (valid-mode) of ``a`` against constant ``b``."""
    k = _gauss_kernel(window, sigma)
    c1, c2 = k1 * k1, k2 * k2
    b = np.asarray(b, dtype=np.float64)
    mu_a = _blur_tape(a, k)
    mu_b = dio._blur_valid(b, k)
    saa = _blur_tape(a * a, k) - mu_a * mu_a
    sbb = dio._blur_valid(b * b, k) - mu_b * mu_b
    sab = _blur_tape(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def photometric_loss(rendered, target: np.ndarray, valid: np.ndarray | None = None,
                     beta: float = 0.8) -> Tensor:
    """beta * L1 + (1 - beta) * (1 - SSIM) over valid pixels."""
    rendered = as_tensor(rendered)
    target = np.asarray(target, dtype=np.float64)
    H, W = target.shape[:2]
    if valid is None:
        valid = np.ones((H, W), dtype=bool)
    if not valid.any():
        raise EmptyMask("photometric loss with empty valid mask")
    vmask = valid[..., None].astype(np.float64)
    nv = float(valid.sum()) * target.shape[-1]
    l1 = (tape.absolute(rendered - target) * vmask).sum() * (1.0 / nv)
    if beta >= 1.0:
        return l1
    half = 5  # window 11 valid crop
    smap = ssim_map(rendered, target)
    vc = valid[half:H - half, half:W - half]
    if vc.any():
        scc = (smap * vc[..., None].astype(np.float64)).sum() * (1.0 / (float(vc.sum()) * target.shape[-1]))
        ssim_term = 1.0 - scc
    else:
        ssim_term = as_tensor(0.0)
    return beta * l1 + (1.0 - beta) * ssim_term


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Per-parameter-group Adam with bias correction.

    ``lr_map`` resolves learning rates by longest prefix of the parameter
    name; key "" is the default.
    """

    def __init__(self, params: dict, lr_map: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr_map = dict(lr_map)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def lr_for(self, name: str) -> float:
        best, lr = -1, self.lr_map.get("", 1e-3)
        for prefix, val in self.lr_map.items():
            if prefix and name.startswith(prefix) and len(prefix) > best:
                best, lr = len(prefix), val
        return lr

    def step(self, lr_scale: float = 1.0, skip_prefixes: tuple = ()):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None or any(name.startswith(s) for s in skip_prefixes):
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr_for(name) * lr_scale) * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def replace_param(self, name: str, new_tensor: Tensor, row_map: np.ndarray | None = None):
        """Swap a parameter (after densify/prune), carrying moment rows."""
        if row_map is not None and name in self.m:
            self.m[name] = self.m[name][row_map]
            self.v[name] = self.v[name][row_map]
        else:
            self.m[name] = np.zeros_like(new_tensor.data)
            self.v[name] = np.zeros_like(new_tensor.data)
        self.params[name] = new_tensor

    def state_sections(self, prefix: str = "adam") -> dict:
        out = {f"{prefix}.step": np.array(self.t, dtype=np.int64)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state(self, sections: dict, prefix: str = "adam"):
        if f"{prefix}.step" in sections:
            self.t = int(sections[f"{prefix}.step"])
        for k in self.params:
            mk, vk = f"{prefix}.m.{k}", f"{prefix}.v.{k}"
            if mk in sections and sections[mk].shape == self.m[k].shape:
                self.m[k] = sections[mk].copy()
                self.v[k] = sections[vk].copy()


def adam_step(state: Adam, lr_scale: float = 1.0):
    """Single optimizer step over all parameters with populated gradients."""
    state.step(lr_scale)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(loss_fn, params: dict, eps: float = 1e-4, n_probe: int = 8,
               rng: np.random.Generator | None = None, atol: float = 1e-7) -> dict:
    """Compare reverse-mode gradients to float64 central differences.

    Returns {name: max relative error}; entries where both |ad| and |fd| fall
    below ``atol`` are indistinguishable from zero and skipped.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for k, p in params.items()}
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = min(n_probe, flat.size)
        idxs = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn().data)
            flat[i] = orig - eps
            lm = float(loss_fn().data)
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            ad = grads[name].reshape(-1)[i]
            if abs(ad) < atol and abs(fd) < atol:
                continue
            worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd)))
        report[name] = worst
        p.zero_grad()
    return report


# ---------------------------------------------------------------------------
# pose-guided sampling


def pose_guided_sample(angles: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    """Draw a target angle in [0, 360) and return the (f, m) whose root
    rotation angle is circularly closest; ties break to the smallest (m, f).

    ``angles``: (M, F) rotation angles in degrees. Each angle phi in
    [0, 180] represents the rotation class {phi, 360 - phi} (a rotation by
    phi equals one by 360 - phi about the flipped axis), so the comparison
    wraps the candidates across the full circle.
    """
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    phi = rng.uniform(0.0, 360.0)

    def circ(c):
        d = np.abs(c - phi)
        return np.minimum(d, 360.0 - d)

    dist = np.minimum(circ(angles), circ(360.0 - angles))
    flat = int(np.argmin(dist))       # row-major: smallest (m, f) wins ties
    m, f = divmod(flat, angles.shape[1])
    return f, m


# ---------------------------------------------------------------------------
# densify / prune


def densify_prune(cloud: SurfelCloud, scores: np.ndarray,
                  opacity_floor: float = 0.005, split_threshold: float = 2e-4):
    """Prune transparent surfels; split high-gradient ones along the longer
    tangent axis (each child keeps half the length, conserving footprint).

    Returns (new cloud, row_map into the old cloud, info dict).
    """
    K = len(cloud)
    keep = cloud.opacities >= opacity_floor
    split = keep & (np.asarray(scores) > split_threshold)
    keep_only = keep & ~split

    frames = cloud.frames()
    long_axis = np.argmax(cloud.scales, axis=1)           # 0 or 1
    axis_world = np.take_along_axis(frames, long_axis[:, None, None].repeat(3, 1), axis=2)[:, :, 0]
    s_long = np.take_along_axis(cloud.scales, long_axis[:, None], axis=1)[:, 0]

    rows = [np.nonzero(keep_only)[0]]
    centers = [cloud.centers[keep_only]]
    scales = [cloud.scales[keep_only]]
    for sgn in (-1.0, 1.0):
        idx = np.nonzero(split)[0]
        rows.append(idx)
        centers.append(cloud.centers[idx] + sgn * 0.5 * s_long[idx, None] * axis_world[idx])
        sc = cloud.scales[idx].copy()
        np.put_along_axis(sc, long_axis[idx][:, None], np.take_along_axis(sc, long_axis[idx][:, None], 1) * 0.5, 1)
        scales.append(sc)
    row_map = np.concatenate(rows)
    new = SurfelCloud(centers=np.concatenate(centers),
                      quats=cloud.quats[row_map],
                      scales=np.concatenate(scales),
                      opacities=cloud.opacities[row_map],
                      sh=cloud.sh[row_map],
                      bones=cloud.bones,
                      delta_quats=None if not cloud.has_deltas else cloud.delta_quats[row_map],
                      delta_scales=None if not cloud.has_deltas else cloud.delta_scales[row_map])
    info = dict(pruned=int((~keep).sum()), split=int(split.sum()), total=len(new))
    return new, row_map, info


# ---------------------------------------------------------------------------
# training configuration


@dataclass
class TrainConfig:
    seed: int = 0
    n_bones: int = 25
    stage1_iters: int = 2000
    stage2_iters: int = 8000
    normal_start: int = 4000          # iteration gate for the normal term
    rays_per_batch: int = 512
    samples_per_ray: int = 24
    n_cycle_points: int = 256
    mesh_resolution: int = 56
    max_surfels: int = 1200
    dual_branch: bool = True
    temperature: float = 1.0
    scene_radius: float = 1.1
    lambda_photo: float = 1.0
    lambda_normal: float = 0.05
    lambda_cycle: float = 0.1
    lambda_mask: float = 0.5
    lambda_motion: float = 0.05
    lambda_eikonal: float = 0.0
    lambda_anchor: float = 1.0        # first-frame root-twist gauge anchor
    root_only_iters: int = 300        # stage-1 warm phase: warp field frozen
    lr_final_scale: float = 0.3       # exponential lr decay target, stage 2
    photo_beta: float = 0.8
    lr_scene_extent: float = 1.0
    densify_every: int = 0            # 0 disables densify/prune
    densify_start: int = 500
    densify_stop_frac: float = 0.8
    split_threshold: float = 2e-4
    opacity_floor: float = 0.005
    eval_every: int = 100
    hidden: int = 64
    warp_depth: int = 5
    sdf_depth: int = 8
    background: tuple = (0.0, 0.0, 0.0)

    def lr_map(self) -> dict:
        return {
            "": 1e-3,
            "cloud.centers": 1.6e-4 * self.lr_scene_extent,
            "cloud.quats": 1e-3,
            "cloud.dquats": 1e-3,
            "cloud.logscales": 5e-3,
            "cloud.draw": 5e-3,
            "cloud.opac": 5e-2,
            "cloud.sh": 2.5e-3,
            "warp": 1e-3,
            "root": 1e-3,
            "sdf": 1e-3,
            "latent": 1e-3,
            "bones": 1e-3,
        }


# ---------------------------------------------------------------------------
# fit


class MetricLog:
    def __init__(self, path: str | None):
        self.path = path
        self.lines: list[str] = []
        if path:
            open(path, "w").close()

    def add(self, **kv):
        parts = []
        for k, v in kv.items():
            if isinstance(v, float):
                parts.append(f"{k}={v:.6g}")
            else:
                parts.append(f"{k}={v}")
        line = " ".join(parts)
        self.lines.append(line)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def _finite_or_raise(terms: dict):
    for k, v in terms.items():
        val = float(v.data if isinstance(v, Tensor) else v)
        if not np.isfinite(val):
            raise NonFiniteLoss(k, val)


def _ray_batch(cam: Camera, rng, n: int, mask: np.ndarray | None):
    H, W = cam.height, cam.width
    if mask is not None:
        inside = np.nonzero(mask.reshape(-1) > 0.5)[0]
        n_in = min(n // 2, inside.size)
        pick_in = rng.choice(inside, size=n_in, replace=False) if n_in else np.empty(0, np.int64)
        pick_any = rng.integers(0, H * W, size=n - n_in)
        pix = np.concatenate([pick_in, pick_any])
    else:
        pix = rng.integers(0, H * W, size=n)
    dirs = cam.pixel_dirs().reshape(-1, 3)[pix]
    origins = np.broadcast_to(cam.center(), dirs.shape).copy()
    return pix, origins, dirs


def fit(dataset: dio.Dataset, cfg: TrainConfig, out_dir: str,
        resume: str | None = None, quiet: bool = True):
    """Two-stage training; writes checkpoint.dgs and metrics.log to out_dir.

    Returns (model, checkpoint_path).
    """
    os.makedirs(out_dir, exist_ok=True)
    if dataset.images.shape[0] == 0:
        raise DatasetEmpty("dataset has no frames")
    rng = np.random.default_rng(cfg.seed)
    M = dataset.n_videos
    counts = [int((dataset.videos == m).sum()) for m in range(M)]
    F = counts[0]
    assert all(c == F for c in counts), "videos must share the frame count"

    frame_of = np.zeros((M, F), dtype=np.int64)   # global index per (m, f)
    for m in range(M):
        frame_of[m] = np.nonzero(dataset.videos == m)[0]

    mcfg = ModelConfig(n_bones=cfg.n_bones, n_videos=M, n_frames=F,
                       temperature=cfg.temperature, background=cfg.background,
                       dual_branch=cfg.dual_branch, max_surfels=cfg.max_surfels,
                       seed=cfg.seed,
                       field=FieldConfig(hidden=cfg.hidden, warp_depth=cfg.warp_depth,
                                         sdf_depth=cfg.sdf_depth,
                                         temperature=cfg.temperature))
    log = MetricLog(os.path.join(out_dir, "metrics.log"))
    cam = dataset.camera_for()

    if resume:
        sections = dio.load_checkpoint(resume)
        model = Model.from_sections(sections)
        model.times = sections["meta.times"]
    else:
        model = Model(mcfg, rng)
        for m in range(M):
            model.times[m] = dataset.times[frame_of[m]]
            tr = [i for i, g in enumerate(frame_of[m]) if g in set(dataset.train_idx)]
            model.train_frames[m] = np.asarray(tr, dtype=np.int64)

    train_pairs = [(m, f) for m in range(M) for f in model.train_frames[m]]

    dist = np.linalg.norm(cam.center())
    t_near = max(dist - cfg.scene_radius * 1.2, 0.05)
    t_far = dist + cfg.scene_radius * 1.2

    # ---------------- stage 1: field initialization -------------------------
    if model.cloud is None and cfg.stage1_iters >= 0:
        params = model.stage1_params()
        adam = Adam(params, cfg.lr_map())
        for it in range(1, cfg.stage1_iters + 1):
            m, f = train_pairs[rng.integers(0, len(train_pairs))]
            g_idx = frame_of[m][f]
            target = dataset.images[g_idx]
            mask = dataset.masks[g_idx] if dataset.masks is not None else None
            pix, origins, dirs = _ray_batch(cam, rng, cfg.rays_per_batch, mask)

            bones_w = model.warp_bones(m, f)
            jitter = rng.uniform(size=(origins.shape[0], cfg.samples_per_ray))
            out = sdf_render_rays(model.sdf, origins, dirs, t_near, t_far,
                                  cfg.samples_per_ray,
                                  backward_warp=lambda xs: model.backward_warp(m, f, xs, bones_w)[0],
                                  jitter=jitter)
            tgt = target.reshape(-1, 3)[pix]
            l_photo = tape.absolute(out["rgb"] - tgt).mean()
            terms = {"photo": l_photo}
            total = cfg.lambda_photo * l_photo
            if mask is not None and cfg.lambda_mask > 0:
                mdiff = out["alpha"] - mask.reshape(-1)[pix]
                l_mask = (mdiff * mdiff).mean()
                total = total + cfg.lambda_mask * l_mask
                terms["mask"] = l_mask

            # cycle consistency on ray samples + expected surface points
            xf_all = out["xf"].reshape(-1, 3)
            w_np = out["weights"].data
            alpha_np = out["alpha"].data
            surf = (w_np[..., None] * out["xf"]).sum(axis=1) / np.maximum(alpha_np[:, None], 1e-6)
            surf = surf[alpha_np > 0.3]
            n_half = cfg.n_cycle_points // 2
            pick = rng.integers(0, xf_all.shape[0], size=n_half)
            pts = [xf_all[pick]]
            if surf.shape[0] > 0:
                pick_s = rng.integers(0, surf.shape[0], size=cfg.n_cycle_points - n_half)
                pts.append(surf[pick_s])
            pts = np.concatenate(pts)
            xf_t = Tensor(pts)
            xs_t, aux_b = model.backward_warp(m, f, xf_t, bones_w)
            Rf, tf, aux_f = model.forward_warp(m, f, xs_t, bones_w)
            resid = tgeom.se3_apply(Rf, tf, xs_t) - xf_t
            l_cyc = (resid * resid).sum(axis=-1).mean()
            total = total + cfg.lambda_cycle * l_cyc
            terms["cyc"] = l_cyc

            if cfg.lambda_motion > 0:
                tw = aux_b["twists"]
                l_mot = (tw * tw).mean()
                total = total + cfg.lambda_motion * l_mot
                terms["motion"] = l_mot

            if cfg.lambda_anchor > 0:
                anchor = as_tensor(0.0)
                for mm in range(M):
                    tw0 = model.root_rt(mm, int(model.train_frames[mm][0]))[2]
                    anchor = anchor + (tw0 * tw0).sum()
                total = total + cfg.lambda_anchor * anchor
                terms["anchor"] = anchor

            terms["total"] = total
            _finite_or_raise(terms)
            adam.zero_grad()
            total.backward()
            # warm phase: only the root pose and SDF move, so global motion
            # lands in the root field instead of the warp field
            if it <= cfg.root_only_iters:
                adam.step(skip_prefixes=("warp", "latent.bone", "bones"))
            else:
                adam.step()
            if it % 25 == 0 or it == 1:
                log.add(iter=it, stage=1, **{k: float(v.data) for k, v in terms.items()})

        # mesh -> surfels -> field transfer
        mesh = extract_mesh(lambda p: model.sdf.query_np(p)[0], cfg.mesh_resolution,
                            model.cfg.field.bbox)
        _, colors = model.sdf.query_np(mesh.vertices)
        cloud = seed_surfels(mesh, colors, model.bones.boneset(), max_surfels=cfg.max_surfels)
        model.cloud = CloudParams(cloud)
        model.warp, model.root = transfer_init(model.warp, model.root)

    # ---------------- stage 2: dynamic surfel optimization ------------------
    params2 = model.stage2_params()
    adam2 = Adam(params2, cfg.lr_map())
    if resume:
        adam2.load_state(sections, "adam2")

    grad_accum = np.zeros(len(model.cloud))
    grad_count = np.zeros(len(model.cloud))
    val_set = set(dataset.val_idx.tolist())
    val_pairs = [(m, f) for m in range(M) for f in range(F)
                 if int(frame_of[m][f]) in val_set]

    def eval_psnr() -> float:
        if not val_pairs:
            return float("nan")
        branch = "refined" if cfg.dual_branch else "plain"
        vals = []
        for m, f in val_pairs:
            outs, fb = model.render_frame(m, f, cam, branch=branch)
            img = np.round(np.clip(fb.color, 0.0, 1.0) * 255.0) / 255.0
            vals.append(dio.psnr(img, dataset.images[frame_of[m][f]]))
        return float(np.mean(vals))

    for it in range(1, cfg.stage2_iters + 1):
        angles = model.root_angles()
        tr_mat = np.stack([angles[m, model.train_frames[m]] for m in range(M)])
        f_loc, m = pose_guided_sample(tr_mat, rng)
        f = int(model.train_frames[m][f_loc])
        g_idx = frame_of[m][f]
        target = dataset.images[g_idx]
        mask = dataset.masks[g_idx] if dataset.masks is not None else None

        bones_w = model.warp_bones(m, f)
        branches = ["plain", "refined"] if cfg.dual_branch else ["plain"]
        total = as_tensor(0.0)
        terms = {}
        outs_plain = None
        for branch in branches:
            outs, fb = model.render_frame(m, f, cam, branch=branch, bones_w=bones_w)
            if branch == "plain":
                outs_plain = outs
            l_photo = photometric_loss(outs["color"], target, beta=cfg.photo_beta)
            total = total + cfg.lambda_photo * l_photo / len(branches)
            terms[f"photo_{branch}"] = l_photo
            if mask is not None and cfg.lambda_mask > 0:
                mdiff = outs["alpha"] - mask
                l_mask = (mdiff * mdiff).mean()
                total = total + cfg.lambda_mask * l_mask / len(branches)

        if cfg.lambda_normal > 0 and it >= cfg.normal_start:
            outs = outs_plain
            N, validN = _normal_from_outs(outs, cam)   # detached target normal
            ln_map = outs["alpha"] - (outs["normal"] * N).sum(axis=-1)
            sel = validN.astype(np.float64)
            l_norm = (ln_map * sel).sum() * (1.0 / max(sel.sum(), 1.0))
            total = total + cfg.lambda_normal * l_norm
            terms["normal"] = l_norm

        # cycle consistency at surfel centers
        if cfg.lambda_cycle > 0:
            kpick = rng.integers(0, len(model.cloud), size=min(cfg.n_cycle_points, len(model.cloud)))
            pts_static = model.cloud.centers.data[kpick]
            Rf, tf, aux_f = model.forward_warp(m, f, Tensor(pts_static), bones_w)
            xf_pts = tgeom.se3_apply(Rf, tf, Tensor(pts_static))
            xs_back, aux_b = model.backward_warp(m, f, Tensor(xf_pts.data), bones_w)
            Rf2, tf2, _ = model.forward_warp(m, f, xs_back, bones_w)
            resid = tgeom.se3_apply(Rf2, tf2, xs_back) - xf_pts.data
            l_cyc = (resid * resid).sum(axis=-1).mean()
            total = total + cfg.lambda_cycle * l_cyc
            terms["cyc"] = l_cyc

        if cfg.lambda_motion > 0:
            tw = outs_plain["aux"]["twists"] if outs_plain is not None else None
            if tw is None:
                _, _, aux_tmp = model.forward_warp(m, f, Tensor(model.cloud.centers.data[:32]), bones_w)
                tw = aux_tmp["twists"]
            l_mot = (tw * tw).mean()
            total = total + cfg.lambda_motion * l_mot
            terms["motion"] = l_mot

        if cfg.lambda_anchor > 0:
            anchor = as_tensor(0.0)
            for mm in range(M):
                tw0 = model.root_rt(mm, int(model.train_frames[mm][0]))[2]
                anchor = anchor + (tw0 * tw0).sum()
            total = total + cfg.lambda_anchor * anchor
            terms["anchor"] = anchor

        terms["total"] = total
        _finite_or_raise(terms)
        adam2.zero_grad()
        total.backward()

        # view-space positional gradient statistic for densify
        g = model.cloud.centers.grad
        if g is not None and cfg.densify_every:
            zc = cam.pose.apply(model.cloud.centers.data)[:, 2]
            score = np.linalg.norm(g, axis=1) * cam.fx / np.maximum(zc, 0.1)
            grad_accum += score
            grad_count += 1.0

        lr_scale = cfg.lr_final_scale ** (it / max(cfg.stage2_iters, 1))
        adam2.step(lr_scale=lr_scale)
        model.cloud.project_constraints()

        if (cfg.densify_every and cfg.densify_start <= it
                and it <= cfg.densify_stop_frac * cfg.stage2_iters
                and it % cfg.densify_every == 0):
            scores = grad_accum / np.maximum(grad_count, 1.0)
            cloud_val = model.cloud.to_cloud(model.bones.boneset())
            new_cloud, row_map, info = densify_prune(cloud_val, scores,
                                                     cfg.opacity_floor, cfg.split_threshold)
            model.cloud = CloudParams(new_cloud)
            for name, tensor in model.cloud.params("cloud").items():
                adam2.replace_param(name, tensor, row_map)
            grad_accum = np.zeros(len(model.cloud))
            grad_count = np.zeros(len(model.cloud))
            log.add(iter=it, stage=2, event="densify", **info)

        if it % cfg.eval_every == 0 or it == 1 or it == cfg.stage2_iters:
            psnr_val = eval_psnr()
            log.add(iter=it, stage=2, psnr_val=psnr_val, n_surfels=len(model.cloud),
                    **{k: float(v.data) for k, v in terms.items()})
        elif it % 25 == 0:
            log.add(iter=it, stage=2, **{k: float(v.data) for k, v in terms.items()})

    ckpt_path = os.path.join(out_dir, "checkpoint.dgs")
    sections = model.checkpoint_sections()
    sections["train_config"] = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    sections.update(adam2.state_sections("adam2"))
    dio.save_checkpoint(ckpt_path, sections)
    return model, ckpt_path


def _normal_from_outs(outs: dict, cam: Camera):
    """Detached depth-derived normal map from tape outputs."""
    from .raster import FrameBuffer, surface_normal_from_depth
    fb = FrameBuffer(color=outs["color"].data, alpha=outs["alpha"].data,
                     depth=outs["depth"].data, normal=outs["normal"].data,
                     contrib_offsets=np.zeros(1, dtype=np.int64),
                     contrib_ids=np.zeros(0, dtype=np.int32),
                     contrib_weights=np.zeros(0), background=np.zeros(3))
    return surface_normal_from_depth(fb, cam)
