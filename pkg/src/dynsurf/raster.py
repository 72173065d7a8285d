"""Tile-based differentiable splat rasterizer.

Primitives are Gaussian surfels (thickness 0) or refined ellipsoids
(thickness > 0, third frame column = plane normal). Rendering is exact
ray/plane intersection per pixel with per-pixel front-to-back compositing;
the refined branch uses the peak Gaussian density along the ray, which
reduces bitwise to the plane density as thickness -> 0.

Contract constants shared by the tile renderer and the brute-force oracle
(both must apply them identically for the two paths to agree):
  * densities below ``G_MIN`` are treated as exactly zero;
  * compositing stops once transmittance drops below ``T_STOP``;
  * per-splat alpha is capped at ``A_MAX``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import SE3, Rotation3
from .surfel import sh_basis
from .tape import Tensor, as_tensor

G_MIN = 1e-5          # density cutoff
T_STOP = 1e-4         # transmittance early-out
A_MAX = 1.0           # per-splat alpha cap (opacity and density are <= 1)
SIGMA_LP = 0.707      # screen-space low-pass sigma, pixels
_Q_CUT = -2.0 * np.log(G_MIN)          # mahalanobis^2 at the density cutoff
_R_CUT = float(np.sqrt(_Q_CUT))        # ~6.07 sigma
_LP_CUT = float(np.sqrt(_Q_CUT) * SIGMA_LP)  # pixel radius of the low-pass cutoff
_EPS_DEN = 1e-12      # front-facing denominator threshold
_THICK_EPS = 1e-12    # thickness below this renders as a pure surfel
FAR_CLIP = 100.0      # plane hits beyond this ray distance are ignored


# ---------------------------------------------------------------------------
# camera


@dataclass
class Camera:
    """Pinhole camera; ``pose`` maps world -> camera (x right, y down, z fwd)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: SE3

    def __post_init__(self):
        assert self.fx > 0 and self.fy > 0
        assert 0 <= self.cx < self.width and 0 <= self.cy < self.height

    def center(self) -> np.ndarray:
        return self.pose.inverse().trans

    def pixel_dirs(self) -> np.ndarray:
        """Unit world-space ray directions through pixel centers, (H, W, 3)."""
        j = np.arange(self.width) + 0.5
        i = np.arange(self.height) + 0.5
        xs = (j - self.cx) / self.fx
        ys = (i - self.cy) / self.fy
        d_cam = np.stack(
            [np.broadcast_to(xs, (self.height, self.width)),
             np.broadcast_to(ys[:, None], (self.height, self.width)),
             np.ones((self.height, self.width))],
            axis=-1,
        )
        d_world = d_cam @ self.pose.rot.m  # R^T applied row-wise
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def project(self, pts: np.ndarray):
        """Continuous pixel coordinates and camera-space depth of points."""
        pc = self.pose.apply(pts)
        z = pc[..., 2]
        px = self.fx * pc[..., 0] / z + self.cx
        py = self.fy * pc[..., 1] / z + self.cy
        return px, py, z

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), fx=None, fy=None, cx=None, cy=None,
                width=64, height=64, fov_deg=45.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right) / np.linalg.norm(np.cross(fwd, right))
        R = np.stack([right, down, fwd], axis=0)
        t = -R @ eye
        if fx is None:
            fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        if fy is None:
            fy = fx
        return Camera(float(fx), float(fy),
                      float(width / 2.0 if cx is None else cx),
                      float(height / 2.0 if cy is None else cy),
                      int(width), int(height), SE3(Rotation3(R), t))


# ---------------------------------------------------------------------------
# output containers


@dataclass
class FrameBuffer:
    """Rasterizer output; ``contrib_*`` is a CSR layout of per-pixel ordered
    (surfel id, blending weight) records, row-major over pixels."""

    color: np.ndarray            # (H, W, 3)
    alpha: np.ndarray            # (H, W)
    depth: np.ndarray            # (H, W) expected ray distance (weight-normalized)
    normal: np.ndarray           # (H, W, 3) omega-blended surfel normals
    contrib_offsets: np.ndarray  # (H*W + 1,)
    contrib_ids: np.ndarray      # (T,)
    contrib_weights: np.ndarray  # (T,)
    background: np.ndarray       # (3,)

    def contributors(self, y: int, x: int):
        k = y * self.color.shape[1] + x
        lo, hi = self.contrib_offsets[k], self.contrib_offsets[k + 1]
        return self.contrib_ids[lo:hi], self.contrib_weights[lo:hi]


@dataclass
class ConfidenceMap:
    mask: np.ndarray             # (..., H, W) in {0, 1}
    threshold: float


# ---------------------------------------------------------------------------
# single-primitive contract operations


def ray_splat_intersect(origin, direction, prim) -> tuple | None:
    """Exact ray/plane intersection in the local uv frame.

    Returns (u, v, depth) with u, v normalized by the tangential scales, or
    None for back-facing, parallel, or behind-origin intersections.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    n = prim.frame[:, 2]
    den = float(d @ n)
    if den >= -_EPS_DEN:
        return None
    t = float((prim.center - o) @ n) / den
    if t <= 0.0:
        return None
    delta = o + t * d - prim.center
    u = float(delta @ prim.frame[:, 0]) / prim.scales[0]
    v = float(delta @ prim.frame[:, 1]) / prim.scales[1]
    return u, v, t


def splat_density(u: float, v: float, d_px: float = np.inf, sigma_lp: float = SIGMA_LP) -> float:
    """max of the uv Gaussian and the screen-space low-pass floor."""
    g_uv = np.exp(-(u * u + v * v) / 2.0)
    g_lp = np.exp(-(d_px * d_px) / (2.0 * sigma_lp * sigma_lp))
    return float(np.maximum(g_uv, g_lp))


def density_gradient_diag(eta: float, gamma: float, x: float) -> float:
    """Analytic density derivative along the surface normal.

    H = 1/sin^2(eta) + 1/sin^2(gamma); returns -H x exp(-H x^2 / 2).
    """
    H = 1.0 / np.sin(eta) ** 2 + 1.0 / np.sin(gamma) ** 2
    return float(-H * x * np.exp(-H * x * x / 2.0))


# ---------------------------------------------------------------------------
# shared pair geometry


def _pair_geometry(o, D, px_pix, py_pix, centers, frames, scales, PX, PY, cz_ok, near):
    """Per (pixel, primitive) intersection quantities.

    D: (P, 3) unit ray dirs; centers (N, 3); frames (N, 3, 3); scales (N, 3);
    PX/PY: (N,) projected centers; cz_ok: (N,) center-in-front mask gating the
    low-pass term; px_pix/py_pix: (P,) pixel centers.
    Returns a dict of (P, N) arrays plus per-primitive helpers.
    """
    f1 = frames[:, :, 0]
    f2 = frames[:, :, 1]
    nrm = frames[:, :, 2]
    s1, s2, s3 = scales[:, 0], scales[:, 1], scales[:, 2]

    dd1 = D @ f1.T
    dd2 = D @ f2.T
    den = D @ nrm.T
    omp = o[None, :] - centers
    op1 = (omp * f1).sum(axis=1)
    op2 = (omp * f2).sum(axis=1)
    tnum = -(omp * nrm).sum(axis=1)

    front = den < -_EPS_DEN
    safe_den = np.where(front, den, -1.0)
    t = tnum[None, :] / safe_den
    valid = front & (t > near) & (t < FAR_CLIP)

    u_r = op1[None, :] + t * dd1
    v_r = op2[None, :] + t * dd2
    b1 = u_r / s1[None, :]
    b2 = v_r / s2[None, :]
    q = b1 * b1 + b2 * b2

    thick = s3 > _THICK_EPS
    s3_safe = np.where(thick, s3, 1.0)
    any_thick = bool(thick.any())
    if any_thick:
        a1 = dd1 / s1[None, :]
        a2 = dd2 / s2[None, :]
        a3 = den / s3_safe[None, :]
        A = a1 * a1 + a2 * a2 + a3 * a3
        Bt = a1 * b1 + a2 * b2
        q = np.where(thick[None, :], q - Bt * Bt / A, q)
    else:
        a1 = a2 = a3 = A = Bt = None

    dx = PX[None, :] - px_pix[:, None]
    dy = PY[None, :] - py_pix[:, None]
    d2 = dx * dx + dy * dy

    # exp only where the result can clear G_MIN; below-cutoff values are
    # gated to zero either way, so this is exact
    g_uv = np.zeros_like(q)
    qm = q <= _Q_CUT
    g_uv[qm] = np.exp(-0.5 * q[qm])
    g_lp = np.zeros_like(d2)
    dm = (d2 <= _Q_CUT * SIGMA_LP * SIGMA_LP) & cz_ok[None, :]
    g_lp[dm] = np.exp(-d2[dm] / (2.0 * SIGMA_LP * SIGMA_LP))
    g_raw = np.maximum(g_uv, g_lp)
    G = np.where(valid & (g_raw >= G_MIN), g_raw, 0.0)

    return dict(dd1=dd1, dd2=dd2, den=den, t=t, valid=valid, u_r=u_r, v_r=v_r,
                b1=b1, b2=b2, a1=a1, a2=a2, a3=a3, A=A, Bt=Bt, thick=thick,
                any_thick=any_thick, q=q, d2=d2, g_uv=g_uv, g_lp=g_lp, G=G,
                dx=dx, dy=dy, f1=f1, f2=f2, nrm=nrm, s1=s1, s2=s2, s3=s3_safe)


_PAIR_KEYS = ("dd1", "dd2", "den", "t", "valid", "u_r", "v_r", "b1", "b2",
              "a1", "a2", "a3", "A", "Bt", "g_uv", "g_lp", "G", "dx", "dy")
_PRIM_KEYS = ("thick", "f1", "f2", "nrm", "s1", "s2", "s3")


def _compress_geo(geo: dict, active: np.ndarray) -> dict:
    """Restrict pair geometry to active primitive columns."""
    out = {"any_thick": geo["any_thick"]}
    for k in _PAIR_KEYS:
        v = geo[k]
        out[k] = v[:, active] if isinstance(v, np.ndarray) else v
    for k in _PRIM_KEYS:
        out[k] = geo[k][active]
    return out


def _composite(a_sorted):
    """Transmittance, kept-mask, weights and final transmittance.

    a_sorted: (P, N) sorted alphas. Returns (T, keep, omega, T_final).
    """
    P, N = a_sorted.shape
    one_minus = 1.0 - a_sorted
    cum = np.cumprod(one_minus, axis=1)
    T = np.concatenate([np.ones((P, 1)), cum[:, :-1]], axis=1)  # T_k before k
    keep = T >= T_STOP
    omega = a_sorted * T * keep
    # transmittance after the last composited splat
    T_all = np.concatenate([T, cum[:, -1:]], axis=1)            # length N+1
    cut = np.argmax(~keep, axis=1)                              # 0 if all kept
    any_cut = ~keep.all(axis=1)
    T_final = np.where(any_cut, T_all[np.arange(P), cut], T_all[:, -1])
    return T, keep, omega, T_final


# ---------------------------------------------------------------------------
# tile renderer (differentiable)


def _tile_lists(cam: Camera, centers, scales, tile: int, near: float):
    """Conservative per-tile primitive lists from projected bounding boxes."""
    N = centers.shape[0]
    ntx = (cam.width + tile - 1) // tile
    nty = (cam.height + tile - 1) // tile
    if N == 0:
        return [np.empty(0, dtype=np.int64) for _ in range(ntx * nty)], ntx, nty

    rho = _R_CUT * scales.max(axis=1)                 # bounding-sphere radius
    offs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                    dtype=np.float64)
    corners = centers[:, None, :] + rho[:, None, None] * offs[None, :, :]
    px, py, z = cam.project(corners.reshape(-1, 3))
    px = px.reshape(N, 8)
    py = py.reshape(N, 8)
    z = z.reshape(N, 8)
    bad = (z <= near).any(axis=1)                     # near-plane crossers: all tiles

    x0 = np.where(bad, 0.0, px.min(axis=1) - 1.0)
    x1 = np.where(bad, cam.width, px.max(axis=1) + 1.0)
    y0 = np.where(bad, 0.0, py.min(axis=1) - 1.0)
    y1 = np.where(bad, cam.height, py.max(axis=1) + 1.0)

    # include the screen-space low-pass footprint around the center
    cpx, cpy, cz = cam.project(centers)
    visible_c = cz > near
    lp = _LP_CUT + 1.0
    x0 = np.where(visible_c, np.minimum(x0, cpx - lp), x0)
    x1 = np.where(visible_c, np.maximum(x1, cpx + lp), x1)
    y0 = np.where(visible_c, np.minimum(y0, cpy - lp), y0)
    y1 = np.where(visible_c, np.maximum(y1, cpy + lp), y1)

    ix0 = np.clip(np.floor(x0 / tile), 0, ntx - 1).astype(np.int64)
    ix1 = np.clip(np.floor((x1 - 1e-9) / tile), 0, ntx - 1).astype(np.int64)
    iy0 = np.clip(np.floor(y0 / tile), 0, nty - 1).astype(np.int64)
    iy1 = np.clip(np.floor((y1 - 1e-9) / tile), 0, nty - 1).astype(np.int64)
    offscreen = (x1 < 0) | (x0 > cam.width) | (y1 < 0) | (y0 > cam.height)

    nx = ix1 - ix0 + 1
    ny = iy1 - iy0 + 1
    counts = np.where(offscreen, 0, nx * ny)
    total = int(counts.sum())
    lists = [np.empty(0, dtype=np.int64) for _ in range(ntx * nty)]
    if total == 0:
        return lists, ntx, nty

    ids = np.repeat(np.arange(N), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - offsets[ids]
    lx = local % nx[ids]
    ly = local // nx[ids]
    tid = (iy0[ids] + ly) * ntx + (ix0[ids] + lx)
    order = np.argsort(tid, kind="stable")            # keeps ids ascending per tile
    tid_s = tid[order]
    ids_s = ids[order]
    starts = np.searchsorted(tid_s, np.arange(ntx * nty))
    ends = np.searchsorted(tid_s, np.arange(ntx * nty), side="right")
    for k in range(ntx * nty):
        lists[k] = ids_s[starts[k]:ends[k]]
    return lists, ntx, nty


def render_tape(centers, frames, scales, opacities, sh, camera: Camera,
                background=(0.0, 0.0, 0.0), tile: int = 16, near: float = 1e-4):
    """Differentiable tile rasterization.

    Inputs may be Tensors or arrays: centers (K,3), frames (K,3,3) with the
    plane normal in the third column, scales (K,3) (third entry 0 => pure
    surfel), opacities (K,), sh (K,16,3).

    Returns (packed, framebuffer): ``packed`` is an (H, W, 8) Tensor laid out
    as [color rgb, alpha, sum(w*t), blended normal xyz]; the framebuffer holds
    the plain-array outputs including contributor lists (depth there is
    weight-normalized).
    """
    ct, fr, sc, op, shc = map(as_tensor, (centers, frames, scales, opacities, sh))
    C = ct.data
    F = fr.data
    S = np.maximum(sc.data, 0.0)
    O = np.clip(op.data, 0.0, 1.0)
    SH = shc.data
    K = C.shape[0]
    H, W = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64)
    needs_grad = any(p.requires_grad for p in (ct, fr, sc, op, shc))

    o = camera.center()
    dirs = camera.pixel_dirs().reshape(-1, 3)
    basis_all = sh_basis(dirs)                        # (HW, 16)
    jj = (np.arange(W) + 0.5)
    ii = (np.arange(H) + 0.5)
    px_all = np.broadcast_to(jj, (H, W)).reshape(-1)
    py_all = np.broadcast_to(ii[:, None], (H, W)).reshape(-1)

    PXc, PYc, PZc = camera.project(C) if K else (np.zeros(0), np.zeros(0), np.zeros(0))
    cz_ok = PZc > near
    lists, ntx, nty = _tile_lists(camera, C, S, tile, near)

    packed = np.zeros((H * W, 8))
    packed[:, 0:3] = bg                               # empty pixels keep background
    contrib = []                                      # per-tile CSR chunks
    tile_cache = []

    for ty in range(nty):
        for tx in range(ntx):
            ids0 = lists[ty * ntx + tx]
            xs = slice(tx * tile, min((tx + 1) * tile, W))
            ys = slice(ty * tile, min((ty + 1) * tile, H))
            pix = (np.arange(H).reshape(-1, 1) * W + np.arange(W))[ys, xs].reshape(-1)
            if ids0.size == 0:
                continue
            geo_full = _pair_geometry(o, dirs[pix], px_all[pix], py_all[pix],
                                      C[ids0], F[ids0], S[ids0], PXc[ids0], PYc[ids0],
                                      cz_ok[ids0], near)
            active = geo_full["G"].any(axis=0)
            if not active.any():
                continue
            ids = ids0[active]
            geo = _compress_geo(geo_full, active)
            G = geo["G"]
            t_pair = geo["t"]

            a = np.minimum(O[ids][None, :] * G, A_MAX)
            key = np.where(G > 0.0, t_pair, np.inf)
            order = np.argsort(key, axis=1, kind="stable")
            a_s = np.take_along_axis(a, order, axis=1)
            T, keep, omega_s, T_final = _composite(a_s)
            inv = np.argsort(order, axis=1, kind="stable")
            omega = np.take_along_axis(omega_s, inv, axis=1)   # gather layout

            # (P,16) @ (16, N*3) -> (P, N, 3)
            cols = (basis_all[pix] @ SH[ids].transpose(1, 0, 2).reshape(16, -1)).reshape(-1, ids.size, 3) + 0.5
            np.clip(cols, 0.0, 1.0, out=cols)

            packed[pix, 0:3] = (np.matmul(omega[:, None, :], cols)[:, 0, :]
                                + T_final[:, None] * bg)
            packed[pix, 3] = omega.sum(axis=1)
            packed[pix, 4] = (omega * t_pair).sum(axis=1)
            packed[pix, 5:8] = omega @ geo["nrm"]

            ids_s = np.take_along_axis(np.broadcast_to(ids[None, :], order.shape), order, axis=1)
            nz = omega_s > 0.0
            counts_t = nz.sum(axis=1)
            contrib.append((pix, counts_t, ids_s[nz].astype(np.int32), omega_s[nz]))
            if needs_grad:
                tile_cache.append((pix, ids, geo, order))

    # CSR contributor lists (row-major over pixels)
    counts = np.zeros(H * W, dtype=np.int64)
    for pix, counts_t, _, _ in contrib:
        counts[pix] = counts_t
    offsets = np.concatenate([[0], np.cumsum(counts)])
    all_ids = np.empty(offsets[-1], dtype=np.int32)
    all_w = np.empty(offsets[-1])
    for pix, counts_t, flat_ids, flat_w in contrib:
        pos = 0
        starts = offsets[pix]
        for r in range(pix.size):
            c = counts_t[r]
            if c:
                all_ids[starts[r]:starts[r] + c] = flat_ids[pos:pos + c]
                all_w[starts[r]:starts[r] + c] = flat_w[pos:pos + c]
                pos += c

    alpha_img = packed[:, 3].reshape(H, W)
    depth_img = packed[:, 4].reshape(H, W) / np.maximum(alpha_img, 1e-12)
    fb = FrameBuffer(color=packed[:, 0:3].reshape(H, W, 3).copy(),
                     alpha=alpha_img.copy(), depth=depth_img,
                     normal=packed[:, 5:8].reshape(H, W, 3).copy(),
                     contrib_offsets=offsets, contrib_ids=all_ids,
                     contrib_weights=all_w, background=bg)

    out = Tensor(packed.reshape(H, W, 8), parents=(ct, fr, sc, op, shc))
    if out.requires_grad:
        def bw(gpack):
            g = gpack.reshape(H * W, 8)
            gC = np.zeros_like(C)
            gF = np.zeros_like(F)
            gS = np.zeros_like(S)
            gO = np.zeros_like(O)
            gSH = np.zeros_like(SH)
            for pix, ids, geo, order in tile_cache:
                _raster_backward(g[pix], o, dirs[pix], basis_all[pix],
                                 C, O, SH, cz_ok, ids, geo, order, camera,
                                 bg, gC, gF, gS, gO, gSH)
            if ct.requires_grad:
                ct._accumulate(gC)
            if fr.requires_grad:
                fr._accumulate(gF)
            if sc.requires_grad:
                gS_m = np.where(sc.data > 0.0, gS, 0.0)  # scales clamp at 0
                sc._accumulate(gS_m)
            if op.requires_grad:
                gO_m = np.where((op.data > 0.0) & (op.data < 1.0), gO, 0.0)
                op._accumulate(gO_m)
            if shc.requires_grad:
                shc._accumulate(gSH)
        out._bw = bw
    return out, fb


def _raster_backward(g, o, D, basis, C, O, SH, cz_ok, ids, geo, order,
                     cam: Camera, bg, gC, gF, gS, gO, gSH):
    """Hand-written backward for one tile from the cached pair geometry."""
    O_cl = np.clip(O, 0.0, 1.0)
    G = geo["G"]
    t = geo["t"]
    P, N = G.shape
    opac = O_cl[ids][None, :]
    a = np.minimum(opac * G, A_MAX)
    a_clip = opac * G < A_MAX

    a_s = np.take_along_axis(a, order, axis=1)
    T_s, keep_s, omega_s, T_final = _composite(a_s)
    inv = np.argsort(order, axis=1, kind="stable")
    omega = np.take_along_axis(omega_s, inv, axis=1)
    T_u = np.take_along_axis(T_s, inv, axis=1)
    keep_u = np.take_along_axis(keep_s, inv, axis=1)

    cols = (basis @ SH[ids].transpose(1, 0, 2).reshape(16, -1)).reshape(P, N, 3) + 0.5
    col_mask = (cols > 0.0) & (cols < 1.0)
    np.clip(cols, 0.0, 1.0, out=cols)

    nrm_a = geo["nrm"]
    gc = g[:, 0:3]
    ga_out = g[:, 3]
    gd_out = g[:, 4]
    gn_out = g[:, 5:8]

    # dL/d omega (gather layout), then the compositing chain in sorted layout
    ds = (np.matmul(cols, gc[:, :, None])[:, :, 0] + ga_out[:, None]
          + gd_out[:, None] * t + gn_out @ nrm_a.T)
    ws = omega * ds
    ws_s = np.take_along_axis(ws, order, axis=1)
    rev = np.cumsum(ws_s[:, ::-1], axis=1)[:, ::-1]
    suffix_s = rev - ws_s                               # sum_{j>k} omega_j ds_j
    suffix = np.take_along_axis(suffix_s, inv, axis=1)
    sbg = gc @ bg
    one_m = np.maximum(1.0 - a, 1e-12)
    ga_pair = keep_u * (T_u * ds - (suffix + (T_final * sbg)[:, None]) / one_m)

    live = G > 0.0
    ga_pair *= live
    gO_tile = np.where(a_clip, ga_pair * G, 0.0).sum(axis=0)
    gG = np.where(a_clip, ga_pair * opac, 0.0)

    uv_branch = geo["g_uv"] >= geo["g_lp"]
    gq = np.where(live & uv_branch, -0.5 * geo["g_uv"] * gG, 0.0)
    gd2 = np.where(live & ~uv_branch, -geo["g_lp"] / (2.0 * SIGMA_LP ** 2) * gG, 0.0)

    b1, b2 = geo["b1"], geo["b2"]
    s1, s2, s3 = geo["s1"], geo["s2"], geo["s3"]
    u_r, v_r = geo["u_r"], geo["v_r"]
    dd1, dd2, den = geo["dd1"], geo["dd2"], geo["den"]
    thick = geo["thick"][None, :]

    if geo["any_thick"] and thick.any():
        a1, a2, a3 = geo["a1"], geo["a2"], geo["a3"]
        BtA = geo["Bt"] / geo["A"]
        gb1 = np.where(thick, (2.0 * b1 - 2.0 * BtA * a1) * gq, 2.0 * b1 * gq)
        gb2 = np.where(thick, (2.0 * b2 - 2.0 * BtA * a2) * gq, 2.0 * b2 * gq)
        ga1 = np.where(thick, (-2.0 * BtA * b1 + 2.0 * a1 * BtA * BtA) * gq, 0.0)
        ga2 = np.where(thick, (-2.0 * BtA * b2 + 2.0 * a2 * BtA * BtA) * gq, 0.0)
        ga3 = np.where(thick, (2.0 * a3 * BtA * BtA) * gq, 0.0)
        gs3 = np.where(thick, (-den / s3[None, :] ** 2) * ga3, 0.0).sum(axis=0)
        gdd1_extra = ga1 / s1[None, :]
        gdd2_extra = ga2 / s2[None, :]
        gden_extra = ga3 / s3[None, :]
        gs1_extra = (-dd1 / s1[None, :] ** 2) * ga1
        gs2_extra = (-dd2 / s2[None, :] ** 2) * ga2
    else:
        gb1 = 2.0 * b1 * gq
        gb2 = 2.0 * b2 * gq
        gs3 = np.zeros(N)
        gdd1_extra = gdd2_extra = gden_extra = 0.0
        gs1_extra = gs2_extra = 0.0

    gu_r = gb1 / s1[None, :]
    gv_r = gb2 / s2[None, :]
    gs1 = ((-u_r / s1[None, :] ** 2) * gb1 + gs1_extra).sum(axis=0)
    gs2 = ((-v_r / s2[None, :] ** 2) * gb2 + gs2_extra).sum(axis=0)

    gdd1 = gdd1_extra + t * gu_r
    gdd2 = gdd2_extra + t * gv_r
    gt_geo = gu_r * dd1 + gv_r * dd2 + omega * gd_out[:, None]
    safe_den = np.where(geo["valid"], den, -1.0)
    gden = gden_extra + gt_geo * (-t / safe_den)
    gtnum = gt_geo / safe_den
    s_op1 = gu_r.sum(axis=0)
    s_op2 = gv_r.sum(axis=0)
    s_tnum = gtnum.sum(axis=0)

    # reduce pair gradients to per-primitive gradients, (N, 3) each
    f1, f2 = geo["f1"], geo["f2"]
    o_minus_p = o[None, :] - C[ids]
    gf1 = gdd1.T @ D + s_op1[:, None] * o_minus_p
    gf2 = gdd2.T @ D + s_op2[:, None] * o_minus_p
    gn_geo = gden.T @ D - s_tnum[:, None] * o_minus_p
    gn_pay = omega.T @ gn_out                          # payload normal gradient

    gp = (-s_op1[:, None] * f1 - s_op2[:, None] * f2 + s_tnum[:, None] * nrm_a)

    # screen-space low-pass chain to the projected center
    gpx = (2.0 * geo["dx"] * gd2).sum(axis=0)
    gpy = (2.0 * geo["dy"] * gd2).sum(axis=0)
    Rc = cam.pose.rot.m
    pc = cam.pose.apply(C[ids])
    z = np.where(cz_ok[ids], pc[:, 2], 1.0)
    dpx_dp = cam.fx * (Rc[0][None, :] * z[:, None] - pc[:, 0:1] * Rc[2][None, :]) / (z ** 2)[:, None]
    dpy_dp = cam.fy * (Rc[1][None, :] * z[:, None] - pc[:, 1:2] * Rc[2][None, :]) / (z ** 2)[:, None]
    gp_screen = gpx[:, None] * dpx_dp + gpy[:, None] * dpy_dp

    # SH chain through the clip mask: (16,P) @ (P, N*3) -> (N, 16, 3)
    gcol_m = np.where(col_mask, omega[..., None] * gc[:, None, :], 0.0)
    gsh_tile = (basis.T @ gcol_m.reshape(P, N * 3)).reshape(16, N, 3).transpose(1, 0, 2)

    np.add.at(gC, ids, gp + gp_screen)
    gframe = np.stack([gf1, gf2, gn_geo + gn_pay], axis=2)
    np.add.at(gF, ids, gframe)
    gs = np.stack([gs1, gs2, gs3], axis=1)
    np.add.at(gS, ids, gs)
    np.add.at(gO, ids, gO_tile)
    np.add.at(gSH, ids, gsh_tile)


def render_arrays(centers, frames, scales, opacities, sh, camera: Camera,
                  background=(0.0, 0.0, 0.0), tile: int = 16, near: float = 1e-4) -> FrameBuffer:
    """Non-differentiable convenience wrapper around the tile renderer."""
    _, fb = render_tape(np.asarray(centers, dtype=np.float64), np.asarray(frames, dtype=np.float64),
                        np.asarray(scales, dtype=np.float64), np.asarray(opacities, dtype=np.float64),
                        np.asarray(sh, dtype=np.float64), camera, background, tile, near)
    return fb


# ---------------------------------------------------------------------------
# brute-force oracle (independent compositing path)


def render_bruteforce(centers, frames, scales, opacities, sh, camera: Camera,
                      background=(0.0, 0.0, 0.0), near: float = 1e-4) -> FrameBuffer:
    """Reference renderer: per-pixel, per-primitive compositing with no tiles
    or culling. The density of thickness-bearing primitives is computed from
    the explicit 3D precision matrix (a different algebraic route than the
    tile path)."""
    C = np.asarray(centers, dtype=np.float64)
    F = np.asarray(frames, dtype=np.float64)
    S = np.maximum(np.asarray(scales, dtype=np.float64), 0.0)
    O = np.clip(np.asarray(opacities, dtype=np.float64), 0.0, 1.0)
    SH = np.asarray(sh, dtype=np.float64)
    K = C.shape[0]
    H, W = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64)

    o = camera.center()
    dirs = camera.pixel_dirs().reshape(-1, 3)
    P = dirs.shape[0]
    jj = (np.arange(W) + 0.5)
    ii = (np.arange(H) + 0.5)
    px_pix = np.broadcast_to(jj, (H, W)).reshape(-1)
    py_pix = np.broadcast_to(ii[:, None], (H, W)).reshape(-1)

    if K == 0:
        color = np.broadcast_to(bg, (H, W, 3)).copy()
        return FrameBuffer(color, np.zeros((H, W)), np.zeros((H, W)),
                           np.zeros((H, W, 3)), np.zeros(H * W + 1, dtype=np.int64),
                           np.zeros(0, dtype=np.int32), np.zeros(0), bg)

    nrm = F[:, :, 2]
    # the plane intersection is a shared definitional quantity: computed with
    # the same float operations as the tile path so near-grazing hits agree
    den = dirs @ nrm.T                                  # (P, K)
    tnum = -((o[None, :] - C) * nrm).sum(axis=1)
    front = den < -_EPS_DEN
    safe_den = np.where(front, den, -1.0)
    t = tnum[None, :] / safe_den
    valid = front & (t > near) & (t < FAR_CLIP)
    t_safe = np.where(valid, t, 1.0)

    X = o[None, None, :] + t_safe[..., None] * dirs[:, None, :]   # (P, K, 3)
    delta = X - C[None, :, :]
    loc1 = np.einsum("pkj,kj->pk", delta, F[:, :, 0])
    loc2 = np.einsum("pkj,kj->pk", delta, F[:, :, 1])
    q = (loc1 / S[:, 0]) ** 2 + (loc2 / S[:, 1]) ** 2

    thick = S[:, 2] > _THICK_EPS
    if thick.any():
        idx = np.nonzero(thick)[0]
        inv_s2 = 1.0 / S[idx] ** 2
        M = np.einsum("kij,kj,klj->kil", F[idx], inv_s2, F[idx])  # F diag(1/s^2) F^T
        dMd = np.einsum("pj,kjl,pl->pk", dirs, M, dirs)
        dlt = X[:, idx, :] - C[None, idx, :]
        dMdelta = np.einsum("pj,kjl,pkl->pk", dirs, M, dlt)
        tau = -dMdelta / dMd
        Xm = X[:, idx, :] + tau[..., None] * dirs[:, None, :]
        dm = Xm - C[None, idx, :]
        q_th = np.einsum("pkj,kjl,pkl->pk", dm, M, dm)
        q[:, idx] = q_th

    cpx, cpy, cpz = camera.project(C)
    ddx = cpx[None, :] - px_pix[:, None]
    ddy = cpy[None, :] - py_pix[:, None]
    d2 = ddx * ddx + ddy * ddy
    g_uv = np.zeros_like(q)
    qm = q <= _Q_CUT
    g_uv[qm] = np.exp(-0.5 * q[qm])
    g_lp = np.zeros_like(d2)
    dm = (d2 <= _Q_CUT * SIGMA_LP ** 2) & (cpz > near)[None, :]
    g_lp[dm] = np.exp(-d2[dm] / (2.0 * SIGMA_LP ** 2))
    G = np.maximum(g_uv, g_lp)
    G = np.where(valid & (G >= G_MIN), G, 0.0)

    a = np.minimum(O[None, :] * G, A_MAX)
    key = np.where(G > 0.0, t, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    a_s = np.take_along_axis(a, order, axis=1)

    # compositing recurrence, written out independently of the tile path;
    # the left-to-right product fold over (1 - a) is part of the contract
    # (the 1e-4 early-out decision must agree bitwise between renderers)
    T_all = np.cumprod(np.concatenate([np.ones((P, 1)), 1.0 - a_s], axis=1), axis=1)
    T = T_all[:, :-1]
    keep = T >= T_STOP
    omega = a_s * T * keep
    cut = np.argmax(~keep, axis=1)
    any_cut = ~keep.all(axis=1)
    T_final = np.where(any_cut, T_all[np.arange(P), cut], T_all[:, -1])

    basis = sh_basis(dirs)
    cols = np.clip((basis @ SH.transpose(1, 0, 2).reshape(16, -1)).reshape(P, K, 3) + 0.5, 0.0, 1.0)
    c_s = np.take_along_axis(cols, order[..., None], axis=1)
    t_s = np.take_along_axis(t, order, axis=1)
    n_pair = np.broadcast_to(nrm[None, :, :], (P, K, 3))
    n_s = np.take_along_axis(n_pair, order[..., None], axis=1)

    color = np.einsum("pn,pnc->pc", omega, c_s) + T_final[:, None] * bg
    alpha = omega.sum(axis=1)
    dsum = (omega * t_s).sum(axis=1)
    nsum = np.einsum("pn,pnc->pc", omega, n_s)

    ids_s = np.take_along_axis(np.broadcast_to(np.arange(K)[None, :], order.shape), order, axis=1)
    counts = (omega > 0.0).sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    all_ids = np.empty(offsets[-1], dtype=np.int32)
    all_w = np.empty(offsets[-1])
    for r in range(P):
        m = omega[r] > 0.0
        all_ids[offsets[r]:offsets[r + 1]] = ids_s[r, m]
        all_w[offsets[r]:offsets[r + 1]] = omega[r, m]

    return FrameBuffer(color.reshape(H, W, 3), alpha.reshape(H, W),
                       (dsum / np.maximum(alpha, 1e-12)).reshape(H, W),
                       nsum.reshape(H, W, 3), offsets, all_ids, all_w, bg)


# ---------------------------------------------------------------------------
# normals from depth, normal-consistency loss, confidence


def surface_normal_from_depth(fb: FrameBuffer, camera: Camera):
    """Normal map from finite differences of backprojected depth.

    Central differences interior, one-sided at image borders; pixels whose
    stencil touches alpha <= 0.5 are flagged invalid. Returns (N, valid).
    """
    H, W = fb.depth.shape
    dirs = camera.pixel_dirs()
    pts = camera.center()[None, None, :] + fb.depth[..., None] * dirs
    cov = fb.alpha > 0.5

    def _grad(axis):
        g = np.zeros_like(pts)
        ok = np.zeros((H, W), dtype=bool)
        if axis == 1:  # x: along width
            g[:, 1:-1] = (pts[:, 2:] - pts[:, :-2]) * 0.5
            ok[:, 1:-1] = cov[:, 2:] & cov[:, :-2]
            g[:, 0] = pts[:, 1] - pts[:, 0]
            ok[:, 0] = cov[:, 1] & cov[:, 0]
            g[:, -1] = pts[:, -1] - pts[:, -2]
            ok[:, -1] = cov[:, -1] & cov[:, -2]
        else:
            g[1:-1, :] = (pts[2:, :] - pts[:-2, :]) * 0.5
            ok[1:-1, :] = cov[2:, :] & cov[:-2, :]
            g[0, :] = pts[1, :] - pts[0, :]
            ok[0, :] = cov[1, :] & cov[0, :]
            g[-1, :] = pts[-1, :] - pts[-2, :]
            ok[-1, :] = cov[-1, :] & cov[-2, :]
        return g, ok

    gx, okx = _grad(1)
    gy, oky = _grad(0)
    n = np.cross(gx, gy, axis=-1)
    nn = np.linalg.norm(n, axis=-1, keepdims=True)
    valid = cov & okx & oky & (nn[..., 0] > 1e-12)
    n = np.where(valid[..., None], n / np.maximum(nn, 1e-12), 0.0)
    # orient toward the camera
    flip = np.sum(n * dirs, axis=-1) > 0.0
    n = np.where((valid & flip)[..., None], -n, n)
    return n, valid


def normal_consistency_loss(fb: FrameBuffer, N: np.ndarray, valid: np.ndarray) -> float:
    """sum over valid pixels of sum_k w_k (1 - n_k . N)."""
    per_pix = fb.alpha - np.sum(fb.normal * N, axis=-1)
    return float(per_pix[valid].sum())


def confidence_map(fb: FrameBuffer, N: np.ndarray, valid: np.ndarray, threshold: float) -> ConfidenceMap:
    """Binary mask of pixels whose blended normal agrees with the depth normal."""
    e = np.sum((fb.normal - N) ** 2, axis=-1)
    mask = ((e < threshold) & valid & (fb.alpha > 0.5)).astype(np.uint8)
    return ConfidenceMap(mask, float(threshold))
