"""Static-state Gaussian surfels, control bones, skinning weights, and the
forward / refined / backward warping operations.

A surfel is a 2D Gaussian on a local tangent plane: center p, tangent frame
R = [t_u, t_v, t_u x t_v], scales (s_u, s_v). The cloud is stored
struct-of-arrays; ``Surfel``/``Bone`` dataclasses are the single-element
exchange form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .geom import SE3, Rotation3, UnitDualQuaternion

# real spherical harmonics, degree 0..3 (16 coefficients x 3 channels)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)
N_SH = 16

MIN_SCALE = 1e-6  # degenerate-surfel clamp, scene units


def sh0_from_rgb(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficients whose evaluated color equals ``rgb``."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def rgb_from_sh0(sh0: np.ndarray) -> np.ndarray:
    return np.asarray(sh0, dtype=np.float64) * SH_C0 + 0.5


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Degree-0..3 real SH basis values for unit directions, (..., 16)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    one = np.ones_like(x)
    return np.stack(
        [
            SH_C0 * one,
            -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
            SH_C2[0] * xy, SH_C2[1] * yz, SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz, SH_C2[4] * (xx - yy),
            SH_C3[0] * y * (3.0 * xx - yy), SH_C3[1] * xy * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ],
        axis=-1,
    )


def eval_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Evaluate degree-0..3 SH colors.

    sh: (..., 16, 3), dirs: (..., 3) unit view directions. Returns (..., 3)
    colors offset by +0.5, not clipped.
    """
    basis = sh_basis(np.asarray(dirs, dtype=np.float64))
    return np.einsum("...i,...ic->...c", basis, sh) + 0.5


# ---------------------------------------------------------------------------
# exchange dataclasses


@dataclass
class Surfel:
    center: np.ndarray            # (3,)
    frame: Rotation3              # columns t_u, t_v, t_u x t_v
    scales: np.ndarray            # (2,) positive
    opacity: float = 0.5
    sh: np.ndarray = None         # (16, 3)

    def __post_init__(self):
        if self.sh is None:
            self.sh = np.zeros((N_SH, 3))

    @property
    def normal(self) -> np.ndarray:
        return self.frame.m[:, 2]


@dataclass
class RefinementDelta:
    rot: Rotation3                # delta rotation applied left of the frame
    dscale: np.ndarray            # (3,) nonnegative additive scale terms

    @staticmethod
    def identity() -> "RefinementDelta":
        return RefinementDelta(Rotation3.identity(), np.zeros(3))


@dataclass
class Bone:
    center: np.ndarray            # (3,)
    orient: Rotation3
    prec_scale: np.ndarray        # (3,) positive diagonal of the precision


@dataclass
class BoneSet:
    """B control bones, struct-of-arrays."""

    centers: np.ndarray           # (B, 3)
    orients: np.ndarray           # (B, 3, 3)
    prec_scales: np.ndarray       # (B, 3)

    def __len__(self):
        return self.centers.shape[0]

    def warped(self, J: SE3) -> "BoneSet":
        """Apply per-bone rigid transforms (batched SE3 with B leading)."""
        centers = J.apply(self.centers)
        orients = J.rot.m @ self.orients
        return BoneSet(centers, orients, self.prec_scales)

    def precision(self) -> np.ndarray:
        """Per-bone precision matrices V^T diag(prec) V, (B, 3, 3)."""
        V = self.orients
        return np.swapaxes(V, -1, -2) @ (self.prec_scales[..., None] * V)


@dataclass
class SurfelCloud:
    """K surfels (+ optional refinement deltas) and B bones."""

    centers: np.ndarray           # (K, 3)
    quats: np.ndarray             # (K, 4) tangent-frame rotations
    scales: np.ndarray            # (K, 2) positive
    opacities: np.ndarray         # (K,) in [0, 1]
    sh: np.ndarray                # (K, 16, 3)
    bones: BoneSet
    delta_quats: np.ndarray = None    # (K, 4), optional refinement rotation
    delta_scales: np.ndarray = None   # (K, 3) >= 0, optional

    def __len__(self):
        return self.centers.shape[0]

    @property
    def has_deltas(self) -> bool:
        return self.delta_quats is not None

    def frames(self) -> np.ndarray:
        return geom.quat_to_rotmat(self.quats)

    def surfel(self, k: int) -> Surfel:
        return Surfel(self.centers[k], Rotation3(geom.quat_to_rotmat(self.quats[k])),
                      self.scales[k], float(self.opacities[k]), self.sh[k])

    def delta(self, k: int) -> RefinementDelta:
        if not self.has_deltas:
            return RefinementDelta.identity()
        return RefinementDelta(Rotation3(geom.quat_to_rotmat(self.delta_quats[k])),
                               self.delta_scales[k])

    def validate(self):
        assert self.scales.min() > 0.0, "surfel scales must be positive"
        assert 0.0 <= self.opacities.min() and self.opacities.max() <= 1.0
        assert len(self.bones) >= 1
        if self.has_deltas:
            assert self.delta_quats.shape[0] == len(self)
            assert self.delta_scales.min() >= 0.0
        frames = self.frames()
        n = np.cross(frames[:, :, 0], frames[:, :, 1], axis=-1)
        assert np.abs(np.linalg.norm(n, axis=-1) - 1.0).max() < 1e-6
        assert np.abs(n - frames[:, :, 2]).max() < 1e-6


@dataclass
class WarpedPrimitive:
    """A surfel (or refined ellipsoid) after warping to a frame."""

    center: np.ndarray            # (..., 3)
    frame: np.ndarray             # (..., 3, 3)
    scales: np.ndarray            # (..., 3); third entry 0 for pure surfels

    @property
    def normal(self) -> np.ndarray:
        return self.frame[..., :, 2]


# ---------------------------------------------------------------------------
# operations


def surfel_point(s: Surfel, uv) -> np.ndarray:
    """World-space point of local tangent coordinates (u, v)."""
    u, v = float(uv[0]), float(uv[1])
    m = s.frame.m
    return s.center + s.scales[0] * m[:, 0] * u + s.scales[1] * m[:, 1] * v


def skinning_weights(x: np.ndarray, bones: BoneSet, temperature: float = 1.0) -> np.ndarray:
    """Simplex weights over bones from softmax(-mahalanobis / T).

    ``bones`` must already be warped to the query frame; ``x`` is (..., 3)
    and the result is (..., B).
    """
    Q = bones.precision()                              # (B, 3, 3)
    d = np.asarray(x, dtype=np.float64)[..., None, :] - bones.centers  # (..., B, 3)
    delta = np.einsum("...bi,bij,...bj->...b", d, Q, d)
    logits = -delta / float(temperature)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def warp_point(J: SE3, G: SE3, x: np.ndarray) -> np.ndarray:
    """Apply the local rigid warp then the root pose: G·J·x."""
    return G.apply(J.apply(np.asarray(x, dtype=np.float64)))


def warp_surfel(s: Surfel, delta: RefinementDelta | None, J: SE3, G: SE3 | None = None) -> WarpedPrimitive:
    """Warp one surfel; with a delta the refined (thickness-bearing) branch."""
    if G is None:
        G = SE3.identity()
    W = G.compose(J)
    center = W.apply(s.center)
    if delta is None:
        frame = W.rot.m @ s.frame.m
        scales = np.array([s.scales[0], s.scales[1], 0.0])
    else:
        frame = W.rot.m @ (delta.rot.m @ s.frame.m)
        scales = np.array([s.scales[0], s.scales[1], 0.0]) + delta.dscale
    return WarpedPrimitive(center, frame, scales)


def blend_bone_transforms(w: np.ndarray, bone_dqs: UnitDualQuaternion) -> SE3:
    """Forward DQB of per-bone transforms with weights (..., B)."""
    return geom.dqb_blend(w, bone_dqs)


def backward_warp(bone_transforms: list[SE3] | SE3, w: np.ndarray, G: SE3, xf: np.ndarray) -> np.ndarray:
    """Map a warped-state point back to the static state.

    Blends the per-bone inverse dual quaternions with the given weights and
    applies the result after undoing the root pose.
    """
    if isinstance(bone_transforms, SE3):
        reals = geom.dq_from_se3(bone_transforms).real
        duals = geom.dq_from_se3(bone_transforms).dual
    else:
        reals = np.stack([geom.dq_from_se3(T).real for T in bone_transforms], axis=-2)
        duals = np.stack([geom.dq_from_se3(T).dual for T in bone_transforms], axis=-2)
    w = np.asarray(w, dtype=np.float64)
    shape = w.shape + (4,)
    dq = UnitDualQuaternion(np.broadcast_to(reals, shape), np.broadcast_to(duals, shape))
    J_inv = geom.dqb_blend(w, geom.dq_conj(dq))
    return J_inv.apply(G.inverse().apply(np.asarray(xf, dtype=np.float64)))


def cycle_loss(x_static: np.ndarray, x_frame: np.ndarray, J: SE3, G: SE3) -> np.ndarray:
    """Squared forward-warp residual |G·J·x* - x^f|^2."""
    r = warp_point(J, G, x_static) - np.asarray(x_frame, dtype=np.float64)
    return np.sum(r * r, axis=-1)


def complete_tangent_frame(normals: np.ndarray, helper: np.ndarray | None = None) -> np.ndarray:
    """Build frames [t_u, t_v, n] by Gram-Schmidt against a helper axis.

    Falls back to a second helper where the first is nearly parallel to n.
    Returns (..., 3, 3) with the normal in the third column.
    """
    n = np.asarray(normals, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    if helper is None:
        helper = np.array([0.0, 0.0, 1.0])
    h = np.broadcast_to(helper, n.shape).copy()
    par = np.abs(np.sum(h * n, axis=-1)) > 0.99
    h[par] = np.array([1.0, 0.0, 0.0])
    tu = h - np.sum(h * n, axis=-1, keepdims=True) * n
    tu = tu / np.linalg.norm(tu, axis=-1, keepdims=True)
    tv = np.cross(n, tu, axis=-1)
    return np.stack([tu, tv, n], axis=-1)
