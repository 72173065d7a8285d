"""Rigid-motion algebra: rotations, quaternions, dual quaternions, SE(3), and
dual-quaternion blend skinning.

Conventions:
  * quaternions are (..., 4) arrays in (w, x, y, z) order;
  * rotation matrices act on column vectors, ``x' = R @ x``;
  * all functions broadcast over leading batch dimensions;
  * float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateQuaternion, ZeroBlend

# ---------------------------------------------------------------------------
# quaternions


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b for (..., 4) quaternions."""
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] = -out[..., 1:]
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_from_axis_angle(axis: np.ndarray, angle_rad) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle_rad, dtype=np.float64)
    half = 0.5 * angle
    w = np.cos(half)
    xyz = axis * np.sin(half)[..., None]
    return np.concatenate([w[..., None], xyz], axis=-1)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (input is normalized first)."""
    q = quat_normalize(np.asarray(q, dtype=np.float64))
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix, w >= 0 branch-stable (Shepperd)."""
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    n = m.shape[0]
    q = np.empty((n, 4), dtype=np.float64)

    t = np.einsum("nii->n", m)
    # four candidate pivots; pick the largest diagonal-ish term per element
    cand = np.stack([t, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    case = np.argmax(cand, axis=1)

    for c in range(4):
        idx = np.nonzero(case == c)[0]
        if idx.size == 0:
            continue
        mm = m[idx]
        if c == 0:
            s = np.sqrt(t[idx] + 1.0) * 2.0
            q[idx, 0] = 0.25 * s
            q[idx, 1] = (mm[:, 2, 1] - mm[:, 1, 2]) / s
            q[idx, 2] = (mm[:, 0, 2] - mm[:, 2, 0]) / s
            q[idx, 3] = (mm[:, 1, 0] - mm[:, 0, 1]) / s
        elif c == 1:
            s = np.sqrt(1.0 + mm[:, 0, 0] - mm[:, 1, 1] - mm[:, 2, 2]) * 2.0
            q[idx, 0] = (mm[:, 2, 1] - mm[:, 1, 2]) / s
            q[idx, 1] = 0.25 * s
            q[idx, 2] = (mm[:, 0, 1] + mm[:, 1, 0]) / s
            q[idx, 3] = (mm[:, 0, 2] + mm[:, 2, 0]) / s
        elif c == 2:
            s = np.sqrt(1.0 + mm[:, 1, 1] - mm[:, 0, 0] - mm[:, 2, 2]) * 2.0
            q[idx, 0] = (mm[:, 0, 2] - mm[:, 2, 0]) / s
            q[idx, 1] = (mm[:, 0, 1] + mm[:, 1, 0]) / s
            q[idx, 2] = 0.25 * s
            q[idx, 3] = (mm[:, 1, 2] + mm[:, 2, 1]) / s
        else:
            s = np.sqrt(1.0 + mm[:, 2, 2] - mm[:, 0, 0] - mm[:, 1, 1]) * 2.0
            q[idx, 0] = (mm[:, 1, 0] - mm[:, 0, 1]) / s
            q[idx, 1] = (mm[:, 0, 2] + mm[:, 2, 0]) / s
            q[idx, 2] = (mm[:, 1, 2] + mm[:, 2, 1]) / s
            q[idx, 3] = 0.25 * s

    sign = np.where(q[:, :1] < 0.0, -1.0, 1.0)
    q = quat_normalize(q * sign)
    return q.reshape(*batch, 4)


# ---------------------------------------------------------------------------
# exchange types


@dataclass(frozen=True)
class Rotation3:
    """Rotation matrix wrapper; ``m`` is (..., 3, 3)."""

    m: np.ndarray

    def is_valid(self, tol: float = 1e-6) -> bool:
        eye = np.eye(3)
        ortho = np.abs(np.swapaxes(self.m, -1, -2) @ self.m - eye).max()
        det = np.abs(np.linalg.det(self.m) - 1.0).max()
        return bool(ortho <= tol and det <= tol)

    @staticmethod
    def identity(batch: tuple = ()) -> "Rotation3":
        return Rotation3(np.broadcast_to(np.eye(3), batch + (3, 3)).copy())

    @staticmethod
    def from_quat(q: np.ndarray) -> "Rotation3":
        return Rotation3(quat_to_rotmat(q))

    @staticmethod
    def from_axis_angle(axis, angle_rad) -> "Rotation3":
        return Rotation3(quat_to_rotmat(quat_from_axis_angle(axis, angle_rad)))


@dataclass(frozen=True)
class SE3:
    """Rigid transform; ``rot.m`` is (..., 3, 3), ``trans`` is (..., 3)."""

    rot: Rotation3
    trans: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.squeeze(self.rot.m @ x[..., None], -1) + self.trans

    def compose(self, other: "SE3") -> "SE3":
        """self ∘ other: apply ``other`` first, then ``self``."""
        m = self.rot.m @ other.rot.m
        t = np.squeeze(self.rot.m @ other.trans[..., None], -1) + self.trans
        return SE3(Rotation3(m), t)

    def inverse(self) -> "SE3":
        rt = np.swapaxes(self.rot.m, -1, -2)
        return SE3(Rotation3(rt), -np.squeeze(rt @ self.trans[..., None], -1))

    def as_matrix(self) -> np.ndarray:
        batch = self.trans.shape[:-1]
        out = np.zeros(batch + (4, 4), dtype=np.float64)
        out[..., :3, :3] = self.rot.m
        out[..., :3, 3] = self.trans
        out[..., 3, 3] = 1.0
        return out

    def is_valid(self, tol: float = 1e-6) -> bool:
        return self.rot.is_valid(tol) and bool(np.isfinite(self.trans).all())

    @staticmethod
    def identity(batch: tuple = ()) -> "SE3":
        return SE3(Rotation3.identity(batch), np.zeros(batch + (3,)))

    @staticmethod
    def from_rot_trans(m: np.ndarray, t: np.ndarray) -> "SE3":
        return SE3(Rotation3(np.asarray(m, dtype=np.float64)), np.asarray(t, dtype=np.float64))


@dataclass(frozen=True)
class UnitDualQuaternion:
    """Dual quaternion (real + ε dual), (..., 4) each; |real|=1, real·dual=0."""

    real: np.ndarray
    dual: np.ndarray

    def is_valid(self, tol: float = 1e-9) -> bool:
        n = np.abs(np.linalg.norm(self.real, axis=-1) - 1.0).max()
        o = np.abs(np.sum(self.real * self.dual, axis=-1)).max()
        return bool(n <= tol and o <= tol)

    @staticmethod
    def identity(batch: tuple = ()) -> "UnitDualQuaternion":
        real = np.zeros(batch + (4,))
        real[..., 0] = 1.0
        return UnitDualQuaternion(real, np.zeros(batch + (4,)))


# ---------------------------------------------------------------------------
# dual-quaternion <-> SE(3)


def dq_from_se3(T: SE3) -> UnitDualQuaternion:
    """Encode a rigid transform as a unit dual quaternion."""
    real = rotmat_to_quat(T.rot.m)
    t = np.asarray(T.trans, dtype=np.float64)
    pure = np.concatenate([np.zeros(t.shape[:-1] + (1,)), t], axis=-1)
    dual = 0.5 * quat_mul(pure, real)
    return UnitDualQuaternion(real, dual)


def dq_normalize(real: np.ndarray, dual: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full dual-number normalization: unit real part and real ⟂ dual."""
    n = np.linalg.norm(real, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise DegenerateQuaternion("dual quaternion real part has near-zero norm")
    r = real / n
    d = dual / n
    d = d - np.sum(r * d, axis=-1, keepdims=True) * r
    return r, d


def se3_from_dq(q: UnitDualQuaternion) -> SE3:
    """Decode a dual quaternion to SE(3); renormalizes defensively."""
    real, dual = dq_normalize(np.asarray(q.real, dtype=np.float64), np.asarray(q.dual, dtype=np.float64))
    rot = quat_to_rotmat(real)
    t = 2.0 * quat_mul(dual, quat_conj(real))[..., 1:]
    return SE3(Rotation3(rot), t)


def dq_mul(a: UnitDualQuaternion, b: UnitDualQuaternion) -> UnitDualQuaternion:
    real = quat_mul(a.real, b.real)
    dual = quat_mul(a.real, b.dual) + quat_mul(a.dual, b.real)
    return UnitDualQuaternion(real, dual)


def dq_conj(q: UnitDualQuaternion) -> UnitDualQuaternion:
    """Quaternion-conjugate both parts; inverse for unit dual quaternions."""
    return UnitDualQuaternion(quat_conj(q.real), quat_conj(q.dual))


def dqb_blend(w: np.ndarray, qs: UnitDualQuaternion) -> SE3:
    """Dual-quaternion blend skinning.

    ``w`` is (..., B) on the simplex; ``qs.real``/``qs.dual`` are (..., B, 4).
    Each input is sign-flipped so its real part has nonnegative dot with the
    largest-weight pivot before the weighted sum, then the blend is
    dual-normalized and converted to SE(3).
    """
    w = np.asarray(w, dtype=np.float64)
    real = np.asarray(qs.real, dtype=np.float64)
    dual = np.asarray(qs.dual, dtype=np.float64)

    pivot = np.argmax(w, axis=-1)
    pivot_real = np.take_along_axis(real, pivot[..., None, None], axis=-2)
    sign = np.where(np.sum(real * pivot_real, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)

    br = np.sum(w[..., None] * sign * real, axis=-2)
    bd = np.sum(w[..., None] * sign * dual, axis=-2)

    n = np.linalg.norm(br, axis=-1)
    if np.any(n < 1e-9):
        raise ZeroBlend("blended dual quaternion real part has norm < 1e-9")
    return se3_from_dq(UnitDualQuaternion(br, bd))


def rotation_angle_deg(G: SE3) -> np.ndarray:
    """Rotation angle of the SE(3) rotation block, degrees in [0, 180]."""
    tr = np.einsum("...ii->...", G.rot.m)
    c = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    return np.degrees(np.arccos(c))


# ---------------------------------------------------------------------------
# randomized constructors (tests, fuzzing, synthetic scenes)


def random_rotation(rng: np.random.Generator, batch: tuple = ()) -> Rotation3:
    """Uniform random rotation via normalized Gaussian quaternions."""
    q = rng.standard_normal(batch + (4,))
    return Rotation3.from_quat(quat_normalize(q))


def random_se3(rng: np.random.Generator, batch: tuple = (), trans_scale: float = 1.0) -> SE3:
    rot = random_rotation(rng, batch)
    t = rng.standard_normal(batch + (3,)) * trans_scale
    return SE3(rot, t)
