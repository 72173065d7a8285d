"""Differentiable rigid-motion algebra on the tape.

Mirrors ``geom`` for batched Tensors: quaternion products, the screw
exponential from 6-vector twists to unit dual quaternions, dual-quaternion
blending, and SE(3) application. The scalar trigonometric ratios are entire
functions of s = theta^2, so everything is smooth at the zero twist (the
zero-initialized starting point of every field).
"""

from __future__ import annotations

import numpy as np

from .errors import ZeroBlend
from . import tape
from .tape import Tensor, as_tensor, concat, custom_unary, sqrt, stack


# ---------------------------------------------------------------------------
# analytic series: all functions of s = theta^2 (entire, safe at s = 0)

_S_SMALL = 1e-4


def _series(s, coeffs):
    out = np.zeros_like(s)
    for c in reversed(coeffs):
        out = out * s + c
    return out


def _cos_half(s):
    # cos(sqrt(s)/2)
    small = s < _S_SMALL
    ss = np.sqrt(np.where(small, 1.0, s))
    return np.where(small, _series(s, [1.0, -1.0 / 8, 1.0 / 384, -1.0 / 46080]), np.cos(ss / 2.0))


def _sinc_half(s):
    # sin(sqrt(s)/2)/sqrt(s)
    small = s < _S_SMALL
    ss = np.sqrt(np.where(small, 1.0, s))
    return np.where(small, _series(s, [0.5, -1.0 / 48, 1.0 / 3840, -1.0 / 645120]),
                    np.sin(ss / 2.0) / ss)


def _d_cos_half(s):
    return -0.25 * _sinc_half(s)


def _d_sinc_half(s):
    small = s < _S_SMALL
    safe = np.where(small, 1.0, s)
    return np.where(small, _series(s, [-1.0 / 48, 1.0 / 1920, -1.0 / 215040]),
                    (_cos_half(s) / 4.0 - _sinc_half(s) / 2.0) / safe)


def _b_fn(s):
    # (1 - cos(theta)) / theta^2
    small = s < _S_SMALL
    ss = np.sqrt(np.where(small, 1.0, s))
    return np.where(small, _series(s, [0.5, -1.0 / 24, 1.0 / 720, -1.0 / 40320]),
                    (1.0 - np.cos(ss)) / np.where(small, 1.0, s))


def _d_b_fn(s):
    small = s < _S_SMALL
    safe = np.where(small, 1.0, s)
    ss = np.sqrt(safe)
    sinc_full = np.sin(ss) / ss
    return np.where(small, _series(s, [-1.0 / 24, 1.0 / 360, -1.0 / 13440]),
                    (sinc_full / 2.0 - _b_fn(s)) / safe)


def _c_fn(s):
    # (theta - sin(theta)) / theta^3
    small = s < _S_SMALL
    safe = np.where(small, 1.0, s)
    ss = np.sqrt(safe)
    return np.where(small, _series(s, [1.0 / 6, -1.0 / 120, 1.0 / 5040, -1.0 / 362880]),
                    (ss - np.sin(ss)) / (safe * ss))


def _d_c_fn(s):
    small = s < _S_SMALL
    safe = np.where(small, 1.0, s)
    return np.where(small, _series(s, [-1.0 / 120, 1.0 / 2520, -1.0 / 120960]),
                    (_b_fn(s) - 3.0 * _c_fn(s)) / (2.0 * safe))


# ---------------------------------------------------------------------------
# quaternion / dual-quaternion ops on tensors


def quat_mul(a: Tensor, b: Tensor) -> Tensor:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return stack(
        [aw * bw - ax * bx - ay * by - az * bz,
         aw * bx + ax * bw + ay * bz - az * by,
         aw * by - ax * bz + ay * bw + az * bx,
         aw * bz + ax * by - ay * bx + az * bw],
        axis=-1,
    )


_CONJ = np.array([1.0, -1.0, -1.0, -1.0])


def quat_conj(q: Tensor) -> Tensor:
    return q * _CONJ


def cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def quat_to_rotmat(q: Tensor) -> Tensor:
    """(..., 4) unit quaternion -> (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    two = 2.0
    r0 = stack([1.0 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)], axis=-1)
    r1 = stack([two * (x * y + w * z), 1.0 - two * (x * x + z * z), two * (y * z - w * x)], axis=-1)
    r2 = stack([two * (x * z - w * y), two * (y * z + w * x), 1.0 - two * (x * x + y * y)], axis=-1)
    return stack([r0, r1, r2], axis=-2)


def quat_normalize(q: Tensor) -> Tensor:
    n = sqrt((q * q).sum(axis=-1, keepdims=True))
    return q / n


def twist_to_dq(twist: Tensor) -> tuple[Tensor, Tensor]:
    """Screw exponential: (..., 6) [rotation | translation] -> unit dq."""
    w = twist[..., 0:3]
    v = twist[..., 3:6]
    s = (w * w).sum(axis=-1, keepdims=True)
    ca = custom_unary(s, _cos_half, _d_cos_half)
    sa = custom_unary(s, _sinc_half, _d_sinc_half)
    real = concat([ca, sa * w], axis=-1)
    b = custom_unary(s, _b_fn, _d_b_fn)
    c = custom_unary(s, _c_fn, _d_c_fn)
    t = v + b * cross(w, v) + c * cross(w, cross(w, v))
    zeros = Tensor(np.zeros(t.data.shape[:-1] + (1,)))
    t_pure = concat([zeros, t], axis=-1)
    dual = 0.5 * quat_mul(t_pure, real)
    return real, dual


def dq_to_rt(real: Tensor, dual: Tensor) -> tuple[Tensor, Tensor]:
    """Unit dual quaternion -> (rotation matrix, translation)."""
    R = quat_to_rotmat(real)
    t = (2.0 * quat_mul(dual, quat_conj(real)))[..., 1:4]
    return R, t


def dq_normalize(real: Tensor, dual: Tensor) -> tuple[Tensor, Tensor]:
    n2 = (real * real).sum(axis=-1, keepdims=True)
    if np.any(n2.data < 1e-18):
        raise ZeroBlend("blended dual quaternion real part has norm < 1e-9")
    n = sqrt(n2)
    r = real / n
    d = dual / n
    d = d - (r * d).sum(axis=-1, keepdims=True) * r
    return r, d


def dq_blend(w: Tensor, real: Tensor, dual: Tensor) -> tuple[Tensor, Tensor]:
    """DQB: weights (..., B), parts (..., B, 4) -> normalized unit dq.

    Sign consistency: inputs are flipped toward the largest-weight pivot
    (a data-dependent, locally constant choice).
    """
    pivot = np.argmax(w.data, axis=-1)
    pr = np.take_along_axis(real.data, pivot[..., None, None], axis=-2)
    sign = np.where(np.sum(real.data * pr, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    wb = w.reshape(w.shape + (1,)) * sign
    br = (wb * real).sum(axis=-2)
    bd = (wb * dual).sum(axis=-2)
    return dq_normalize(br, bd)


# ---------------------------------------------------------------------------
# SE(3) on tensors


def se3_apply(R: Tensor, t: Tensor, x: Tensor) -> Tensor:
    """R (..., 3, 3), t (..., 3), x (..., 3) -> R x + t (broadcasting)."""
    y = R @ x.reshape(x.shape + (1,))
    return y.reshape(y.shape[:-1]) + t


def se3_inverse(R: Tensor, t: Tensor) -> tuple[Tensor, Tensor]:
    Rt = R.swapaxes(-1, -2)
    ti = Rt @ t.reshape(t.shape + (1,))
    return Rt, -ti.reshape(ti.shape[:-1])


def se3_compose(Ra: Tensor, ta: Tensor, Rb: Tensor, tb: Tensor) -> tuple[Tensor, Tensor]:
    """(Ra, ta) after (Rb, tb): apply b first."""
    R = Ra @ Rb
    t = se3_apply(Ra, ta, tb)
    return R, t


def positional_encoding(x: Tensor, n_freq: int) -> Tensor:
    """[x, sin(2^i x), cos(2^i x)] for i < n_freq along the last axis."""
    parts = [x]
    for i in range(n_freq):
        parts.append(tape.sin(x * float(2 ** i)))
        parts.append(tape.cos(x * float(2 ** i)))
    return concat(parts, axis=-1)


def pe_dim(d: int, n_freq: int) -> int:
    return d * (1 + 2 * n_freq)
