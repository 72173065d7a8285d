"""Masked-denoising video guidance.

A monotone time-step schedule, a flow-trajectory family (rectified flow /
EDM / variance preserving), an abstract velocity-model interface with toy
instances, and the mixed denoising loop that keeps high-confidence (masked)
regions pinned to noised renders while denoising the rest.

All times are normalized to [0, 1]; tau = 0 is clean, tau = 1 is pure noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm as _norm

from .errors import InvalidTau, ShapeMismatch


# ---------------------------------------------------------------------------
# schedule


@dataclass
class Schedule:
    """Strictly increasing times 0 = tau_0 < ... < tau_S = 1."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        assert t.ndim == 1 and t.size >= 2, "need at least two schedule points"
        assert t[0] == 0.0 and t[-1] == 1.0, "schedule endpoints must be exactly 0 and 1"
        assert np.all(np.diff(t) > 0.0), "schedule must be strictly increasing"
        self.times = t

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @staticmethod
    def uniform(n_steps: int) -> "Schedule":
        return Schedule(np.linspace(0.0, 1.0, n_steps + 1))


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Noising interpolant family.

    kind: "rf" (rectified flow), "edm" (lognormal sigma via the normal
    quantile of tau), or "vp" (variance preserving with a^2 + b^2 = 1).
    """

    kind: str = "rf"
    p_mean: float = -1.2          # EDM P_m
    p_std: float = 1.2            # EDM P_s (> 0)

    def __post_init__(self):
        assert self.kind in ("rf", "edm", "vp")
        if self.kind == "edm":
            assert self.p_std > 0.0

    def vp_ab(self, tau: float) -> tuple[float, float]:
        """Cosine VP schedule; a^2 + b^2 = 1 by construction."""
        a = float(np.cos(0.5 * np.pi * tau))
        b = float(np.sin(0.5 * np.pi * tau))
        return a, b


def noise_guidance(latent: np.ndarray, tau: float, traj: Trajectory,
                   eps: np.ndarray) -> np.ndarray:
    """Transform a clean guidance latent toward noise at time tau."""
    if not (0.0 <= tau <= 1.0):
        raise InvalidTau(f"tau {tau} outside [0, 1]")
    latent = np.asarray(latent, dtype=np.float64)
    if eps.shape != latent.shape:
        raise ShapeMismatch(f"noise shape {eps.shape} != latent {latent.shape}")
    if traj.kind == "rf":
        return (1.0 - tau) * latent + tau * eps
    if traj.kind == "edm":
        tq = float(np.clip(tau, 1e-4, 1.0 - 1e-4))
        sigma = np.exp(_norm.ppf(tq, loc=traj.p_mean, scale=traj.p_std))
        return latent + sigma * eps
    a, b = traj.vp_ab(tau)
    assert abs(a * a + b * b - 1.0) < 1e-9
    return a * latent + b * eps


# ---------------------------------------------------------------------------
# velocity models (toy instances; real video models are out of scope)


class VelocityModel:
    """Callable (latent, tau) -> velocity of the same shape, deterministic."""

    def __call__(self, z: np.ndarray, tau: float) -> np.ndarray:
        raise NotImplementedError


class ZeroVelocity(VelocityModel):
    def __call__(self, z, tau):
        return np.zeros_like(z)


class ConstantVelocity(VelocityModel):
    def __init__(self, v: np.ndarray | float):
        self.v = v

    def __call__(self, z, tau):
        return np.broadcast_to(np.asarray(self.v, dtype=np.float64), z.shape).copy()


class LinearToTarget(VelocityModel):
    """v(z, tau) = target - z: exponential approach to a fixed target under
    Euler integration (exact solution target + (z0 - target) e^{-1} over a
    unit time budget)."""

    def __init__(self, target: np.ndarray):
        self.target = np.asarray(target, dtype=np.float64)

    def __call__(self, z, tau):
        return self.target - z


def denoise_step(z: np.ndarray, tau_t: float, tau_prev: float,
                 model: VelocityModel) -> np.ndarray:
    """One Euler update toward the data: z + v(z, tau_t) (tau_t - tau_prev)."""
    assert tau_prev < tau_t, "steps must move toward tau = 0"
    return z + model(z, tau_t) * (tau_t - tau_prev)


def mixed_step(z_tilde: np.ndarray, y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(1 - M) * denoised + M * transformed-guidance, elementwise."""
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z_tilde.shape != y.shape:
        raise ShapeMismatch(f"denoised {z_tilde.shape} vs guidance {y.shape}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != z_tilde.shape:
        if m.shape == z_tilde.shape[:-1]:
            m = m[..., None]
        else:
            raise ShapeMismatch(f"mask {mask.shape} vs latent {z_tilde.shape}")
    return (1.0 - m) * z_tilde + m * y


# ---------------------------------------------------------------------------
# encoder / decoder


class IdentityCodec:
    """Latent space equals pixel space."""

    def encode(self, video: np.ndarray) -> np.ndarray:
        return np.asarray(video, dtype=np.float64).copy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.asarray(latent, dtype=np.float64).copy()

    def downsample_mask(self, mask: np.ndarray, conservative: bool = True) -> np.ndarray:
        return np.asarray(mask, dtype=np.float64).copy()


class PoolCodec:
    """2x spatial average-pool encoder with nearest-neighbor decoder.

    Temporal length is preserved. The conservative mask rule marks a latent
    cell only when every covered pixel is masked.
    """

    def encode(self, video: np.ndarray) -> np.ndarray:
        v = np.asarray(video, dtype=np.float64)
        F, H, W, C = v.shape
        assert H % 2 == 0 and W % 2 == 0, "PoolCodec needs even spatial dims"
        return v.reshape(F, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.repeat(np.repeat(latent, 2, axis=1), 2, axis=2)

    def downsample_mask(self, mask: np.ndarray, conservative: bool = True) -> np.ndarray:
        m = np.asarray(mask, dtype=np.float64)
        F, H, W = m.shape
        blocks = m.reshape(F, H // 2, 2, W // 2, 2)
        if conservative:
            return blocks.min(axis=(2, 4))
        # nearest neighbor: top-left pixel of each cell
        return blocks[:, :, 0, :, 0]


# ---------------------------------------------------------------------------
# full guidance loop


def generate(seed: int, schedule: Schedule, renders: np.ndarray, mask: np.ndarray,
             traj: Trajectory, model: VelocityModel, codec=None,
             resample_eps: bool = False) -> np.ndarray:
    """Masked-guidance generation.

    renders: (F, H, W, C) per-frame guidance renders for the target camera;
    mask:    (F, H, W) confidence mask (1 = trust the render).
    Walks the schedule from tau = 1 to 0; each step denoises the unmasked
    region with the velocity model and re-pins the masked region to freshly
    noised guidance at the new time (one fixed noise draw per run unless
    ``resample_eps``). Returns the decoded video.
    """
    codec = codec or IdentityCodec()
    rng = np.random.default_rng(seed)
    clean = codec.encode(renders)
    m_lat = codec.downsample_mask(mask)
    if m_lat.shape != clean.shape[:-1]:
        raise ShapeMismatch(f"mask {m_lat.shape} vs latent {clean.shape}")
    eps = rng.standard_normal(clean.shape)
    z = rng.standard_normal(clean.shape)          # z at tau_S = 1
    times = schedule.times
    for t in range(schedule.n_steps, 0, -1):
        tau_t, tau_prev = float(times[t]), float(times[t - 1])
        z = denoise_step(z, tau_t, tau_prev, model)
        if resample_eps:
            eps = rng.standard_normal(clean.shape)
        y = noise_guidance(clean, tau_prev, traj, eps)
        z = mixed_step(z, y, m_lat)
    return codec.decode(z)
