import numpy as np
import pytest
from scipy.stats import norm

from dynsurf.errors import InvalidTau, ShapeMismatch
from dynsurf.guide import (ConstantVelocity, IdentityCodec, LinearToTarget,
                           PoolCodec, Schedule, Trajectory, ZeroVelocity,
                           denoise_step, generate, mixed_step, noise_guidance)


def test_schedule_validation():
    s = Schedule.uniform(10)
    assert s.n_steps == 10
    assert s.times[0] == 0.0 and s.times[-1] == 1.0
    assert np.isclose(np.diff(s.times).sum(), 1.0)
    with pytest.raises(AssertionError):
        Schedule(np.array([0.0, 0.5, 0.4, 1.0]))
    with pytest.raises(AssertionError):
        Schedule(np.array([0.1, 0.5, 1.0]))


def test_noise_guidance_rf_endpoints():
    rng = np.random.default_rng(0)
    latent = rng.uniform(0, 1, size=(2, 8, 8, 3))
    eps = rng.standard_normal(latent.shape)
    traj = Trajectory("rf")
    assert np.array_equal(noise_guidance(latent, 0.0, traj, eps), latent)
    assert np.array_equal(noise_guidance(latent, 1.0, traj, eps), eps)


def test_noise_guidance_edm_midpoint():
    rng = np.random.default_rng(1)
    latent = rng.uniform(0, 1, size=(1, 4, 4, 2))
    eps = rng.standard_normal(latent.shape)
    pm, ps = -1.1, 1.3
    traj = Trajectory("edm", p_mean=pm, p_std=ps)
    out = noise_guidance(latent, 0.5, traj, eps)
    # the 0.5 quantile of N(pm, ps^2) is pm, so sigma = exp(pm)
    expect = latent + np.exp(pm) * eps
    assert np.abs(out - expect).max() <= 1e-12
    # off-midpoint agrees with the quantile function
    out2 = noise_guidance(latent, 0.73, traj, eps)
    sig = np.exp(norm.ppf(0.73, loc=pm, scale=ps))
    assert np.abs(out2 - (latent + sig * eps)).max() <= 1e-12


def test_noise_guidance_vp_normalized():
    rng = np.random.default_rng(2)
    latent = rng.uniform(0, 1, size=(1, 4, 4, 1))
    eps = rng.standard_normal(latent.shape)
    traj = Trajectory("vp")
    for tau in np.linspace(0, 1, 13):
        a, b = traj.vp_ab(tau)
        assert abs(a * a + b * b - 1.0) <= 1e-9
        out = noise_guidance(latent, float(tau), traj, eps)
        assert np.abs(out - (a * latent + b * eps)).max() <= 1e-12


def test_noise_guidance_invalid_tau():
    with pytest.raises(InvalidTau):
        noise_guidance(np.zeros((1, 2, 2, 1)), 1.5, Trajectory("rf"),
                       np.zeros((1, 2, 2, 1)))


def test_denoise_step_toys():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((2, 4, 4, 3))
    assert np.array_equal(denoise_step(z, 0.5, 0.4, ZeroVelocity()), z)
    out = denoise_step(z, 0.5, 0.4, ConstantVelocity(2.0))
    assert np.abs(out - (z + 2.0 * 0.1)).max() <= 1e-12


def test_denoise_linear_to_target_euler_order():
    """Euler integration error decays like O(1/S): ratio ~ 10 between S=10
    and S=100."""
    rng = np.random.default_rng(4)
    target = rng.uniform(0, 1, size=(1, 6, 6, 3))
    z1 = rng.standard_normal(target.shape)
    model = LinearToTarget(target)
    # analytic solution of dz/ds = target - z over unit time: exponential decay
    exact = target + (z1 - target) * np.exp(-1.0)
    errs = {}
    for S in (10, 100):
        times = np.linspace(0, 1, S + 1)
        z = z1.copy()
        for t in range(S, 0, -1):
            z = denoise_step(z, float(times[t]), float(times[t - 1]), model)
        errs[S] = np.abs(z - exact).max()
    ratio = errs[10] / errs[100]
    assert 8.0 <= ratio <= 12.0


def test_mixed_step_cases():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((2, 4, 4, 3))
    y = rng.standard_normal((2, 4, 4, 3))
    ones = np.ones((2, 4, 4))
    zeros = np.zeros((2, 4, 4))
    assert np.array_equal(mixed_step(z, y, ones), y)
    assert np.array_equal(mixed_step(z, y, zeros), z)
    # checkerboard equals a scalar-loop selection oracle, exactly
    mask = np.indices((2, 4, 4)).sum(axis=0) % 2
    got = mixed_step(z, y, mask)
    expect = np.empty_like(z)
    for f in range(2):
        for i in range(4):
            for j in range(4):
                expect[f, i, j] = y[f, i, j] if mask[f, i, j] else z[f, i, j]
    assert np.array_equal(got, expect)
    with pytest.raises(ShapeMismatch):
        mixed_step(z, y[:, :2], ones)


def test_generate_mask_all_ones_rf_exact():
    rng = np.random.default_rng(6)
    renders = rng.uniform(0, 1, size=(3, 8, 8, 3))
    mask = np.ones((3, 8, 8))
    out = generate(0, Schedule.uniform(7), renders, mask, Trajectory("rf"),
                   ZeroVelocity())
    # final masked latents are (1 - tau0) Enc(r) + tau0 eps = Enc(r) exactly
    assert np.array_equal(out, renders)


def test_generate_mask_zeros_deterministic_noise():
    rng = np.random.default_rng(7)
    renders = rng.uniform(0, 1, size=(2, 8, 8, 3))
    mask = np.zeros((2, 8, 8))
    a = generate(11, Schedule.uniform(5), renders, mask, Trajectory("rf"), ZeroVelocity())
    b = generate(11, Schedule.uniform(5), renders, mask, Trajectory("rf"), ZeroVelocity())
    assert np.array_equal(a, b)
    c = generate(12, Schedule.uniform(5), renders, mask, Trajectory("rf"), ZeroVelocity())
    assert not np.array_equal(a, c)


def test_generate_half_mask_linear_model():
    rng = np.random.default_rng(8)
    renders = rng.uniform(0, 1, size=(2, 8, 8, 3))
    mask = np.zeros((2, 8, 8))
    mask[:, :, :4] = 1.0
    target = rng.uniform(0, 1, size=renders.shape)
    S = 200
    out = generate(3, Schedule.uniform(S), renders, mask, Trajectory("rf"),
                   LinearToTarget(target))
    # masked half equals the guidance exactly (RF at tau0 = 0)
    assert np.array_equal(out[:, :, :4], renders[:, :, :4])
    # unmasked half approaches the model's fixed point within O(1/S); the
    # exact endpoint depends on the noisy start, bounded by exp(-1) decay
    resid = np.abs(out[:, :, 4:] - target[:, :, 4:]).max()
    assert resid <= np.exp(-1.0) * 6.0  # |z1 - target| bounded by noise range


def test_generate_vp_and_edm_run():
    rng = np.random.default_rng(9)
    renders = rng.uniform(0, 1, size=(2, 6, 6, 3))
    mask = np.ones((2, 6, 6))
    for kind in ("vp", "edm"):
        out = generate(0, Schedule.uniform(6), renders, mask, Trajectory(kind),
                       ZeroVelocity())
        assert out.shape == renders.shape
        assert np.isfinite(out).all()
    # VP at tau0=0: a=1, b=0 -> masked region equals renders exactly
    out = generate(0, Schedule.uniform(6), renders, mask, Trajectory("vp"), ZeroVelocity())
    assert np.array_equal(out, renders)


def test_pool_codec_roundtrip_shapes_and_mask():
    rng = np.random.default_rng(10)
    video = rng.uniform(0, 1, size=(2, 8, 8, 3))
    codec = PoolCodec()
    lat = codec.encode(video)
    assert lat.shape == (2, 4, 4, 3)
    dec = codec.decode(lat)
    assert dec.shape == video.shape
    mask = np.zeros((2, 8, 8))
    mask[:, :2, :2] = 1.0
    mask[:, 2, 2] = 1.0
    down = codec.downsample_mask(mask, conservative=True)
    assert down.shape == (2, 4, 4)
    assert down[0, 0, 0] == 1.0      # fully covered cell stays masked
    assert down[0, 1, 1] == 0.0      # partially covered cell is dropped


def test_generate_with_pool_codec():
    rng = np.random.default_rng(11)
    renders = rng.uniform(0, 1, size=(2, 8, 8, 3))
    mask = np.ones((2, 8, 8))
    out = generate(0, Schedule.uniform(5), renders, mask, Trajectory("rf"),
                   ZeroVelocity(), codec=PoolCodec())
    # masked-everywhere RF reproduces Dec(Enc(r)) exactly
    expect = PoolCodec().decode(PoolCodec().encode(renders))
    assert np.array_equal(out, expect)


def test_generate_resample_eps_changes_path_not_endpoint():
    rng = np.random.default_rng(12)
    renders = rng.uniform(0, 1, size=(1, 4, 4, 3))
    mask = np.ones((1, 4, 4))
    a = generate(5, Schedule.uniform(9), renders, mask, Trajectory("rf"),
                 ZeroVelocity(), resample_eps=True)
    assert np.array_equal(a, renders)   # tau0 = 0 pins the masked region
