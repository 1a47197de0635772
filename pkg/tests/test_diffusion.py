import numpy as np
import pytest
from scipy import stats

from morphgen.diffusion import (
    DdpmConfig,
    DdpmModel,
    DualUNet,
    NoiseSchedule,
    StepRangeError,
    bridge_conditional,
    build_schedule,
    p_sample_step,
    q_sample,
    sample_unconditional,
    synthesize_signal_channel,
    train_ddpm,
    traverse_trajectory,
)
from morphgen.diffusion.ddpm import sample_timesteps
from morphgen.errors import ShapeError
from morphgen.volume import CellVolume
from morphgen.vqgan import VQGAN, VqganConfig


def cumulative_product_oracle(T, b0, b1):
    ab = 1.0
    for i in range(T):
        ab *= 1.0 - (b0 + (b1 - b0) * i / (T - 1))
    return ab


def test_alpha_bar_T_oracle():
    s = build_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar[-1] == pytest.approx(cumulative_product_oracle(1000, 1e-4, 0.02), rel=1e-10)
    assert s.alpha_bar[-1] == pytest.approx(4.0e-5, rel=0.02)
    assert s.alpha_bar[0] == 1.0 - s.beta[0]


def test_schedule_rejects_bad_range():
    with pytest.raises(ValueError):
        build_schedule(100, 0.02, 1e-4)
    with pytest.raises(StepRangeError):
        build_schedule(10).at("beta", 11)
    with pytest.raises(StepRangeError):
        build_schedule(10).at("beta", 0)


def test_q_sample_limits():
    rng = np.random.default_rng(0)
    z0, noise = rng.standard_normal((2, 3, 4))
    one = NoiseSchedule(2, np.zeros(2), np.ones(2), np.ones(2))
    assert np.array_equal(q_sample(z0, 1, noise, one), z0)
    s = build_schedule(100, 1e-3, 0.2)
    assert np.array_equal(q_sample(np.zeros(12), 40, noise.ravel(), s), np.sqrt(1 - s.alpha_bar[39]) * noise.ravel())
    with pytest.raises(ShapeError):
        q_sample(z0, 3, noise[:1], s)


def test_q_sample_marginal_monte_carlo():
    s = build_schedule(100, 1e-3, 0.2)
    t = 50
    n = 10_000
    z0 = np.array([1.5, -0.5, 0.0])
    draws = q_sample(np.broadcast_to(z0, (n, 3)), t, np.random.default_rng(0).standard_normal((n, 3)), s)
    ab = s.alpha_bar[t - 1]
    mean_se = np.sqrt((1 - ab) / n)
    var_se = (1 - ab) * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(draws.mean(0) - np.sqrt(ab) * z0) < 3 * mean_se)
    assert np.all(np.abs(draws.var(0, ddof=1) - (1 - ab)) < 3 * var_se)


def test_p_sample_zero_eps_posterior_mean():
    s = build_schedule(10, 1e-3, 0.2)
    z = np.random.default_rng(1).standard_normal((2, 3)).astype(np.float32)
    zero = lambda x, t, c: np.zeros_like(x)
    out = p_sample_step(z, 1, zero, s)
    np.testing.assert_allclose(out, z / np.sqrt(s.alpha[0]), rtol=1e-6)
    assert np.array_equal(out, p_sample_step(z, 1, zero, s, rng=np.random.default_rng(9)))
    t = 6
    noise = np.random.default_rng(3).standard_normal(z.shape).astype(np.float32)
    got = p_sample_step(z, t, zero, s, rng=np.random.default_rng(3))
    np.testing.assert_allclose(got, z / np.sqrt(s.alpha[t - 1]) + np.sqrt(s.beta[t - 1]) * noise, rtol=1e-5, atol=1e-6)


def test_p_sample_chain_is_reproducible():
    s = build_schedule(10, 1e-3, 0.2)
    model = lambda x, t, c: 0.1 * x
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((2, 5)).astype(np.float32)
        for t in range(10, 0, -1):
            z = p_sample_step(z, t, model, s, rng=rng)
        runs.append(z)
    assert runs[0].tobytes() == runs[1].tobytes()


def test_training_steps_are_uniform():
    t = sample_timesteps(np.random.default_rng(0), 100, 10_000)
    counts = np.bincount(t, minlength=101)[1:]
    assert counts.sum() == 10_000
    assert stats.chisquare(counts).pvalue > 0.01


def test_ema_after_one_step():
    z = np.random.default_rng(0).standard_normal((3, 4, 4, 4, 4)).astype(np.float32)
    cfg = DdpmConfig(T=10, base=4, steps=1, seed=5)
    init = [p.data.copy() for p in DualUNet(4, 4, 4, seed=5).parameters()]
    model = train_ddpm(z, cfg, progress_every=0)
    for old, new, shadow in zip(init, model.net.parameters(), model.ema.shadow):
        np.testing.assert_allclose(shadow, 0.995 * old + 0.005 * new.data, rtol=1e-6, atol=1e-9)


def test_training_is_deterministic_and_records_scale():
    z = np.random.default_rng(0).standard_normal((3, 4, 4, 4, 4)).astype(np.float32) * 3
    cfg = DdpmConfig(T=10, base=4, steps=3, seed=5)
    a = train_ddpm(z, cfg, progress_every=0)
    b = train_ddpm(z, cfg, progress_every=0)
    assert a.train_log == b.train_log
    assert a.config.latent_scale == pytest.approx(1.0 / z.astype(np.float64).std())


def test_checkpoint_round_trip(tmp_path, tiny_models):
    _, a, _, _ = tiny_models
    a.save(str(tmp_path / "d"))
    back = DdpmModel.load(str(tmp_path / "d"))
    back.save(str(tmp_path / "e"))
    for ext in (".mfwt", ".mfos", ".cfg"):
        assert (tmp_path / f"d{ext}").read_bytes() == (tmp_path / f"e{ext}").read_bytes()


def test_sampling_shapes_and_empty(tiny_models):
    vq, a, _, _ = tiny_models
    assert sample_unconditional(a, vq, 0).shape == (0, 2, 16, 16, 16)
    out = sample_unconditional(a, vq, 3, seed=1, batch=2)
    assert out.shape == (3, 2, 16, 16, 16)
    again = sample_unconditional(a, vq, 3, seed=1, batch=3)
    assert out.tobytes() == again.tobytes()


def test_geometry_mismatch_rejected(tiny_models):
    _, a, _, _ = tiny_models
    other = VQGAN(VqganConfig(cube=32, n_z=4, codebook_size=8, widths=(4, 4, 4), disc_widths=(4, 4, 4)))
    with pytest.raises(Exception, match="latent shape"):
        sample_unconditional(a, other, 1)


def test_full_depth_bridge_equals_unconditional(tiny_models):
    vq, a, b, x = tiny_models
    bridged = bridge_conditional(x[:2], a, b, vq, t_bridge=b.config.T, seed=7)
    uncond = sample_unconditional(b, vq, 2, seed=7)
    assert bridged.tobytes() == uncond.tobytes()


def test_shallow_bridge_is_near_reconstruction(tiny_models):
    vq, a, b, x = tiny_models
    bridged = bridge_conditional(x[:2], a, b, vq, t_bridge=1, seed=7)
    recon = vq.reconstruct(x[:2])
    deep = bridge_conditional(x[:2], a, b, vq, t_bridge=b.config.T, seed=7)
    assert np.mean((bridged - recon) ** 2) < np.mean((deep - recon) ** 2)
    with pytest.raises(StepRangeError):
        bridge_conditional(x[:1], a, b, vq, t_bridge=0)


def test_trajectory_counts_and_endpoint(tiny_models):
    vq, a, b, x = tiny_models
    entries = traverse_trajectory(CellVolume(x[0]), a, b, vq, t_bridge=4, stride=4, seed=3)
    assert [e.t for e in entries] == [4, 0]
    bridged = bridge_conditional(CellVolume(x[0]), a, b, vq, t_bridge=4, seed=3)
    assert entries[-1].volume.data.tobytes() == bridged.data.tobytes()
    entries = traverse_trajectory(CellVolume(x[0]), a, b, vq, t_bridge=4, stride=2, seed=3)
    assert [e.t for e in entries] == [4, 2, 0]
    assert len(entries[0].descriptors) == 2
    with pytest.raises(ValueError):
        traverse_trajectory(CellVolume(x[0]), a, b, vq, t_bridge=4, stride=3)


def test_signal_synthesis_shapes_and_stochasticity(tiny_models):
    vq, _, _, x = tiny_models
    sig_vq = VQGAN(VqganConfig(cube=16, channels=1, n_z=4, codebook_size=16, widths=(4, 4, 8), disc_widths=(4, 4, 4)))
    sig = np.random.default_rng(2).uniform(-1, 1, (3, 1, 16, 16, 16)).astype(np.float32)
    zs = sig_vq.encode_batch(sig).data
    zc = vq.encode_batch(x[:3]).data
    model = train_ddpm(zs, DdpmConfig(T=5, base=4, steps=2), cond=zc, progress_every=0)
    one = synthesize_signal_channel(CellVolume(x[0]), model, vq, sig_vq, seed=1)
    two = synthesize_signal_channel(CellVolume(x[0]), model, vq, sig_vq, seed=2)
    assert one.data.shape == (1, 16, 16, 16)
    assert np.mean((one.data - two.data) ** 2) > 0
    with pytest.raises(ShapeError):
        model.net(np.zeros((1,) + model.latent_shape), 3)
