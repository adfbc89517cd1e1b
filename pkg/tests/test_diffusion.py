import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refkv import diffusion, identity, refcond
from refkv.diffusion import (Batch, GuidanceConfig, cfg_combine, ddim_step, ddim_timesteps, make_schedule,
                             predict_eps_from_z0, q_sample, sample, train_step)
from refkv.tensorcore import Rng, Tensor

SCHED = make_schedule(1000, 1e-4, 2e-2)


# ---------------------------------------------------------------- schedule


def test_alpha_bar_matches_direct_product():
    betas = np.linspace(1e-4, 2e-2, 1000)
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
    assert abs(SCHED.alpha_bar[1000] - prod) < 1e-9


def test_schedule_invariants():
    ab = SCHED.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert np.all((SCHED.beta[1:] > 0) & (SCHED.beta[1:] < 1))
    np.testing.assert_allclose(SCHED.sqrt_alpha_bar**2 + SCHED.one_minus_alpha_bar, 1.0, atol=1e-6)


def test_schedule_errors():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, 0.5, 0.1)


def test_guidance_config_validation():
    assert GuidanceConfig() == GuidanceConfig(1.5, 0.1)
    with pytest.raises(ValueError):
        GuidanceConfig(-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(1.0, 1.5)


# ---------------------------------------------------------------- forward process


def test_q_sample_zero_noise_and_t0():
    z0 = Rng(0).normal((2, 4, 8, 8))
    np.testing.assert_allclose(q_sample(z0, 10, np.zeros_like(z0), SCHED), np.sqrt(SCHED.alpha_bar[10]) * z0)
    with pytest.raises(ValueError):
        q_sample(z0, 0, z0, SCHED)
    with pytest.raises(ValueError):
        q_sample(z0, 1001, z0, SCHED)
    with pytest.raises(ValueError):
        q_sample(z0, 5, z0[:1], SCHED)


def test_q_sample_statistics():
    z0 = Rng(1).normal((1, 4, 8, 8)).astype(np.float64)
    n = 10_000
    for t in (250, 500, 1000):
        noise = Rng(2).child(t).normal((n, 4, 8, 8))
        zt = q_sample(np.broadcast_to(z0, (n, 4, 8, 8)), t, noise, SCHED)
        a, b = np.sqrt(SCHED.alpha_bar[t]), 1 - SCHED.alpha_bar[t]
        mean, var = zt.mean(0), zt.var(0)
        assert np.all(np.abs(mean - a * z0[0]) < 3 * np.sqrt(b) / np.sqrt(n) * 1.5)
        assert np.all(np.abs(var - b) / b < 0.05)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
def test_noise_round_trip(t, seed):
    g = Rng(seed)
    z0, noise = g.normal((2, 4, 3, 3)), g.child(1).normal((2, 4, 3, 3))
    zt = q_sample(z0, t, noise, SCHED)
    np.testing.assert_allclose(predict_eps_from_z0(zt, z0, t, SCHED), noise, atol=1e-5)


def test_predict_eps_trivial_and_errors():
    zt = Rng(3).normal((1, 4, 2, 2)).astype(np.float64)
    t = 300
    z0 = zt / np.sqrt(SCHED.alpha_bar[t])
    np.testing.assert_allclose(predict_eps_from_z0(zt, z0, t, SCHED), 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        predict_eps_from_z0(zt, z0, 0, SCHED)


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.integers(1, 1000), st.integers(0, 1000))
def test_predict_eps_is_affine_in_z0(a, t, seed):
    g = Rng(seed)
    zt, z1, z2 = (g.child(i).normal((3, 4)).astype(np.float64) for i in range(3))
    mix = predict_eps_from_z0(zt, a * z1 + (1 - a) * z2, t, SCHED)
    want = a * predict_eps_from_z0(zt, z1, t, SCHED) + (1 - a) * predict_eps_from_z0(zt, z2, t, SCHED)
    np.testing.assert_allclose(mix, want, atol=1e-6)


# ---------------------------------------------------------------- DDIM and guidance


def test_ddim_to_zero_returns_prediction():
    z, z0 = Rng(4).normal((1, 4, 2, 2)), Rng(5).normal((1, 4, 2, 2))
    np.testing.assert_allclose(ddim_step(z, z0, 100, 0, SCHED), z0, atol=1e-7)
    with pytest.raises(ValueError):
        ddim_step(z, z0, 10, 20, SCHED)


@pytest.mark.parametrize("steps", [1, 7, 50, 100])
def test_ddim_telescopes_with_perfect_denoiser(steps):
    z0 = Rng(6).normal((1, 4, 3, 3)).astype(np.float64)
    z = Rng(7).normal((1, 4, 3, 3)).astype(np.float64)
    for t, tp in ddim_timesteps(1000, steps):
        z = ddim_step(z, z0, t, tp, SCHED)
    np.testing.assert_allclose(z, z0, atol=1e-4)


def test_ddim_timesteps_bounds():
    pairs = ddim_timesteps(1000, 100)
    assert pairs[0][0] == 1000 and pairs[-1][1] == 0 and len(pairs) == 100
    with pytest.raises(ValueError):
        ddim_timesteps(64, 100)


def test_cfg_combine_values():
    u, c = np.zeros(3), np.full(3, 2.0)
    np.testing.assert_array_equal(cfg_combine(u, c, 1.0), c)
    np.testing.assert_array_equal(cfg_combine(u, c, 0.0), u)
    np.testing.assert_array_equal(cfg_combine(u, c, 1.5), np.full(3, 3.0))
    with pytest.raises(ValueError):
        cfg_combine(np.zeros(2), np.zeros(3), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.integers(0, 2**31 - 1))
def test_cfg_combine_affine_in_scale(s1, s2, seed):
    g = Rng(seed)
    u, c = g.normal((4, 4)), g.child(1).normal((4, 4))
    slope = c.astype(np.float64) - u
    np.testing.assert_allclose(cfg_combine(u, c, s2) - cfg_combine(u, c, s1), (s2 - s1) * slope, atol=1e-6)


class ConstantModel:
    """Stub denoiser that always predicts the same clean latent."""

    def __init__(self, c):
        self.c = c
        self.config = refcond.DESK_UNET
        self.mechanism = "channel-concat"
        self.counters = refcond.Counters()
        self._null_cache = {}

    def __call__(self, z_t, z_lq, t, cond):
        return Tensor(np.broadcast_to(self.c, z_t.shape).copy())


def test_sample_with_constant_model_returns_constant():
    c = Rng(8).normal((1, 4, 8, 8))
    out = sample(ConstantModel(c), np.zeros((1, 4, 8, 8), np.float32), None, 20, GuidanceConfig(1.5), Rng(0), SCHED)
    np.testing.assert_allclose(out, c, atol=1e-4)


def test_sample_rejects_too_many_steps():
    with pytest.raises(ValueError, match="exceeds"):
        sample(ConstantModel(np.zeros((1, 4, 8, 8))), np.zeros((1, 4, 8, 8), np.float32), None, 101,
               GuidanceConfig(), Rng(0), make_schedule(100))


def _model_and_inputs(mechanism="cachekv", seed=0, r=5):
    m = refcond.build_model(refcond.UNetConfig(mechanism=mechanism), seed)
    g = Rng(seed + 1)
    return m, g.normal((1, 4, 8, 8)), g.child(1).normal((1, r, 4, 8, 8)), g.child(2).normal((1, 4, 8, 8))


def test_sample_pass_count_law():
    m, lq, refs, zT = _model_and_inputs()
    m.counters.reset()
    sample(m, lq, refs, 100, GuidanceConfig(1.5), Rng(0), SCHED, z_T=zT)
    assert m.counters.unet_passes == 5 + 200
    assert m.counters.null_cache_passes == 1


def test_scale_one_matches_conditional_only():
    m, lq, refs, zT = _model_and_inputs()
    guided = sample(m, lq, refs, 20, GuidanceConfig(1.0), Rng(0), SCHED, z_T=zT)
    cond_only = sample(m, lq, refs, 20, None, Rng(0), SCHED, z_T=zT)
    np.testing.assert_allclose(guided, cond_only, atol=1e-5)


def test_sampling_is_deterministic():
    m, lq, refs, zT = _model_and_inputs("spatial-concat", r=2)
    a = sample(m, lq, refs, 10, GuidanceConfig(1.5), Rng(0), SCHED, z_T=zT)
    b = sample(m, lq, refs, 10, GuidanceConfig(1.5), Rng(0), SCHED, z_T=zT)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- training step


def _batch(n=2, seed=0):
    g = Rng(seed)
    return Batch(g.normal((n, 4, 8, 8)), g.child(1).normal((n, 4, 8, 8)), g.child(2).normal((n, 5, 4, 8, 8)))


def test_train_step_rejects_empty_batch():
    m = refcond.build_model(refcond.DESK_UNET, 0)
    empty = Batch(np.zeros((0, 4, 8, 8), np.float32), np.zeros((0, 4, 8, 8), np.float32),
                  np.zeros((0, 5, 4, 8, 8), np.float32))
    with pytest.raises(ValueError, match="empty"):
        train_step(m, empty, SCHED, identity.LossConfig(0.0), GuidanceConfig(), Rng(0))


def test_train_step_lambda_zero_is_ldm_only():
    m = refcond.build_model(refcond.DESK_UNET, 0)
    parts = train_step(m, _batch(), SCHED, identity.LossConfig(0.0), GuidanceConfig(), Rng(0))
    assert parts["time_id"] == 0.0 and parts["total"] == parts["ldm"]


class PerfectModel(ConstantModel):
    mechanism = "channel-concat"

    def __call__(self, z_t, z_lq, t, cond):
        return Tensor(self.c.copy())


def test_perfect_model_has_zero_ldm():
    b = _batch()
    m = PerfectModel(b.z0)
    m.config = refcond.DESK_UNET
    parts = train_step(m, b, SCHED, identity.LossConfig(0.0), GuidanceConfig(), Rng(0))
    assert parts["ldm"] == 0.0


def test_full_dropout_feeds_zero_references():
    m = refcond.build_model(refcond.DESK_UNET, 0)
    b = _batch(n=3)
    parts = train_step(m, b, SCHED, identity.LossConfig(0.0), GuidanceConfig(1.5, 1.0), Rng(0))
    assert parts["dropped"] == 3
    assert parts["refs_checksum"] == refcond.latent_checksum(np.zeros_like(b.refs))


def test_train_step_sets_gradients_through_both_terms():
    from refkv.codec import LatentCodec
    from refkv.identity import FaceEmbedder

    m = refcond.build_model(refcond.DESK_UNET, 0)
    parts = train_step(m, _batch(), SCHED, identity.LossConfig(0.1, "none"), GuidanceConfig(1.5, 0.0), Rng(0),
                       codec=LatentCodec(), embedder=FaceEmbedder())
    assert parts["time_id"] > 0
    grads = [p.grad for p in m.parameters()]
    assert all(g is not None for g in grads) and sum(float(np.abs(g).sum()) for g in grads) > 0


def test_uniform_timesteps_cover_range():
    ts = Rng(0).integers(1, SCHED.T + 1, size=20000)
    assert ts.min() == 1 and ts.max() == 1000
    assert abs(ts.mean() - 500.5) < 10
    # the training step draws from the same stream layout
    m = refcond.build_model(refcond.DESK_UNET, 0)
    parts = train_step(m, _batch(n=1), SCHED, identity.LossConfig(0.0), GuidanceConfig(), Rng(0))
    assert 1 <= parts["t_mean"] <= 1000
    assert diffusion.Batch is Batch
