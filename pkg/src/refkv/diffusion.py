"""Noise schedule, forward process, DDIM sampling with reference guidance, training step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import refcond
from .tensorcore import Rng, Tensor, backward, no_grad, ops


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # index 1..T, beta[0] unused (0)
    alpha: np.ndarray
    alpha_bar: np.ndarray  # index 0..T, alpha_bar[0] == 1

    @property
    def sqrt_alpha_bar(self):
        return np.sqrt(self.alpha_bar)

    @property
    def one_minus_alpha_bar(self):
        return 1.0 - self.alpha_bar

    def key(self):
        return (self.T, float(self.beta[1]), float(self.beta[-1]))


def make_schedule(T=1000, beta_start=1e-4, beta_end=2e-2) -> NoiseSchedule:
    """Linear betas; alpha_bar accumulated in float64."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else beta_start
    alpha = 1.0 - beta
    alpha[0] = 1.0
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.5
    condition_dropout_prob: float = 0.1

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")
        if not 0.0 <= self.condition_dropout_prob <= 1.0:
            raise ValueError(f"dropout prob must be in [0, 1], got {self.condition_dropout_prob}")


def _coef(sched, t):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ValueError(f"timestep outside [0, {sched.T}]")
    return np.sqrt(sched.alpha_bar[t]), np.sqrt(1.0 - sched.alpha_bar[t])


def _per_sample(coef, ndim):
    c = np.asarray(coef, dtype=np.float64)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim)) if c.ndim else c


def q_sample(z0, t, noise, sched: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise; t scalar or per-sample (N,)."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"q_sample: t must lie in [1, {sched.T}]")
    a, b = _coef(sched, t_arr)
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if z0.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} differs from z0 {z0.shape}")
    return _per_sample(a, z0.ndim) * z0 + _per_sample(b, z0.ndim) * noise


def predict_eps_from_z0(z_t, z0_hat, t, sched: NoiseSchedule):
    """Invert the forward process for the noise: (z_t - sqrt(abar) z0) / sqrt(1 - abar)."""
    t_arr = np.asarray(t)
    if np.any(t_arr == 0) or np.any(sched.alpha_bar[t_arr] >= 1.0):
        raise ValueError("predict_eps_from_z0: undefined at t=0 (alpha_bar = 1)")
    a, b = _coef(sched, t_arr)
    z_t = np.asarray(z_t, dtype=np.float64)
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    return (z_t - _per_sample(a, z_t.ndim) * z0_hat) / _per_sample(b, z_t.ndim)


def ddim_step(z_t, z0_hat, t, t_prev, sched: NoiseSchedule, eps_hat=None):
    """Deterministic (eta = 0) DDIM update from t to t_prev < t."""
    if not 0 <= t_prev < t <= sched.T:
        raise ValueError(f"ddim_step: need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}, T={sched.T}")
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    if eps_hat is None:
        eps_hat = predict_eps_from_z0(z_t, z0_hat, t, sched)
    a_prev, b_prev = _coef(sched, t_prev)
    return a_prev * z0_hat + b_prev * np.asarray(eps_hat, dtype=np.float64)


def cfg_combine(eps_uncond, eps_cond, s):
    """eps_uncond + s * (eps_cond - eps_uncond)."""
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"cfg_combine: shapes {eps_uncond.shape} vs {eps_cond.shape}")
    return eps_uncond + s * (eps_cond - eps_uncond)


def ddim_timesteps(T, steps):
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ValueError(f"steps {steps} exceeds schedule length T={T}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)
    return list(zip(ts[:-1].tolist(), ts[1:].tolist()))


def sample(model, z_lq, ref_latents, steps, guidance: GuidanceConfig, rng: Rng, sched: NoiseSchedule,
           z_T=None, reextract_every_step=False, callback=None):
    """Guided DDIM from z_T ~ N(0, I) to a clean latent.

    ``z_lq`` is (N, Cz, H, W); ``ref_latents`` is (N, R, Cz, H, W) or None for
    a reference-free run (both branches then see zero references).  Each step
    runs the model on [conditional; unconditional] as one batch; the
    unconditional branch sees zero references.  With a cachekv model the
    reference cache is extracted once, unless ``reextract_every_step``.
    ``guidance=None`` runs the conditional branch alone.
    """
    z_lq = np.asarray(z_lq, dtype=np.float32)
    n = z_lq.shape[0]
    if model.config.latent_channels != z_lq.shape[1] or model.config.latent_size != z_lq.shape[2]:
        raise ValueError(f"model expects {model.config.latent_channels}x{model.config.latent_size} latents, got {z_lq.shape}")
    pairs = ddim_timesteps(sched.T, steps)
    if z_T is None:
        z_T = rng.normal(z_lq.shape)
    z = np.asarray(z_T, dtype=np.float64)
    if ref_latents is None:
        r = model.config.max_refs if model.mechanism == "channel-concat" else 1
        ref_latents = np.zeros((n, r) + z_lq.shape[1:], dtype=np.float32)
    refs = Tensor(ref_latents)
    r = refs.shape[1]
    with no_grad():
        null = refcond.null_condition(model, n, r) if guidance is not None else None
        cond = None
        lq = Tensor(z_lq)
        lq2 = Tensor(np.concatenate([z_lq, z_lq], axis=0))
        for t, t_prev in pairs:
            if cond is None or reextract_every_step:
                cond = refcond.prepare_condition(model, refs)
            if guidance is None:
                z0_c = model(Tensor(z), lq, t, cond).data.astype(np.float64)
                eps = predict_eps_from_z0(z, z0_c, t, sched)
            else:
                both = refcond.concat_conditions(cond, null)
                zt = Tensor(np.concatenate([z, z], axis=0))
                out = model(zt, lq2, t, both).data.astype(np.float64)
                z0_c, z0_u = out[:n], out[n:]
                eps_c = predict_eps_from_z0(z, z0_c, t, sched)
                eps_u = predict_eps_from_z0(z, z0_u, t, sched)
                eps = cfg_combine(eps_u, eps_c, guidance.scale)
            a, b = _coef(sched, t)
            z0_g = (z - b * eps) / a
            z = ddim_step(z, z0_g, t, t_prev, sched, eps_hat=eps)
            if callback is not None:
                callback(t, t_prev, z)
    return z.astype(np.float32)


@dataclass
class Batch:
    """One training batch; arrays, latents already encoded."""

    z0: np.ndarray  # (N, Cz, H, W) target latents
    z_lq: np.ndarray  # (N, Cz, H, W)
    refs: np.ndarray  # (N, R, Cz, H, W)
    x_star: np.ndarray | None = None  # (N, 3, S, S) identity-loss target images in [-1, 1]


def train_step(model, batch: Batch, sched: NoiseSchedule, loss_cfg, guidance: GuidanceConfig, rng: Rng,
               codec=None, embedder=None, drop_lq=False):
    """One forward/backward pass; returns component losses and the sampled t.

    Gradients are left on the model parameters for the optimizer.
    """
    from . import identity

    n = batch.z0.shape[0]
    if n == 0:
        raise ValueError("train_step: empty batch")
    t = rng.integers(1, sched.T + 1, size=n)
    noise = rng.normal(batch.z0.shape)
    drop = rng.random(n) < guidance.condition_dropout_prob
    refs = batch.refs.copy()
    refs[drop] = 0.0
    z_lq = batch.z_lq.copy()
    if drop_lq:
        z_lq[drop] = 0.0
    z_t = q_sample(batch.z0, t, noise, sched).astype(np.float32)
    cond = refcond.prepare_condition(model, Tensor(refs))
    z0_hat = model(Tensor(z_t), Tensor(z_lq), t, cond)
    z0_star = Tensor(batch.z0)
    use_id = loss_cfg.lambda_time_id > 0 and embedder is not None and codec is not None
    if use_id:
        x_hat = codec.decode(z0_hat)
        x_star = Tensor(batch.x_star) if batch.x_star is not None else codec.decode(z0_star)
        total, parts = identity.total_loss(z0_hat, z0_star, x_hat, x_star, t, sched, loss_cfg, embedder)
    else:
        ldm = ops.l1_loss(z0_hat, z0_star)
        total, parts = ldm, {"ldm": float(ldm.item()), "time_id": 0.0}
    backward(total)
    parts["total"] = float(total.item())
    parts["t_mean"] = float(np.mean(t))
    parts["dropped"] = int(drop.sum())
    parts["refs_checksum"] = refcond.latent_checksum(refs)
    return parts
