"""Toy face embedder, identity loss and the training objective.

The embedder is a fixed random conv net: three conv + average-pool stages,
a global average, a whitening map, and a linear head whose output is
L2-normalized.  Nothing is trained by gradient descent.  The whitening map
is either centring on a flat mid-grey image or, after ``calibrate``, a
regularized PCA whitening fitted to a sample of images, so that
embeddings spread over the sphere instead of clustering along the few
dominant directions of the random features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorcore import Conv2d, Linear, Module, Rng, Tensor, no_grad, ops, parameter

SCALING_MODES = ("sqrt_alpha_bar", "indicator_100", "indicator_500", "none")


@dataclass(frozen=True)
class LossConfig:
    lambda_time_id: float = 0.1
    scaling_mode: str = "sqrt_alpha_bar"

    def __post_init__(self):
        if self.lambda_time_id < 0:
            raise ValueError(f"lambda_time_id must be >= 0, got {self.lambda_time_id}")
        if self.scaling_mode not in SCALING_MODES:
            raise ValueError(f"unknown scaling mode {self.scaling_mode!r}; expected one of {SCALING_MODES}")


class FaceEmbedder(Module):
    """Seeded, frozen recognizer stand-in for (N, 3, S, S) images in [-1, 1]."""

    def __init__(self, image_size=32, embedding_dim=128, width=(32, 64, 128), seed=0):
        if image_size % 8:
            raise ValueError(f"image_size must be a multiple of 8, got {image_size}")
        self.image_size = image_size
        self.embedding_dim = embedding_dim
        self.feature_dim = width[-1]
        self.seed = seed
        rng = Rng([seed, 0xFACE])
        chans = (3,) + tuple(width)
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, rng.child(i)) for i in range(3)]
        self.head = Linear(self.feature_dim, embedding_dim, rng.child(9), bias=False)
        grey = np.zeros((1, 3, image_size, image_size), dtype=np.float32)
        with no_grad():
            centre = self._raw_features(Tensor(grey)).data[0].astype(np.float64)
        self.white_w = parameter(np.eye(self.feature_dim, dtype=np.float32))
        self.white_b = parameter((-centre).astype(np.float32))
        self.set_trainable(False)

    def calibrate(self, images, eps=1e-4, batch=64):
        """Fit the whitening map to ``images`` (N, 3, S, S) in [-1, 1].

        Eigenvalues are floored at ``eps`` times the largest before
        inversion.  Returns self.
        """
        feats = []
        with no_grad():
            for i in range(0, len(images), batch):
                feats.append(self._raw_features(Tensor(images[i : i + batch])).data.astype(np.float64))
        f = np.concatenate(feats)
        if len(f) < 2:
            raise ValueError("calibration needs at least two images")
        mu = f.mean(axis=0)
        ev, vecs = np.linalg.eigh(np.cov(f.T))
        ev = np.maximum(ev, 0.0)
        w = (vecs / np.sqrt(ev + eps * ev.max())).T
        self.white_w.data = w.astype(np.float32)
        self.white_b.data = (-(w @ mu)).astype(np.float32)
        return self

    def _check(self, x):
        s = self.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"embedder expects (N, 3, {s}, {s}) images, got {x.shape}")

    def _raw_features(self, x):
        h = x
        for conv in self.convs:
            h = ops.avg_pool(ops.tanh(conv(h)), 2)
        return ops.global_avg_pool(h)

    def features(self, x) -> Tensor:
        """Penultimate (pre-normalization) features, (N, feature_dim); used for FID."""
        x = ops.as_tensor(x)
        self._check(x)
        return ops.linear(self._raw_features(x), self.white_w, self.white_b)

    def embed(self, x) -> Tensor:
        """Unit-length embeddings (N, embedding_dim); differentiable in ``x``."""
        return ops.l2_normalize(self.head(self.features(x)))

    __call__ = embed


def cosine_similarity(x, x_star, embedder: FaceEmbedder) -> Tensor:
    """Per-image cos(R(x), R(x*)), shape (N,)."""
    return ops.row_dot(embedder.embed(x), embedder.embed(x_star))


def identity_loss(x, x_star, embedder: FaceEmbedder) -> Tensor:
    """Mean over the batch of 1 - cos(R(x), R(x*)); lies in [0, 2]."""
    cos = cosine_similarity(x, x_star, embedder)
    return ops.add_scalar(ops.scale(ops.mean(cos), -1.0), 1.0)


def time_weight(t, sched, mode: str) -> np.ndarray:
    """Per-sample weight applied to the identity term."""
    if mode not in SCALING_MODES:
        raise ValueError(f"unknown scaling mode {mode!r}; expected one of {SCALING_MODES}")
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if mode == "none":
        return np.ones(t.shape)
    if sched is not None and (np.any(t < 0) or np.any(t > sched.T)):
        raise ValueError(f"timestep outside [0, {sched.T}]")
    if mode == "sqrt_alpha_bar":
        return np.sqrt(sched.alpha_bar[t])
    threshold = 100 if mode == "indicator_100" else 500
    return (t < threshold).astype(np.float64)


def timestep_scaled_identity_loss(x, x_star, t, sched, mode: str, embedder: FaceEmbedder) -> Tensor:
    """Batch mean of w(t_i) * (1 - cos_i), with ``t`` a scalar or one timestep per image."""
    cos = cosine_similarity(x, x_star, embedder)
    w = time_weight(t, sched, mode)
    if w.size == 1:
        w = np.full(cos.shape, w[0])
    if w.shape != cos.shape:
        raise ValueError(f"got {w.size} timesteps for a batch of {cos.shape[0]}")
    per_image = ops.mul(ops.add_scalar(ops.scale(cos, -1.0), 1.0), Tensor(w))
    return ops.mean(per_image)


def total_loss(z0_hat, z0_star, x_hat, x_star, t, sched, cfg: LossConfig, embedder: FaceEmbedder):
    """L1 latent loss plus lambda times the scaled identity loss.

    ``x_hat`` must be the decoded prediction, still on the autodiff path and
    not clamped.  Returns ``(total, {"ldm": ..., "time_id": ...})``.
    """
    ldm = ops.l1_loss(z0_hat, z0_star)
    if cfg.lambda_time_id == 0:
        return ldm, {"ldm": float(ldm.item()), "time_id": 0.0}
    tid = timestep_scaled_identity_loss(x_hat, x_star, t, sched, cfg.scaling_mode, embedder)
    total = ops.add(ldm, ops.scale(tid, cfg.lambda_time_id))
    return total, {"ldm": float(ldm.item()), "time_id": float(tid.item())}
