"""Frozen image <-> latent codec.

Two modes share one interface:

* ``orthogonal``: patchify, then project each patch with a fixed matrix whose
  rows are orthonormal.  The basis comes from a seeded QR factorization whose
  first columns are the per-channel patch-mean directions, so the leading
  latent channels carry the mean colour of each patch.
* ``tiny``: a small trainable conv encoder/decoder, for exercising the full
  pipeline with a learned codec.

Images are ``(N, 3, H, W)`` in [-1, 1]; latents are ``(N, Cz, Hz, Wz)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import io
from .tensorcore import Adam, Conv2d, Module, Rng, Tensor, no_grad, ops, parameter

MODES = ("orthogonal", "tiny")


@dataclass(frozen=True)
class CodecConfig:
    image_size: int = 32
    latent_size: int = 8
    latent_channels: int = 4
    mode: str = "orthogonal"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown codec mode {self.mode!r}")
        if self.image_size % self.latent_size:
            raise ValueError(f"image_size {self.image_size} not divisible by latent_size {self.latent_size}")
        if self.mode == "orthogonal" and 3 * self.patch**2 < self.latent_channels:
            raise ValueError(f"patch area x 3 = {3 * self.patch**2} < latent_channels {self.latent_channels}")
        if self.mode == "tiny" and self.patch & (self.patch - 1):
            raise ValueError("tiny codec needs a power-of-two patch size")

    @property
    def patch(self):
        return self.image_size // self.latent_size


DESK_CODEC = CodecConfig()
FULL_CODEC = CodecConfig(image_size=512, latent_size=64, latent_channels=8)


def orthonormal_basis(cfg: CodecConfig) -> np.ndarray:
    """Rows: (latent_channels, 3 * patch**2), orthonormal."""
    p2 = cfg.patch**2
    dim = 3 * p2
    rng = Rng([cfg.seed, 0x0C0DEC])
    a = rng.normal((dim, cfg.latent_channels)).astype(np.float64)
    for ch in range(min(3, cfg.latent_channels)):
        a[:, ch] = 0.0
        a[ch * p2 : (ch + 1) * p2, ch] = 1.0
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))[None, :]
    return q.T.astype(np.float32)


def _patchify(x, p):
    n, c, h, w = x.shape
    hz, wz = h // p, w // p
    t = ops.reshape(x, (n, c, hz, p, wz, p))
    t = ops.transpose(t, (0, 2, 4, 1, 3, 5))
    return ops.reshape(t, (n, hz * wz, c * p * p))


def _unpatchify(tokens, p, hz, wz):
    n = tokens.shape[0]
    t = ops.reshape(tokens, (n, hz, wz, 3, p, p))
    t = ops.transpose(t, (0, 3, 1, 4, 2, 5))
    return ops.reshape(t, (n, 3, hz * p, wz * p))


class _TinyEncoder(Module):
    def __init__(self, cz, levels, rng, width=32):
        self.conv_in = Conv2d(3, width, 3, rng.child(0))
        self.downs = [Conv2d(width, width, 4, rng.child(1 + i), stride=2, pad=1) for i in range(levels)]
        self.conv_out = Conv2d(width, cz, 1, rng.child(99))

    def __call__(self, x):
        h = ops.silu(self.conv_in(x))
        for d in self.downs:
            h = ops.silu(d(h))
        return self.conv_out(h)


class _TinyDecoder(Module):
    def __init__(self, cz, levels, rng, width=32):
        self.conv_in = Conv2d(cz, width, 1, rng.child(0))
        self.ups = [Conv2d(width, width, 3, rng.child(1 + i)) for i in range(levels)]
        self.conv_out = Conv2d(width, 3, 3, rng.child(99))

    def __call__(self, z):
        h = ops.silu(self.conv_in(z))
        for u in self.ups:
            h = ops.silu(u(ops.upsample_nearest(h, 2)))
        return self.conv_out(h)


class LatentCodec(Module):
    def __init__(self, config: CodecConfig = DESK_CODEC):
        self.config = config
        self.frozen = False
        if config.mode == "orthogonal":
            self.basis = parameter(orthonormal_basis(config), trainable=False)
            self.frozen = True
        else:
            levels = int(round(math.log2(config.patch)))
            rng = Rng([config.seed, 0x7171])
            self.encoder = _TinyEncoder(config.latent_channels, levels, rng.child(1))
            self.decoder = _TinyDecoder(config.latent_channels, levels, rng.child(2))

    def freeze(self):
        self.set_trainable(False)
        self.frozen = True

    def _check_image(self, x):
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"encode: expected (N, 3, {s}, {s}) image, got {x.shape}")

    def encode(self, x: Tensor) -> Tensor:
        self._check_image(x)
        cfg = self.config
        if cfg.mode == "orthogonal":
            tokens = ops.linear(_patchify(x, cfg.patch), self.basis)
            return ops.tokens_to_nchw(tokens, cfg.latent_size, cfg.latent_size)
        return self.encoder(x)

    def decode(self, z: Tensor) -> Tensor:
        cfg = self.config
        want = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        if z.ndim != 4 or tuple(z.shape[1:]) != want:
            raise ValueError(f"decode: expected (N, {want[0]}, {want[1]}, {want[2]}) latent, got {z.shape}")
        if cfg.mode == "orthogonal":
            patches = ops.linear(ops.nchw_to_tokens(z), ops.transpose(self.basis, (1, 0)))
            return _unpatchify(patches, cfg.patch, cfg.latent_size, cfg.latent_size)
        return self.decoder(z)

    def save(self, path):
        io.save_tensor_dir(path, self.state_dict(), {**asdict(self.config), "frozen": int(self.frozen)})

    @classmethod
    def load(cls, path) -> "LatentCodec":
        arrays, man = io.load_tensor_dir(path)
        cfg = CodecConfig(
            image_size=int(man["image_size"]),
            latent_size=int(man["latent_size"]),
            latent_channels=int(man["latent_channels"]),
            mode=man["mode"],
            seed=int(man["seed"]),
        )
        codec = cls(cfg)
        codec.load_state_dict(arrays)
        if int(man.get("frozen", "1")):
            codec.freeze()
        return codec


def to_signed(img01):
    """[0, 1] -> [-1, 1]."""
    return np.asarray(img01, dtype=np.float32) * 2.0 - 1.0


def to_unit(img):
    """[-1, 1] -> [0, 1], clamped; only for export."""
    return np.clip((np.asarray(img, dtype=np.float32) + 1.0) * 0.5, 0.0, 1.0)


def train_tiny_codec(codec: LatentCodec, images: np.ndarray, epochs: int, rng: Rng, held_out: np.ndarray | None = None,
                     batch_size=16, lr=2e-3):
    """Fit the tiny codec with an L1 reconstruction loss, then freeze it.

    ``images`` are (N, 3, H, W) in [-1, 1].  Returns the held-out L1 history,
    entry 0 being the value before training.
    """
    if codec.config.mode != "tiny":
        raise ValueError("train_tiny_codec needs a codec in 'tiny' mode")
    if held_out is None:
        held_out = images[: max(1, len(images) // 10)]
        images = images[len(held_out):]

    def held_l1():
        with no_grad():
            x = Tensor(held_out)
            return float(ops.l1_loss(codec.decode(codec.encode(x)), x).item())

    history = [held_l1()]
    codec.set_trainable(True)
    opt = Adam(codec.named_parameters(), lr=lr)
    for epoch in range(epochs):
        order = rng.child(epoch).permutation(len(images))
        for start in range(0, len(order), batch_size):
            x = Tensor(images[order[start : start + batch_size]])
            loss = ops.l1_loss(codec.decode(codec.encode(x)), x)
            loss.backward()
            opt.step()
        history.append(held_l1())
    codec.freeze()
    return history
