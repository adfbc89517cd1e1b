"""Parameter containers, a few layers and Adam."""
from __future__ import annotations

import contextlib
import hashlib
import math

import numpy as np

from . import ops
from .rng import Rng
from .tensor import Tensor


class Module:
    """Holds named parameters and child modules; subclasses set attributes."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.is_param:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, p in sorted(self.named_parameters().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())
        return h.hexdigest()


def parameter(data, trainable=True) -> Tensor:
    t = Tensor(data, requires_grad=trainable)
    t.is_param = True
    return t


_LAZY = {"on": False}


@contextlib.contextmanager
def shape_only():
    """Build modules with untouched zero buffers, e.g. to count parameters."""
    prev = _LAZY["on"]
    _LAZY["on"] = True
    try:
        yield
    finally:
        _LAZY["on"] = prev


def scaled_normal(rng: Rng, shape, fan_in, gain=1.0):
    """N(0, gain^2 / fan_in) initialization."""
    if _LAZY["on"]:
        return np.zeros(shape, dtype=np.float32)
    return rng.normal(shape, std=gain / math.sqrt(fan_in))


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng: Rng, stride=1, pad=None, gain=1.0):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.weight = parameter(scaled_normal(rng, (cout, cin, k, k), cin * k * k, gain))
        self.bias = parameter(np.zeros(cout, dtype=np.float32))

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, din, dout, rng: Rng, bias=True, gain=1.0):
        self.weight = parameter(scaled_normal(rng, (dout, din), din, gain))
        self.bias = parameter(np.zeros(dout, dtype=np.float32)) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels, groups):
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.gamma = parameter(np.ones(channels, dtype=np.float32))
        self.beta = parameter(np.zeros(channels, dtype=np.float32))

    def __call__(self, x):
        return ops.group_norm(x, self.groups, self.gamma, self.beta)


class Adam:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, grad_clip=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if self.grad_clip is not None:
            total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if total > self.grad_clip:
                grads = {k: g * np.float32(self.grad_clip / total) for k, g in grads.items()}
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, g in grads.items():
            p = self.params[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - upd).astype(np.float32)
            p.grad = None

    def state_dict(self):
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state, step_count):
        for k in self.m:
            self.m[k] = np.asarray(state[f"m.{k}"], dtype=np.float32).copy()
            self.v[k] = np.asarray(state[f"v.{k}"], dtype=np.float32).copy()
        self.step_count = int(step_count)
