"""Analytic vs central-difference gradient comparison."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import Tensor, backward, get_tape, precision


class NondeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    n_probes: int
    analytic: np.ndarray
    numeric: np.ndarray


def _eval(f, x):
    with_tape = get_tape()
    out = f(x)
    with_tape.clear()
    return float(out.data.astype(np.float64).reshape(()))


def grad_check(f, x: Tensor, h=1e-3, tol=1e-2, probes=None, rng=None, floor=1e-3, dtype=None) -> GradCheckReport:
    """Compare d f(x)/dx against central differences.

    ``dtype=np.float64`` runs both passes under :func:`precision` so the
    finite differences are not swamped by float32 rounding.  ``probes`` limits the check to that many randomly chosen elements.  The
    relative error per element is ``|a - n| / max(|a|, |n|, floor * scale)``
    where ``scale`` is the largest numeric gradient magnitude, so elements
    whose gradient is negligible against the rest are compared absolutely.
    """
    if dtype is not None:
        with precision(dtype):
            x64 = Tensor(x.data.astype(dtype))
            report = grad_check(f, x64, h, tol, probes, rng, floor)
        return report
    if _eval(f, x) != _eval(f, x):
        raise NondeterministicError("f gave two different values on the same input")
    prev_flag = x.requires_grad
    x.requires_grad = True
    x.grad = None
    tape = get_tape()
    tape.clear()
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued f")
    backward(out)
    analytic_full = np.zeros(x.shape, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    # parameters touched by f keep stale grads; callers own them
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if probes is not None and probes < flat.size:
        idx = np.sort((rng or Rng(0)).choice(flat.size, size=probes, replace=False))
    numeric = np.zeros(idx.size)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval(f, x)
        flat[i] = orig - h
        fm = _eval(f, x)
        flat[i] = orig
        numeric[k] = (fp - fm) / (2 * h)
    analytic = analytic_full.reshape(-1)[idx]
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * max(scale, 1e-12))
    rel = np.abs(analytic - numeric) / denom
    both_zero = (np.abs(analytic) == 0) & (np.abs(numeric) == 0)
    rel[both_zero] = 0.0
    max_rel = float(rel.max(initial=0.0))
    x.requires_grad = prev_flag
    return GradCheckReport(max_rel <= tol, max_rel, int(idx.size), analytic, numeric)
