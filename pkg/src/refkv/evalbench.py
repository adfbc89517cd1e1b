"""Restoration metrics and the conditioning-mechanism cost benchmark."""
from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import diffusion, refcond
from .tensorcore import Rng, Tensor, no_grad

PSNR_CAP = 99.0


# ---------------------------------------------------------------- metrics


def ids_per_image(x, x_star, embedder) -> np.ndarray:
    """Cosine similarity of embeddings for (N, 3, S, S) images in [-1, 1]."""
    x = np.asarray(x, dtype=np.float32)
    x_star = np.asarray(x_star, dtype=np.float32)
    if x.shape != x_star.shape:
        raise ValueError(f"ids: shapes {x.shape} vs {x_star.shape}")
    if x.ndim == 3:
        x, x_star = x[None], x_star[None]
    with no_grad():
        a = embedder.embed(Tensor(x)).data.astype(np.float64)
        b = embedder.embed(Tensor(x_star)).data.astype(np.float64)
    return np.clip((a * b).sum(axis=1), -1.0, 1.0)


def ids(x, x_star, embedder) -> float:
    """Mean identity similarity in [-1, 1]; equals 1 - identity_loss."""
    return float(ids_per_image(x, x_star, embedder).mean())


def _sqrt_psd(m):
    ev, vecs = np.linalg.eigh(m)
    if not np.all(np.isfinite(ev)):
        raise ValueError("fid: non-finite eigenvalues")
    return (vecs * np.sqrt(np.maximum(ev, 0.0))) @ vecs.T


def fid(features_a, features_b, eps=1e-6) -> float:
    """Frechet distance between Gaussians fitted to two feature sets (rows are samples).

    Tr((S_a S_b)^(1/2)) is taken as Tr((A^(1/2) S_b A^(1/2))^(1/2)) with
    A = S_a, both covariances regularized by ``eps * I``; every square root
    is a symmetric eigendecomposition.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"fid: feature dims differ ({a.shape[1]} vs {b.shape[1]})")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("fid needs at least two samples per set")
    d = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sa = np.atleast_2d(np.cov(a, rowvar=False)) + eps * np.eye(d)
    sb = np.atleast_2d(np.cov(b, rowvar=False)) + eps * np.eye(d)
    if not (np.all(np.isfinite(sa)) and np.all(np.isfinite(sb))):
        raise ValueError("fid: non-finite covariance")
    ra = _sqrt_psd(sa)
    mid = ra @ sb @ ra
    ev = np.linalg.eigvalsh(0.5 * (mid + mid.T))
    if not np.all(np.isfinite(ev)):
        raise ValueError("fid: non-finite eigenvalues")
    tr_cross = np.sqrt(np.maximum(ev, 0.0)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_cross)
    return max(value, 0.0)


def psnr(x, x_star, peak=1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report the 99 dB cap."""
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x.shape != x_star.shape:
        raise ValueError(f"psnr: shapes {x.shape} vs {x_star.shape}")
    mse = float(((x - x_star) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def masked_metric(x, x_star, mask) -> float:
    """Mean absolute error over the pixels where ``mask`` is set.

    ``mask`` is (H, W) or broadcastable to the image; it weights every channel.
    """
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x.shape != x_star.shape:
        raise ValueError(f"masked_metric: shapes {x.shape} vs {x_star.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape)
    total = m.sum()
    if total <= 0:
        raise ValueError("masked_metric: empty mask")
    return float((m * np.abs(x - x_star)).sum() / total)


def global_metric(x, x_star) -> float:
    return masked_metric(x, x_star, np.ones(np.shape(x)))


@dataclass
class MetricReport:
    rows: list  # dicts with "id" plus metric columns
    columns: tuple = ("ids", "psnr")

    def aggregates(self) -> dict:
        out = {}
        for c in self.columns:
            vals = np.array([r[c] for r in self.rows if c in r], dtype=np.float64)
            if len(vals):
                out[c] = (float(vals.mean()), float(vals.std()))
        return out

    def to_tsv(self) -> str:
        cols = [c for c in self.columns if any(c in r for r in self.rows)]
        lines = ["id\t" + "\t".join(cols)]
        for r in self.rows:
            lines.append(str(r["id"]) + "\t" + "\t".join(f"{r[c]:.6f}" if c in r else "" for c in cols))
        for name, idx in (("mean", 0), ("std", 1)):
            agg = self.aggregates()
            lines.append(name + "\t" + "\t".join(f"{agg[c][idx]:.6f}" for c in cols))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        parts = [f"{c} = {m:.4f} +/- {s:.4f}" for c, (m, s) in self.aggregates().items()]
        return f"{len(self.rows)} images: " + ", ".join(parts)


def evaluate(restored, targets, names, embedder, masks=None) -> MetricReport:
    """Per-image IDS, PSNR and (optionally) masked L1 for [0, 1] images (N, 3, H, W)."""
    restored = np.asarray(restored, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    sims = ids_per_image(restored * 2 - 1, targets * 2 - 1, embedder)
    rows = []
    for i, name in enumerate(names):
        row = {"id": name, "ids": float(sims[i]), "psnr": psnr(restored[i], targets[i])}
        if masks is not None:
            row["masked_l1"] = masked_metric(restored[i], targets[i], masks[i])
        rows.append(row)
    cols = ("ids", "psnr", "masked_l1") if masks is not None else ("ids", "psnr")
    return MetricReport(rows, cols)


# ---------------------------------------------------------------- benchmark


def expected_passes(mechanism, steps, n_refs, batch=1):
    """Analytic U-net pass count of one guided sampling run."""
    main = 2 * steps * batch
    return main + n_refs * batch if mechanism == "cachekv" else main


def token_load(mechanism, n_refs):
    """Query-token multiplier of a main pass relative to an unconditioned pass."""
    return 1 + n_refs if mechanism == "spatial-concat" else 1


@dataclass
class BenchReport:
    steps: int
    n_refs: int
    rows: list = field(default_factory=list)

    COLUMNS = ("mechanism", "steps", "n_refs", "wall_time_s", "unet_passes", "expected_passes", "null_cache_passes",
               "attention_token_units", "attention_key_units", "flops_estimate", "peak_bytes", "law_ok")

    def row(self, mechanism) -> dict:
        return next(r for r in self.rows if r["mechanism"] == mechanism)

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for r in self.rows:
            lines.append("\t".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        out = [f"steps={self.steps} refs={self.n_refs}"]
        base = {r["mechanism"]: r for r in self.rows}
        ref_time = base.get("spatial-concat", {}).get("wall_time_s")
        for r in self.rows:
            rel = f" ({r['wall_time_s'] / ref_time:.0%} of spatial-concat)" if ref_time else ""
            out.append(f"  {r['mechanism']:<16} {r['wall_time_s']:.3f}s{rel}  passes {r['unet_passes']}"
                       f" (law {'ok' if r['law_ok'] else 'VIOLATED'})  tokens {r['attention_token_units']}"
                       f"  peak {r['peak_bytes'] / 1e6:.1f} MB")
        return "\n".join(out) + "\n"


def bench_mechanisms(config: refcond.UNetConfig, steps: int, n_refs: int, seed: int = 0,
                     mechanisms=refcond.MECHANISMS, repeats=3, measure_memory=True, schedule=None,
                     guidance_scale=1.5) -> BenchReport:
    """One guided sample per mechanism from identical inputs; counters, best-of wall time, peak bytes.

    Counters come from the first run.  The zero-reference cache of the
    unconditional branch is built once per model and reported under
    ``null_cache_passes``; the wall time is the best of ``repeats`` runs.
    Peak allocation is measured in a separate traced run so tracing does
    not slow the timed runs.
    """
    sched = schedule or diffusion.make_schedule(1000)
    rng = Rng(seed)
    cz, s = config.latent_channels, config.latent_size
    z_lq = rng.child(1).normal((1, cz, s, s))
    refs = rng.child(2).normal((1, n_refs, cz, s, s))
    z_T = rng.child(3).normal((1, cz, s, s))
    guidance = diffusion.GuidanceConfig(guidance_scale)
    report = BenchReport(steps, n_refs)
    # untimed one-step run so kernel compilation does not land on the first mechanism
    warm = refcond.build_model(refcond.UNetConfig(**{**config.__dict__, "mechanism": "cachekv"}), seed)
    diffusion.sample(warm, z_lq, refs, 1, guidance, rng.child(5), sched, z_T=z_T)
    for mech in mechanisms:
        if mech == "channel-concat" and n_refs > config.max_refs:
            cfg = refcond.UNetConfig(**{**config.__dict__, "mechanism": mech, "max_refs": n_refs})
        else:
            cfg = refcond.UNetConfig(**{**config.__dict__, "mechanism": mech})
        model = refcond.build_model(cfg, seed)

        def run():
            return diffusion.sample(model, z_lq, refs, steps, guidance, rng.child(4), sched, z_T=z_T)

        model.counters.reset()
        t0 = time.perf_counter()
        run()
        best = time.perf_counter() - t0
        counts = model.counters.as_dict()
        for _ in range(repeats - 1):
            t0 = time.perf_counter()
            run()
            best = min(best, time.perf_counter() - t0)
        peak = 0
        if measure_memory:
            try:
                tracemalloc.start()
                run()
                peak = tracemalloc.get_traced_memory()[1]
            except MemoryError:
                peak = -1
            finally:
                tracemalloc.stop()
        want = expected_passes(mech, steps, n_refs)
        report.rows.append({
            "mechanism": mech, "steps": steps, "n_refs": n_refs, "wall_time_s": best,
            "unet_passes": counts["unet_passes"], "expected_passes": want,
            "null_cache_passes": counts["null_cache_passes"],
            "attention_token_units": counts["attention_token_units"],
            "attention_key_units": counts["attention_key_units"],
            "flops_estimate": counts["flops_estimate"], "peak_bytes": int(peak),
            "law_ok": counts["unet_passes"] == want,
        })
    return report
