"""Procedural identities: a small stand-in corpus for face restoration.

Each identity is a parameter vector (palette, head ellipse, hair line, eye
and mouth layout).  Renders of the same identity vary only in nuisances
(rotation, shift, illumination gain, background level, sensor grain), so
the toy embedder can group them while severe degradation wipes out the
layout cues that references still carry.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .tensorcore import Rng, Tensor, no_grad, rkvt

IMAGE_SIZE = 32


@dataclass(frozen=True)
class NuisanceRanges:
    rotation_deg: float = 8.0
    shift_px: float = 1.0
    gain: float = 0.08
    background: tuple = (0.42, 0.58)
    grain: float = 0.01

    @classmethod
    def none(cls) -> "NuisanceRanges":
        return cls(0.0, 0.0, 0.0, (0.5, 0.5), 0.0)


@dataclass(frozen=True)
class Nuisance:
    rotation_deg: float = 0.0
    shift: tuple = (0.0, 0.0)
    gain: float = 1.0
    background: float = 0.5
    grain: float = 0.0


@dataclass(frozen=True)
class IdentitySpec:
    seed: int
    skin: tuple
    hair: tuple
    feature: tuple
    center: tuple  # (x, y) in pixels
    radii: tuple  # (rx, ry)
    hair_line: float  # fraction of ry above the center where hair starts
    eye_offset: tuple  # (dx, dy) of the right eye from the center, mirrored for the left
    eye_radius: float
    mouth: tuple  # (dy, half_width, half_height)
    nuisance: NuisanceRanges = field(default_factory=NuisanceRanges)

    def vector(self) -> np.ndarray:
        """Flattened identity parameters, used for the distinctness margin."""
        return np.array([*self.skin, *self.hair, *self.feature, *self.center, *self.radii, self.hair_line,
                         *self.eye_offset, self.eye_radius, *self.mouth])

    def palette_gap(self, other: "IdentitySpec") -> float:
        a = np.array([self.skin, self.hair, self.feature])
        b = np.array([other.skin, other.hair, other.feature])
        return float(np.abs(a - b).max())


def random_identity(seed: int, nuisance: NuisanceRanges | None = None) -> IdentitySpec:
    g = Rng([seed, 0x1D]).generator
    c = IMAGE_SIZE / 2
    return IdentitySpec(
        seed=int(seed),
        skin=tuple(g.uniform(0.2, 0.95, 3).round(4)),
        hair=tuple(g.uniform(0.0, 0.8, 3).round(4)),
        feature=tuple(g.uniform(0.0, 1.0, 3).round(4)),
        center=(float(c + g.uniform(-2, 2)), float(c + g.uniform(-1, 2))),
        radii=(float(g.uniform(8, 12)), float(g.uniform(10, 14))),
        hair_line=float(g.uniform(-0.1, 0.6)),
        eye_offset=(float(g.uniform(2.5, 5.5)), float(g.uniform(-4, -1))),
        eye_radius=float(g.uniform(1.2, 2.4)),
        mouth=(float(g.uniform(3.5, 7)), float(g.uniform(1.5, 5)), float(g.uniform(0.6, 1.6))),
        nuisance=nuisance if nuisance is not None else NuisanceRanges(),
    )


def draw_nuisance(spec: IdentitySpec, rng: Rng) -> Nuisance:
    n = spec.nuisance
    u = rng.uniform(-1.0, 1.0, size=4)
    bg = rng.uniform(n.background[0], n.background[1]) if n.background[1] > n.background[0] else n.background[0]
    return Nuisance(
        rotation_deg=float(u[0] * n.rotation_deg),
        shift=(float(u[1] * n.shift_px), float(u[2] * n.shift_px)),
        gain=float(1.0 + u[3] * n.gain),
        background=float(bg),
        grain=float(n.grain),
    )


def _coverage(signed_dist):
    """Anti-aliased inside mask from a signed distance in pixels (negative inside)."""
    return np.clip(0.5 - signed_dist, 0.0, 1.0)


def render(spec: IdentitySpec, nuisance: Nuisance, rng: Rng) -> np.ndarray:
    """(3, 32, 32) float32 image in [0, 1]; deterministic in (spec, nuisance, rng seed)."""
    s = IMAGE_SIZE
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    cx = spec.center[0] + nuisance.shift[0]
    cy = spec.center[1] + nuisance.shift[1]
    th = np.deg2rad(nuisance.rotation_deg)
    # face-aligned coordinates
    u = np.cos(th) * (xs - cx) + np.sin(th) * (ys - cy)
    v = -np.sin(th) * (xs - cx) + np.cos(th) * (ys - cy)
    rx, ry = spec.radii

    img = np.empty((3, s, s))
    img[:] = nuisance.background

    def paint(mask, colour):
        img[:] = img * (1.0 - mask) + np.asarray(colour)[:, None, None] * mask

    ell = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    head = _coverage((ell - 1.0) * min(rx, ry))
    paint(head, spec.skin)
    hair = head * _coverage(v + spec.hair_line * ry)
    paint(hair, spec.hair)
    ex, ey = spec.eye_offset
    for sx in (-1.0, 1.0):
        d = np.sqrt((u - sx * ex) ** 2 + (v - ey) ** 2) - spec.eye_radius
        paint(_coverage(d), spec.feature)
    my, mw, mh = spec.mouth
    d = np.maximum(np.abs(u) - mw, np.abs(v - my) - mh)
    paint(_coverage(d), spec.feature)

    img *= nuisance.gain
    if nuisance.grain > 0:
        img += rng.normal(img.shape, std=nuisance.grain)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def sample_corpus(n: int, renders_per_identity: int, rng: Rng, embedder, min_gap=0.25, min_embed_dist=0.7,
                  max_link=0.3, min_cross=0.45, nuisance: NuisanceRanges | None = None, batch=256,
                  max_candidates=200_000):
    """Draw ``n`` identities and their renders by rejection.

    Candidates stream from ``rng``.  One is kept when

    * its palette differs from every kept identity by >= ``min_gap`` in some channel,
    * its nuisance-free render is at cosine distance >= ``min_embed_dist``
      from every kept identity's nuisance-free render,
    * its renders form a single component under ``max_link`` (longest edge
      of their minimum spanning tree), and
    * every one of its renders is >= ``min_cross`` from every kept render.

    The last two make any threshold in (max_link, min_cross] recover the
    identity partition exactly.  Returns ``(specs, images, labels, names)``.
    """
    specs, canon, images = [], [], []
    drawn = 0
    while len(specs) < n:
        if drawn >= max_candidates:
            raise RuntimeError(f"placed only {len(specs)} of {n} identities after {drawn} candidates")
        seeds = rng.child(drawn).integers(0, 2**31 - 1, size=batch)
        drawn += batch
        cands = [random_identity(int(sd), nuisance) for sd in seeds]
        cand_emb = embed_images(np.stack([render(c, Nuisance(), Rng(0)) for c in cands]), embedder)
        for k, cand in enumerate(cands):
            if not all(cand.palette_gap(o) >= min_gap for o in specs):
                continue
            if canon and (1.0 - np.asarray(canon) @ cand_emb[k]).min() < min_embed_dist:
                continue
            imgs = render_identity(cand, renders_per_identity)
            e = embed_images(imgs, embedder)
            if _mst_link(1.0 - e @ e.T) > max_link:
                continue
            if images and (1.0 - np.concatenate([x[1] for x in images]) @ e.T).min() < min_cross:
                continue
            specs.append(cand)
            canon.append(cand_emb[k])
            images.append((imgs, e))
            if len(specs) == n:
                break
    all_imgs = np.concatenate([x[0] for x in images])
    labels = np.repeat(np.arange(n), renders_per_identity)
    names = [f"id{k:03d}_r{j:02d}" for k in range(n) for j in range(renders_per_identity)]
    return specs, all_imgs, labels, names


def render_identity(spec: IdentitySpec, count: int) -> np.ndarray:
    """``count`` nuisance draws of one identity, seeded by the identity seed.

    Values are rounded to 8-bit levels so they survive a PPM round trip exactly.
    """
    rng = Rng([spec.seed, 0x4E])
    imgs = np.stack([render(spec, draw_nuisance(spec, rng.child(j, 0)), rng.child(j, 1)) for j in range(count)])
    return (np.round(imgs * 255.0) / 255.0).astype(np.float32)


def _mst_link(d):
    from scipy.sparse.csgraph import minimum_spanning_tree

    if len(d) < 2:
        return 0.0
    sub = np.maximum(d, 1e-12)
    np.fill_diagonal(sub, 0.0)
    return float(minimum_spanning_tree(sub).data.max())


_EMBEDDERS: dict = {}


def default_embedder(seed=0, calibration_identities=300):
    """The toy recognizer, whitened on renders of identities no corpus uses.

    Calibration identities come from seeds at or above 2**31, outside the
    range ``sample_identities`` draws from.  Cached per seed.
    """
    from .identity import FaceEmbedder

    if seed not in _EMBEDDERS:
        emb = FaceEmbedder(seed=seed)
        rng = Rng([seed, 0xCA1])
        specs = [random_identity(2**31 + seed * 100_003 + i) for i in range(calibration_identities)]
        imgs = np.stack([render(sp, draw_nuisance(sp, rng.child(i, 0)), rng.child(i, 1)) for i, sp in enumerate(specs)])
        _EMBEDDERS[seed] = emb.calibrate(imgs * 2.0 - 1.0)
    return _EMBEDDERS[seed]


def embed_images(images01: np.ndarray, embedder, batch=64) -> np.ndarray:
    """Unit embeddings of [0, 1] images through the toy embedder."""
    out = []
    with no_grad():
        for i in range(0, len(images01), batch):
            x = Tensor(images01[i : i + batch] * 2.0 - 1.0)
            out.append(embedder.embed(x).data.astype(np.float64))
    return np.concatenate(out)


def partition_margin(embeddings: np.ndarray, labels: np.ndarray):
    """Largest within-identity linking distance and smallest cross-identity distance.

    ``link`` is the longest edge of each identity's minimum spanning tree,
    maximized over identities: any threshold in (link, cross] recovers the
    partition exactly by connected components.
    """
    d = 1.0 - embeddings @ embeddings.T
    np.fill_diagonal(d, 0.0)
    same = labels[:, None] == labels[None, :]
    cross = float(d[~same].min()) if (~same).any() else np.inf
    link = 0.0
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        link = max(link, _mst_link(d[np.ix_(idx, idx)]))
    off = same & ~np.eye(len(d), dtype=bool)
    intra = float(d[off].mean()) if off.any() else 0.0
    inter = float(d[~same].mean()) if (~same).any() else np.inf
    return {"link": link, "cross": cross, "mean_intra": intra, "mean_inter": inter}


def calibrate_threshold(margin: dict) -> float:
    """Midpoint of the separating interval; raises when the classes overlap."""
    if margin["link"] >= margin["cross"]:
        raise RuntimeError(f"identities are not separable: link {margin['link']:.4f} >= cross {margin['cross']:.4f}")
    return 0.5 * (margin["link"] + margin["cross"])


def generate_corpus(out_dir, n_identities: int, renders_per_identity: int, seed: int, embedder=None,
                    **sampling):
    """Write PPM renders, an RKVT embedding matrix, the id list and a manifest.

    Returns the manifest dict.  Layout::

        images/<id>.ppm  embeddings.rkvt  ids.txt  labels.tsv  identities.json  manifest.txt
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    embedder = embedder or default_embedder()
    specs, images, labels, names = sample_corpus(n_identities, renders_per_identity, rng, embedder, **sampling)
    emb = embed_images(images, embedder)
    margin = partition_margin(emb, labels)
    for img, name in zip(images, names):
        io.write_ppm(out / "images" / f"{name}.ppm", img)
    rkvt.save(out / "embeddings.rkvt", emb.astype(np.float32))
    (out / "ids.txt").write_text("\n".join(names) + "\n", encoding="utf-8")
    (out / "labels.tsv").write_text("".join(f"{n}\t{lab}\n" for n, lab in zip(names, labels)), encoding="utf-8")
    (out / "identities.json").write_text(json.dumps([asdict(s) for s in specs], indent=1), encoding="utf-8")
    try:
        threshold = calibrate_threshold(margin)
    except RuntimeError:
        threshold = float("nan")
    manifest = {
        "kind": "synth-corpus",
        "seed": seed,
        "identities": n_identities,
        "renders_per_identity": renders_per_identity,
        "images": len(names),
        "embedding_dim": emb.shape[1],
        "embedder_checksum": embedder.checksum()[:16],
        **{f"sampling_{k}": v for k, v in sampling.items()},
        **{f"margin_{k}": f"{v:.6f}" for k, v in margin.items()},
        "calibrated_threshold": f"{threshold:.6f}",
    }
    io.write_manifest(out / "manifest.txt", manifest)
    return manifest


def load_labels(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            name, lab = line.split("\t")
            out[name] = int(lab)
    return out
