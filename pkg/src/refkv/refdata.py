"""Reference dataset construction from identity embeddings.

Pipeline: pairwise cosine distances -> threshold graph -> connected
components (identities) -> identity-disjoint splits -> per-image reference
lists ordered by farthest point sampling, with a minimum-distance filter on
the test split.  Also holds the reference augmentation used in training.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .tensorcore import Rng, rkvt

SPLITS = ("train", "val", "test")


@dataclass
class EmbeddingSet:
    ids: list
    matrix: np.ndarray  # (N, D), unit rows

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError(f"embedding matrix must be rank 2, got shape {self.matrix.shape}")
        if len(self.ids) != self.matrix.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for {self.matrix.shape[0]} embedding rows")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids are not unique")
        if len(self.ids) and np.abs(np.linalg.norm(self.matrix, axis=1) - 1.0).max() > 1e-4:
            raise ValueError("embedding rows must be unit-norm (within 1e-4)")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def load(cls, embeddings_path, ids_path) -> "EmbeddingSet":
        for p in (embeddings_path, ids_path):
            if not Path(p).exists():
                raise FileNotFoundError(f"{p}: file not found")
        matrix = rkvt.load(embeddings_path)
        ids = [line.strip() for line in Path(ids_path).read_text(encoding="utf-8").splitlines() if line.strip()]
        return cls(ids, matrix)


def pairwise_cosine_distance(E: EmbeddingSet) -> np.ndarray:
    """d(a, b) = 1 - <e_a, e_b>; exactly symmetric with a zero diagonal."""
    if len(E) == 0:
        raise ValueError("pairwise_cosine_distance: empty embedding set")
    m = E.matrix
    d = 1.0 - m @ m.T
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


@dataclass
class IdentityGraph:
    ids: list
    edges: list  # (i, j) index pairs with i < j and dist < threshold
    labels: list  # component label of each vertex: the smallest member id
    threshold: float

    def components(self) -> dict:
        """label -> sorted member indices."""
        out: dict = {}
        for i, lab in enumerate(self.labels):
            out.setdefault(lab, []).append(i)
        return out


def build_identity_graph(E: EmbeddingSet, threshold=0.4, dist=None) -> IdentityGraph:
    if not 0.0 < threshold < 2.0:
        raise ValueError(f"match threshold must lie in (0, 2), got {threshold}")
    d = pairwise_cosine_distance(E) if dist is None else dist
    roots = kernels.threshold_components(np.ascontiguousarray(d, dtype=np.float64), float(threshold))
    ii, jj = np.nonzero(np.triu(d < threshold, k=1))
    members: dict = {}
    for i, r in enumerate(roots):
        members.setdefault(int(r), []).append(E.ids[i])
    name = {r: min(m) for r, m in members.items()}
    labels = [name[int(r)] for r in roots]
    return IdentityGraph(list(E.ids), list(zip(ii.tolist(), jj.tolist())), labels, float(threshold))


@dataclass
class SplitAssignment:
    component_split: dict  # component label -> split name
    image_split: dict  # image id -> split name
    excluded: list  # ids of singleton components (no references)

    def images(self, split) -> list:
        return [i for i, s in self.image_split.items() if s == split]


def parse_ratios(ratios) -> tuple:
    if isinstance(ratios, str):
        ratios = [float(x) for x in ratios.split(",")]
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-6):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    return ratios


def split_by_identity(graph: IdentityGraph, ratios, rng: Rng) -> SplitAssignment:
    """Shuffle identities and hand each to the split furthest below its image quota."""
    ratios = parse_ratios(ratios)
    comps = graph.components()
    multi = sorted(lab for lab, m in comps.items() if len(m) > 1)
    excluded = sorted(graph.ids[m[0]] for lab, m in comps.items() if len(m) == 1)
    total = sum(len(comps[lab]) for lab in multi)
    targets = np.array(ratios) * total
    counts = np.zeros(3)
    comp_split = {}
    for k in rng.permutation(len(multi)):
        lab = multi[int(k)]
        s = int(np.argmax(targets - counts))  # first split wins ties
        comp_split[lab] = SPLITS[s]
        counts[s] += len(comps[lab])
    image_split = {}
    for lab in multi:
        for i in comps[lab]:
            image_split[graph.ids[i]] = comp_split[lab]
    return SplitAssignment(comp_split, image_split, excluded)


@dataclass
class RefList:
    target: str
    refs: list  # ordered reference ids
    distances: list  # distance of each reference to the target
    dropped: list = field(default_factory=list)  # (id, distance) removed by filtering

    def __len__(self):
        return len(self.refs)


def order_references_fps(target, candidates, to_target, pairwise) -> RefList:
    """Nearest candidate first, then repeatedly the one farthest from those picked.

    ``candidates`` are ids; ``to_target`` their distances to the target and
    ``pairwise`` their mutual distance matrix.  Ties go to the smaller id.
    """
    if len(candidates) == 0:
        raise ValueError("order_references_fps needs at least one candidate")
    cand = [str(c) for c in candidates]
    perm = np.argsort(np.array(cand), kind="stable")
    tt = np.ascontiguousarray(np.asarray(to_target, dtype=np.float64)[perm])
    pw = np.ascontiguousarray(np.asarray(pairwise, dtype=np.float64)[np.ix_(perm, perm)])
    order = kernels.fps_order(tt, pw)
    return RefList(str(target), [cand[perm[k]] for k in order], [float(tt[k]) for k in order])


def filter_test_pairs(ref_list: RefList, min_dist=0.1, max_dist=None) -> RefList:
    """Keep references with min_dist <= d (and d < max_dist when given); order is preserved."""
    keep, dist, dropped = [], [], list(ref_list.dropped)
    for r, d in zip(ref_list.refs, ref_list.distances):
        if d >= min_dist and (max_dist is None or d < max_dist):
            keep.append(r)
            dist.append(d)
        else:
            dropped.append((r, d))
    if not keep:
        warnings.warn(f"{ref_list.target}: every reference was filtered out", stacklevel=2)
    return RefList(ref_list.target, keep, dist, dropped)


@dataclass
class ReferenceDataset:
    graph: IdentityGraph
    split: SplitAssignment
    reflists: dict  # target id -> RefList
    excluded_ids: list

    def targets(self, split) -> list:
        return [t for t in self.reflists if self.split.image_split.get(t) == split]


def build_dataset(E: EmbeddingSet, threshold=0.4, min_test_dist=0.1, ratios=(0.9, 0.05, 0.05), rng=None,
                  exclude=()) -> ReferenceDataset:
    """Run the full pipeline.

    Reference candidates of an image are the other members of its identity.
    Test targets additionally keep only references with
    ``min_test_dist <= d < threshold``.  Ids in ``exclude`` are dropped as
    both targets and references, and targets left without references are
    not emitted.
    """
    rng = rng or Rng(0)
    dist = pairwise_cosine_distance(E)
    graph = build_identity_graph(E, threshold, dist)
    split = split_by_identity(graph, ratios, rng)
    excluded = set(str(x) for x in exclude)
    reflists = {}
    for lab, members in sorted(graph.components().items()):
        if len(members) < 2:
            continue
        for t in members:
            tid = graph.ids[t]
            if tid in excluded:
                continue
            cand = [m for m in members if m != t and graph.ids[m] not in excluded]
            if not cand:
                continue
            rl = order_references_fps(tid, [graph.ids[m] for m in cand], dist[t, cand], dist[np.ix_(cand, cand)])
            if split.image_split[tid] == "test":
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    rl = filter_test_pairs(rl, min_test_dist, threshold)
            if len(rl):
                reflists[tid] = rl
    return ReferenceDataset(graph, split, reflists, sorted(excluded))


def write_reflists(path, reflists):
    lines = [f"{rl.target}\t{','.join(rl.refs)}\n" for rl in reflists.values()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_reflists(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            target, refs = line.split("\t")
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'target<TAB>ref,ref,...'") from None
        out[target] = [r for r in refs.split(",") if r]
    return out


def write_splits(path, image_split: dict):
    Path(path).write_text("".join(f"{i}\t{s}\n" for i, s in sorted(image_split.items())), encoding="utf-8")


def read_splits(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise ValueError(f"{path}:{lineno}: expected 'id<TAB>train|val|test'")
        out[parts[0]] = parts[1]
    return out


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.02  # fraction of a full hue turn
    rotation_deg: float = 2.0
    translate: float = 0.05  # fraction of the image size
    scale: float = 0.05
    perspective_scale: float = 0.2
    perspective_p: float = 0.5
    flip_p: float = 0.5

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0, 0, 0, 0, 0, 0, 0, 0, 0, 0)


def _grey(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def rgb_to_hsv(img):
    r, g, b = img
    mx = img.max(axis=0)
    mn = img.min(axis=0)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx])


def hsv_to_rgb(hsv):
    h, s, v = hsv
    i = np.floor(h * 6.0) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros((3,) + h.shape)
    for k, (rr, gg, bb) in enumerate(table):
        m = i == k
        out[0][m], out[1][m], out[2][m] = rr[m], gg[m], bb[m]
    return out


def color_jitter(img, b, c, s, h):
    """Brightness, contrast, saturation factors and a hue shift in turns, applied in that order."""
    x = img
    if b != 1.0:
        x = np.clip(x * b, 0, 1)
    if c != 1.0:
        x = np.clip(c * x + (1 - c) * _grey(x).mean(), 0, 1)
    if s != 1.0:
        x = np.clip(s * x + (1 - s) * _grey(x)[None], 0, 1)
    if h != 0.0:
        hsv = rgb_to_hsv(x)
        hsv[0] = (hsv[0] + h) % 1.0
        x = np.clip(hsv_to_rgb(hsv), 0, 1)
    return x


def _homography(src, dst):
    """3x3 H with H @ [src, 1] ~ [dst, 1] from four point pairs."""
    a, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    hv = np.linalg.solve(np.array(a, dtype=np.float64), np.array(rhs, dtype=np.float64))
    return np.append(hv, 1.0).reshape(3, 3)


def warp(img, matrix):
    """Resample ``img`` at output pixel p from input location ``matrix @ p`` (homogeneous, bilinear)."""
    from scipy.ndimage import map_coordinates

    _, h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = matrix @ np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    sx, sy = pts[0] / pts[2], pts[1] / pts[2]
    return np.stack([map_coordinates(ch, [sy, sx], order=1, mode="nearest").reshape(h, w) for ch in img])


def augment_one(img, cfg: AugmentConfig, rng: Rng):
    g = rng.generator
    x = np.asarray(img, dtype=np.float64)
    _, h, w = x.shape
    u = g.uniform(-1.0, 1.0, size=9)
    x = color_jitter(x, 1 + u[0] * cfg.brightness, 1 + u[1] * cfg.contrast, 1 + u[2] * cfg.saturation,
                     u[3] * cfg.hue)
    # affine about the centre; matrix maps output coordinates to input coordinates
    ang = np.deg2rad(u[4] * cfg.rotation_deg)
    sc = 1 + u[5] * cfg.scale
    tx, ty = u[6] * cfg.translate * w, u[7] * cfg.translate * h
    if ang != 0 or sc != 1 or tx != 0 or ty != 0:
        cx, cy = (w - 1) / 2, (h - 1) / 2
        fwd = np.array([[sc * np.cos(ang), -sc * np.sin(ang), 0], [sc * np.sin(ang), sc * np.cos(ang), 0], [0, 0, 1]])
        shift_in = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
        shift_out = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1]])
        x = warp(x, np.linalg.inv(shift_out @ fwd @ shift_in))
    if cfg.perspective_scale > 0 and g.random() < cfg.perspective_p:
        corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
        jitter = g.uniform(0, cfg.perspective_scale / 2, size=(4, 2)) * np.array([w, h])
        inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]])
        moved = corners + inward * jitter
        x = warp(x, _homography(corners, moved))
    if cfg.flip_p > 0 and g.random() < cfg.flip_p:
        x = x[:, :, ::-1]
    return np.ascontiguousarray(x, dtype=np.float32)


def augment_references(refs: np.ndarray, n_target=5, rng: Rng | None = None, cfg: AugmentConfig | None = None):
    """Repeat references up to ``n_target``, shuffle, and augment each copy.

    Returns ``(images (n_target, 3, H, W), source_indices)``.
    """
    refs = np.asarray(refs)
    k = len(refs)
    if k < 1:
        raise ValueError("augment_references needs at least one reference")
    rng = rng or Rng(0)
    cfg = cfg or AugmentConfig()
    base = np.arange(k)
    if k >= n_target:
        src = rng.child(0).permutation(k)[:n_target]
    else:
        src = np.resize(base, n_target)
    src = src[rng.child(1).permutation(n_target)]
    out = np.stack([augment_one(refs[s], cfg, rng.child(2, j)) for j, s in enumerate(src)])
    return out, src.astype(np.int64)
