import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import connected_components_closure, fps_exhaustive
from refkv.refdata import (AugmentConfig, EmbeddingSet, RefList, augment_references, build_dataset,
                           build_identity_graph, filter_test_pairs, order_references_fps, pairwise_cosine_distance,
                           parse_ratios, read_reflists, read_splits, split_by_identity, write_reflists, write_splits)
from refkv.synthfaces import default_embedder, embed_images, sample_corpus
from refkv.tensorcore import Rng


def unit_rows(n, d, seed):
    m = Rng(seed).normal((n, d)).astype(np.float64)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def ids(n):
    return [f"img{i:04d}" for i in range(n)]


# ---------------------------------------------------------------- embeddings and distances


def test_embedding_set_validation():
    with pytest.raises(ValueError, match="unit-norm"):
        EmbeddingSet(["a"], [[2.0, 0.0]])
    with pytest.raises(ValueError, match="unique"):
        EmbeddingSet(["a", "a"], np.eye(2))
    with pytest.raises(ValueError, match="ids"):
        EmbeddingSet(["a"], np.eye(2))


def test_pairwise_distance_fixtures_and_oracle():
    d = pairwise_cosine_distance(EmbeddingSet(["a", "b", "c"], [[1, 0], [1, 0], [0, 1]]))
    assert d[0, 1] == 0 and d[0, 2] == pytest.approx(1.0)
    m = unit_rows(10, 8, 0)
    d = pairwise_cosine_distance(EmbeddingSet(ids(10), m))
    for i, j in itertools.product(range(10), range(10)):
        want = 0.0 if i == j else 1.0 - sum(m[i, k] * m[j, k] for k in range(8))
        assert abs(d[i, j] - want) < 1e-6
    assert np.array_equal(d, d.T)
    with pytest.raises(ValueError):
        pairwise_cosine_distance(EmbeddingSet([], np.zeros((0, 4))))


# ---------------------------------------------------------------- graph


def test_chain_components():
    # A-B close, B-C close, A-C far, D far from all
    a, b = np.array([1.0, 0, 0]), np.array([np.cos(0.6), np.sin(0.6), 0])
    c = np.array([np.cos(1.2), np.sin(1.2), 0])
    d = np.array([0, 0, 1.0])
    g = build_identity_graph(EmbeddingSet(["A", "B", "C", "D"], np.stack([a, b, c, d])), 0.4)
    assert g.labels == ["A", "A", "A", "D"]
    assert sorted(g.edges) == [(0, 1), (1, 2)]


def test_threshold_bounds():
    E = EmbeddingSet(ids(5), unit_rows(5, 4, 1))
    with pytest.raises(ValueError):
        build_identity_graph(E, 0.0)
    with pytest.raises(ValueError):
        build_identity_graph(E, 2.5)
    tiny = build_identity_graph(E, 1e-9)
    assert tiny.labels == E.ids and tiny.edges == []


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_components_match_closure_oracle(seed):
    n = 200
    m = unit_rows(n, 3, seed)
    E = EmbeddingSet(ids(n), m)
    g = build_identity_graph(E, 0.02)
    d = pairwise_cosine_distance(E)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if d[i, j] < 0.02]
    assert sorted(g.edges) == edges
    want = connected_components_closure(n, edges)
    assert g.labels == [E.ids[w] for w in want]


def test_components_match_closure_at_500():
    n = 500
    E = EmbeddingSet(ids(n), unit_rows(n, 3, 7))
    g = build_identity_graph(E, 0.01)
    assert g.labels == [E.ids[w] for w in connected_components_closure(n, g.edges)]


# ---------------------------------------------------------------- splits


def test_parse_ratios():
    assert parse_ratios("0.9,0.05,0.05") == (0.9, 0.05, 0.05)
    for bad in ("0.5,0.5", "0.9,0.2,0.1", (-0.1, 0.6, 0.5)):
        with pytest.raises(ValueError):
            parse_ratios(bad)


def test_single_component_goes_to_train():
    E = EmbeddingSet(ids(4), np.tile([[1.0, 0.0]], (4, 1)))
    s = split_by_identity(build_identity_graph(E), (0.9, 0.05, 0.05), Rng(0))
    assert set(s.image_split.values()) == {"train"}


@pytest.fixture(scope="module")
def corpus50():
    emb = default_embedder(0)
    _, images, labels, names = sample_corpus(50, 10, Rng(0), emb)
    return EmbeddingSet(names, embed_images(images, emb)), labels


def test_synthetic_split_disjoint_and_sized(corpus50):
    E, labels = corpus50
    ds = build_dataset(E, 0.4, 0.1, (0.9, 0.05, 0.05), Rng(3))
    comps = ds.graph.components()
    assert len(comps) == 50
    for members in comps.values():
        assert len({ds.split.image_split[E.ids[m]] for m in members}) == 1
    counts = {s: len(ds.split.images(s)) for s in ("train", "val", "test")}
    assert counts == {"train": 450, "val": 30, "test": 20}
    again = build_dataset(E, 0.4, 0.1, (0.9, 0.05, 0.05), Rng(3))
    assert again.split.image_split == ds.split.image_split


def test_test_reflists_respect_bounds(corpus50):
    E, _ = corpus50
    ds = build_dataset(E, 0.4, 0.1, (0.9, 0.05, 0.05), Rng(3))
    tests = ds.targets("test")
    assert tests
    for t in tests:
        assert all(0.1 <= d < 0.4 for d in ds.reflists[t].distances)
    for t in ds.targets("train"):
        assert t not in ds.reflists[t].refs


# ---------------------------------------------------------------- FPS


def test_fps_single_candidate():
    rl = order_references_fps("t", ["a"], [0.3], [[0.0]])
    assert rl.refs == ["a"] and rl.distances == [0.3]


def test_fps_empty_errors():
    with pytest.raises(ValueError):
        order_references_fps("t", [], [], np.zeros((0, 0)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_fps_matches_exhaustive_on_a_line(n, seed):
    g = Rng(seed).generator
    pos = g.uniform(0, 1, size=n).round(3)
    target = g.uniform(0, 1)
    to_t = np.abs(pos - target)
    pw = np.abs(pos[:, None] - pos[None, :])
    names = [f"c{i}" for i in range(n)]
    rl = order_references_fps("t", names, to_t, pw)
    assert rl.refs == [names[k] for k in fps_exhaustive(to_t, pw)]


def test_fps_orders_duplicates_last():
    pos = np.array([0.1, 0.5, 0.5, 0.9])
    rl = order_references_fps("t", ["a", "b", "c", "d"], np.abs(pos), np.abs(pos[:, None] - pos[None, :]))
    assert rl.refs[0] == "a" and rl.refs[-1] == "c"


# ---------------------------------------------------------------- filtering


def test_filter_all_below_warns():
    rl = RefList("t", ["a", "b"], [0.05, 0.05])
    with pytest.warns(UserWarning, match="filtered out"):
        out = filter_test_pairs(rl)
    assert out.refs == [] and len(out.dropped) == 2


def test_filter_boundary_and_mixed():
    rl = RefList("t", ["a", "b", "c", "d", "e"], [0.3, 0.1, 0.099, 0.02, 0.45])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = filter_test_pairs(rl, 0.1, 0.4)
    assert out.refs == ["a", "b"] and out.distances == [0.3, 0.1]
    assert [r for r, _ in out.dropped] == ["c", "d", "e"]


# ---------------------------------------------------------------- manifests


def test_reflist_and_split_round_trip(tmp_path):
    lists = {"x": RefList("x", ["a", "b"], [0.2, 0.3]), "y": RefList("y", ["c"], [0.1])}
    write_reflists(tmp_path / "r.tsv", lists)
    assert read_reflists(tmp_path / "r.tsv") == {"x": ["a", "b"], "y": ["c"]}
    write_splits(tmp_path / "s.tsv", {"x": "train", "y": "test"})
    assert read_splits(tmp_path / "s.tsv") == {"x": "train", "y": "test"}
    (tmp_path / "bad.tsv").write_text("x\tnowhere\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        read_splits(tmp_path / "bad.tsv")


# ---------------------------------------------------------------- augmentation


def test_augment_repeats_and_covers_sources():
    refs = Rng(0).uniform(0, 1, size=(2, 3, 32, 32)).astype(np.float32)
    out, src = augment_references(refs, 5, Rng(1))
    assert out.shape == (5, 3, 32, 32)
    assert set(src.tolist()) == {0, 1} and sorted(src.tolist()).count(0) == 3


def test_identity_augmentation_returns_inputs():
    refs = Rng(2).uniform(0, 1, size=(5, 3, 32, 32)).astype(np.float32)
    out, src = augment_references(refs, 5, Rng(3), AugmentConfig.identity())
    np.testing.assert_allclose(out, refs[src], atol=1e-5)


def test_augment_deterministic_and_in_range():
    refs = Rng(4).uniform(0, 1, size=(3, 3, 32, 32)).astype(np.float32)
    a, sa = augment_references(refs, 5, Rng(5))
    b, sb = augment_references(refs, 5, Rng(5))
    assert np.array_equal(a, b) and np.array_equal(sa, sb)
    assert a.min() >= -1e-6 and a.max() <= 1 + 1e-6
    with pytest.raises(ValueError):
        augment_references(refs[:0], 5, Rng(0))


def test_augment_subsamples_when_too_many():
    refs = Rng(6).uniform(0, 1, size=(8, 3, 32, 32)).astype(np.float32)
    _, src = augment_references(refs, 5, Rng(7))
    assert len(set(src.tolist())) == 5
