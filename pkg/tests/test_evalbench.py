import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fid_2d
from refkv.evalbench import (PSNR_CAP, MetricReport, bench_mechanisms, evaluate, expected_passes, fid,
                             global_metric, ids, masked_metric, psnr, token_load)
from refkv.identity import FaceEmbedder, identity_loss
from refkv.refcond import DESK_UNET, MECHANISMS
from refkv.tensorcore import Rng, Tensor, no_grad

EMB = FaceEmbedder()


class TableEmbedder:
    def __init__(self, table):
        self.table = table

    def embed(self, x):
        arr = np.asarray(x.data if isinstance(x, Tensor) else x)
        return Tensor(np.stack([np.asarray(self.table[float(i.reshape(-1)[0])], np.float32) for i in arr]))


# ---------------------------------------------------------------- IDS


def test_ids_fixtures():
    x = Rng(0).normal((2, 3, 32, 32))
    assert ids(x, x, EMB) == pytest.approx(1.0, abs=1e-6)
    ortho = TableEmbedder({0.0: [1, 0], 1.0: [0, 1]})
    assert ids(np.zeros((1, 3, 4, 4)), np.ones((1, 3, 4, 4)), ortho) == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ids_plus_identity_loss_is_one(seed):
    g = Rng(seed)
    x, y = g.normal((3, 3, 32, 32)), g.child(1).normal((3, 3, 32, 32))
    with no_grad():
        loss = float(identity_loss(Tensor(x), Tensor(y), EMB).item())
    assert ids(x, y, EMB) + loss == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------- FID


def test_fid_identical_sets_zero():
    a = Rng(1).normal((50, 6))
    assert fid(a, a) == pytest.approx(0.0, abs=1e-6)


def test_fid_unit_shift_1d():
    g = Rng(2)
    a, b = g.normal((20_000, 1)), g.child(1).normal((20_000, 1)) + 1.0
    assert fid(a, b) == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("seed", range(5))
def test_fid_matches_2x2_oracle(seed):
    g = Rng(seed)
    a = g.normal((40, 2)) @ np.array([[1.0, 0.3], [0.0, 0.7]])
    b = g.child(1).normal((60, 2)) * np.array([0.5, 1.5]) + np.array([0.2, -0.4])
    assert fid(a, b) == pytest.approx(fid_2d(a, b), abs=1e-6)


def test_fid_symmetric_and_rotation_invariant():
    g = Rng(3)
    a, b = g.normal((80, 5)).astype(np.float64), g.child(1).normal((90, 5)).astype(np.float64) * 1.3 + 0.2
    assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-6)
    q, _ = np.linalg.qr(g.child(2).normal((5, 5)).astype(np.float64))
    assert fid(a @ q, b @ q) == pytest.approx(fid(a, b), abs=1e-5)


def test_fid_errors():
    with pytest.raises(ValueError, match="dims"):
        fid(np.zeros((5, 2)), np.zeros((5, 3)))
    with pytest.raises(ValueError, match="two samples"):
        fid(np.zeros((1, 2)), np.zeros((5, 2)))
    bad = np.ones((5, 2))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError, match="non-finite"), np.errstate(invalid="ignore"):
        fid(bad, np.zeros((5, 2)))


# ---------------------------------------------------------------- PSNR and masked metric


def test_psnr_values():
    x = np.zeros((3, 8, 8))
    assert psnr(x, x) == PSNR_CAP
    assert psnr(x, x + 0.1) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(x, np.zeros((3, 4, 4)))


def test_masked_metric_cases():
    g = Rng(4)
    x, y = g.uniform(0, 1, size=(3, 8, 8)), g.child(1).uniform(0, 1, size=(3, 8, 8))
    assert masked_metric(x, y, np.ones((8, 8))) == pytest.approx(global_metric(x, y))
    mask = np.zeros((8, 8))
    mask[:, :4] = 1
    z = x.copy()
    z[:, :, 4:] += 0.5
    assert masked_metric(z, x, mask) == 0.0
    with pytest.raises(ValueError, match="empty"):
        masked_metric(x, y, np.zeros((8, 8)))


def test_metric_report_aggregates():
    g = Rng(5)
    x, y = g.uniform(0, 1, size=(4, 3, 32, 32)), g.child(1).uniform(0, 1, size=(4, 3, 32, 32))
    rep = evaluate(x, y, list("abcd"), EMB, masks=np.ones((4, 32, 32)))
    agg = rep.aggregates()
    for c in ("ids", "psnr", "masked_l1"):
        vals = np.array([r[c] for r in rep.rows])
        assert abs(agg[c][0] - vals.mean()) < 1e-9 and abs(agg[c][1] - vals.std()) < 1e-9
    tsv = rep.to_tsv().splitlines()
    assert tsv[0] == "id\tids\tpsnr\tmasked_l1" and len(tsv) == 4 + 3
    assert "4 images" in rep.summary()
    assert MetricReport([{"id": "a", "ids": 0.5, "psnr": 20.0}]).aggregates()["ids"] == (0.5, 0.0)


# ---------------------------------------------------------------- benchmark


def test_expected_pass_law():
    assert expected_passes("cachekv", 100, 5) == 205
    for mech in ("spatial-concat", "channel-concat", "cross-attention"):
        assert expected_passes(mech, 100, 5) == 200
    assert token_load("spatial-concat", 5) == 6 and token_load("cachekv", 5) == 1


def test_bench_counters_follow_law():
    rep = bench_mechanisms(DESK_UNET, 3, 2, repeats=1, measure_memory=False)
    assert [r["mechanism"] for r in rep.rows] == list(MECHANISMS)
    assert all(r["law_ok"] for r in rep.rows)
    assert rep.row("cachekv")["unet_passes"] == 2 + 6
    assert rep.row("cachekv")["null_cache_passes"] == 1
    # main passes of every non-spatial mechanism carry the same query load; spatial carries (1 + N) times it
    base = rep.row("channel-concat")["attention_token_units"]
    assert rep.row("cross-attention")["attention_token_units"] == base
    assert rep.row("spatial-concat")["attention_token_units"] == 3 * base
    assert rep.to_tsv().count("\n") == 1 + len(MECHANISMS)
    assert "law ok" in rep.summary()


def test_bench_records_memory():
    rep = bench_mechanisms(DESK_UNET, 1, 1, repeats=1, mechanisms=("cachekv",))
    assert rep.row("cachekv")["peak_bytes"] > 0
