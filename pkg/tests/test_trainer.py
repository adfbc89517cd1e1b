import numpy as np
import pytest

from refkv import config, diffusion
from refkv.codec import LatentCodec
from refkv.synthfaces import random_identity, render_identity
from refkv.tensorcore import Rng
from refkv.trainer import Trainer, TrainingSet, fill_reference_slots, make_batch, restore


@pytest.fixture(scope="module")
def data():
    images, lists = {}, {}
    for k in range(4):
        names = [f"id{k}_r{j}" for j in range(3)]
        for name, img in zip(names, render_identity(random_identity(100 + k), 3)):
            images[name] = img
        for n in names:
            lists[n] = [m for m in names if m != n]
    return TrainingSet(images, lists)


def cfg(**kw):
    base = {"train.batch_size": 2, "steps": 4, "train.checkpoint_every": 0}
    base.update(kw)
    return config.load(None, base)


def test_training_set_validation():
    with pytest.raises(ValueError, match="no target"):
        TrainingSet({}, {"a": []})
    with pytest.raises(KeyError, match="'b'"):
        TrainingSet({"a": np.zeros((3, 32, 32))}, {"a": ["b"]})


def test_make_batch_shapes_and_determinism(data):
    codec = LatentCodec()
    a = make_batch(data, [0, 5], Rng(1), codec, 5)
    b = make_batch(data, [0, 5], Rng(1), codec, 5)
    assert a.z0.shape == (2, 4, 8, 8) and a.refs.shape == (2, 5, 4, 8, 8)
    assert np.array_equal(a.z_lq, b.z_lq) and np.array_equal(a.refs, b.refs)


def test_losses_finite_and_weights_move(data):
    tr = Trainer(cfg(), data)
    before = tr.model.checksum()
    rows = tr.run(3)
    assert len(rows) == 3 and all(np.isfinite(r["total"]) for r in rows)
    assert tr.model.checksum() != before and tr.step_count == 3


def test_resume_reproduces_next_step(data, tmp_path):
    straight = Trainer(cfg(), data)
    losses = [straight.step()["total"] for _ in range(3)]
    first = Trainer(cfg(), data)
    first.run(2, checkpoint_dir=tmp_path / "ckpt")
    resumed = Trainer.load(tmp_path / "ckpt", data)
    assert resumed.step_count == 2
    assert abs(resumed.step()["total"] - losses[2]) < 1e-6
    assert resumed.model.checksum() == straight.model.checksum()


def test_load_rejects_non_checkpoint(tmp_path):
    from refkv import io

    io.save_tensor_dir(tmp_path / "x", {"a": np.zeros(2, np.float32)}, {"kind": "other"})
    with pytest.raises(ValueError, match="not a checkpoint"):
        Trainer.load(tmp_path / "x")


def test_restore_shapes_and_seed(data):
    tr = Trainer(cfg(), data)
    lq = np.stack([data.images["id0_r0"], data.images["id1_r0"]])
    refs = np.stack([np.stack([data.images["id0_r1"]] * 5), np.stack([data.images["id1_r1"]] * 5)])
    g = diffusion.GuidanceConfig(1.5)
    a, z = restore(tr.model, tr.codec, lq, refs, 3, g, tr.sched, seed=4)
    b, _ = restore(tr.model, tr.codec, lq, refs, 3, g, tr.sched, seed=4)
    assert a.shape == (2, 3, 32, 32) and z.shape == (2, 4, 8, 8)
    assert np.array_equal(a, b)
    none, _ = restore(tr.model, tr.codec, lq, None, 3, g, tr.sched, seed=4)
    assert none.shape == a.shape


def test_fill_reference_slots_repeats_cyclically():
    refs = np.arange(2 * 2).reshape(2, 2, 1).astype(np.float32)
    out = fill_reference_slots(refs, 5)
    assert out.shape == (2, 5, 1)
    assert out[0, :, 0].tolist() == [0, 1, 0, 1, 0]
    assert np.array_equal(fill_reference_slots(refs, 2), refs) and fill_reference_slots(refs, 1).shape == (2, 2, 1)
    with pytest.raises(ValueError):
        fill_reference_slots(np.zeros((1, 0, 1)), 5)


def test_restore_with_one_reference_equals_repeated_five(data):
    tr = Trainer(cfg(), data)
    lq = data.images["id0_r0"][None]
    one = data.images["id0_r1"][None, None]
    g = diffusion.GuidanceConfig(1.5)
    a, _ = restore(tr.model, tr.codec, lq, one, 3, g, tr.sched, seed=1, slots=5)
    b, _ = restore(tr.model, tr.codec, lq, np.repeat(one, 5, axis=1), 3, g, tr.sched, seed=1)
    assert np.array_equal(a, b)
