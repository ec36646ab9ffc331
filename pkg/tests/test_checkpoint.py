import numpy as np
import pytest

from metasd.checkpoint import (CheckpointError, from_bytes, load_checkpoint, save_checkpoint,
                               to_bytes)
from metasd.synthetic import make_synthetic_kg
from metasd.training import TrainConfig, train


def _splits():
    ds = make_synthetic_kg(n_entities=20, n_relations=4, n_train=300, n_valid=30, n_test=30,
                           n_clusters=4, domain_clusters=2, seed=5)
    return ds.splits(30, 5)


def _cfg(**kw):
    base = dict(dim=6, gamma=0.6, epochs=4, batch_size=50, quiz_size=30, mu=0.05,
                init_scale=0.1, eval_every=2, seed=11)
    base.update(kw)
    return TrainConfig(**base)


def test_round_trip_preserves_everything(tmp_path):
    state = train(_splits(), _cfg(epochs=2, student_storage="separate"))
    path = tmp_path / "ck.msdk"
    save_checkpoint(path, state)
    back = load_checkpoint(path)
    assert back.config == state.config
    assert (back.epoch, back.step) == (state.epoch, state.step)
    assert back.history == state.history
    assert back.mask.equals(state.mask) and back.mask.refreshed_at == state.mask.refreshed_at
    for k in state.params.tensors:
        assert np.array_equal(back.params.tensors[k], state.params.tensors[k])
        assert np.array_equal(back.student[k], state.student[k])
        for which in ("student", "teacher"):
            assert np.array_equal(back.opt.accumulators[which][k],
                                  state.opt.accumulators[which][k])
    assert to_bytes(back) == to_bytes(state)


def test_same_seed_gives_identical_bytes_and_resume_matches(tmp_path):
    splits = _splits()
    full = train(splits, _cfg())
    again = train(splits, _cfg())
    assert to_bytes(full) == to_bytes(again)

    half = train(splits, _cfg(epochs=2))
    save_checkpoint(tmp_path / "half.msdk", half)
    resumed = train(splits, _cfg(), state=load_checkpoint(tmp_path / "half.msdk"))
    assert to_bytes(resumed) == to_bytes(full)
    assert resumed.history == full.history


def test_corrupt_checkpoints_are_rejected(tmp_path):
    data = to_bytes(train(_splits(), _cfg(epochs=1)))
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError):
        from_bytes(data[:20])
    bumped = bytearray(data)
    bumped[4] = 9
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(bytes(bumped))
