import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metasd.evaluation import evaluate
from metasd.graph import build_filter_index, SplitData
from metasd.models import BACKBONES, init_params
from metasd.pruning import (SparseFormatError, compute_mask, export_sparse, load_sparse,
                            prune_count, random_mask, refresh_policy, sparsity_stats)

from oracles import random_store, random_triples


def test_worked_example():
    w = {"x": np.array([0.5, -0.1, 0.3, -0.7, 0.2])}
    mask = compute_mask(w, 0.4)
    assert mask.bits["x"].astype(int).tolist() == [1, 0, 1, 1, 0]
    assert mask.zeros == 2


def test_gamma_zero_keeps_everything_and_bad_gamma_raises():
    store = init_params("CP", 3, 5, 2, seed=0)
    assert compute_mask(store, 0.0).zeros == 0
    for bad in (1.0, -0.1):
        with pytest.raises(ValueError):
            compute_mask(store, bad)


def test_prune_count_uses_decimal_gamma():
    # 0.29 * 100 == 28.999999999999996 in binary floating point
    assert math.floor(0.29 * 100) == 28
    assert prune_count(0.29, 100) == 29
    assert prune_count(0.9, 7) == 6


def test_ties_are_broken_by_flat_index():
    mask = compute_mask({"a": np.array([1.0, 1.0, 1.0]), "b": np.array([1.0, 2.0])}, 0.5)
    assert mask.bits["a"].tolist() == [False, False, True]
    assert mask.bits["b"].tolist() == [True, True]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(BACKBONES), st.sampled_from([0.0, 0.3, 0.5, 0.9]),
       st.integers(0, 2**31 - 1), st.sampled_from(["global", "per-tensor"]))
def test_cardinality_dominance_and_idempotence(backbone, gamma, seed, scope):
    rng = np.random.default_rng(seed)
    store = random_store(backbone, int(rng.integers(2, 8)), int(rng.integers(1, 4)),
                         int(rng.integers(1, 6)), rng)
    mask = compute_mask(store, gamma, scope)
    if scope == "global":
        assert mask.zeros == math.floor(gamma * store.size + 1e-9)
        kept = np.concatenate([np.abs(store.tensors[k][mask.bits[k]]) for k in store.tensors])
        gone = np.concatenate([np.abs(store.tensors[k][~mask.bits[k]]) for k in store.tensors])
        if kept.size and gone.size:
            assert gone.max() <= kept.min()
    else:
        for k, t in store.tensors.items():
            assert np.count_nonzero(~mask.bits[k]) == prune_count(gamma, t.size)
    assert compute_mask(store, gamma, scope).equals(mask)
    # pruning the already-masked weights again selects the same entries
    assert compute_mask(store.view(mask), gamma, scope).equals(mask)


def test_random_mask_matches_cardinality_and_is_seeded():
    store = init_params("ComplEx", 4, 10, 3, seed=1)
    a = random_mask(store, 0.9, seed=3)
    assert a.zeros == compute_mask(store, 0.9).zeros
    assert a.equals(random_mask(store, 0.9, seed=3))
    assert not a.equals(random_mask(store, 0.9, seed=4))


def test_refresh_policy():
    dyn = SimpleNamespace(mask_mode="dynamic", refresh="epoch")
    assert refresh_policy(0, 3, dyn) and not refresh_policy(1, 3, dyn)
    assert refresh_policy(5, 3, SimpleNamespace(mask_mode="dynamic", refresh="step"))
    frozen = SimpleNamespace(mask_mode="frozen", refresh="epoch")
    assert refresh_policy(0, 0, frozen) and not refresh_policy(0, 1, frozen)


def test_mask_changes_when_magnitudes_reorder():
    w = {"x": np.array([0.5, 0.4, 0.3, 0.2])}
    before = compute_mask(w, 0.5)
    w["x"][3] = 2.0
    after = compute_mask(w, 0.5)
    assert not before.equals(after) and after.zeros == 2


def test_sparsity_stats_report_ten_percent_of_parameters():
    store = init_params("ComplEx", 2000, 100, 20, seed=0)
    stats = sparsity_stats(compute_mask(store, 0.9))
    assert stats["size"] == store.size == (100 + 2 * 20) * 2 * 2000
    assert stats["effective_params"] == store.size - math.floor(0.9 * store.size)
    assert stats["sparsity"] == pytest.approx(0.9, abs=1e-6)
    assert set(stats["per_tensor"]) == {"entity", "relation"}


@pytest.mark.parametrize("backbone", BACKBONES)
def test_sparse_export_round_trip(tmp_path, backbone):
    rng = np.random.default_rng(0)
    store = random_store(backbone, 7, 2, 3, rng)
    mask = compute_mask(store, 0.9)
    path = tmp_path / "model.msds"
    stored = export_sparse(store, mask, path, config={"gamma": 0.9})
    assert stored == store.size - math.floor(0.9 * store.size)
    loaded, loaded_mask, digest = load_sparse(path)
    assert loaded_mask.equals(mask) and len(digest) == 32
    for k, t in store.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[k], (t * mask.bits[k]).astype(np.float32))
    triples = random_triples(rng, 10, 7, 4)
    splits = SplitData(triples, triples[:0], triples, triples[:0], 7, 2, augmented=True)
    filt = build_filter_index(splits)
    a = evaluate(store.with_tensors({k: v.astype(np.float32).astype(float)
                                     for k, v in store.tensors.items()}), mask, triples, filt)
    b = evaluate(loaded, loaded_mask, triples, filt)
    assert a.ranks.tolist() == b.ranks.tolist()


def test_sparse_export_rejects_corruption(tmp_path):
    store = init_params("CP", 2, 3, 1, seed=0)
    path = tmp_path / "m.msds"
    export_sparse(store, compute_mask(store, 0.5), path)
    data = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "short").write_bytes(data[:-3])
    with pytest.raises(SparseFormatError, match="magic"):
        load_sparse(tmp_path / "bad")
    with pytest.raises(SparseFormatError, match="truncated"):
        load_sparse(tmp_path / "short")
