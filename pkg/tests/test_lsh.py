import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hashshard.lsh import (DwtaFamily, FillPolicy, HashFamily, LshConfig, SelectionPolicy,
                           SrpFamily, build_index, dwta_hash, rebuild, reservoir_sample,
                           select_active, select_batch, srp_hash)
from hashshard.sparse import InputError, PackedRows, SparseVector
from oracles import dwta_reference, srp_bits_reference


def _bits_of(code, k_h):
    return [(code >> (k_h - 1 - j)) & 1 for j in range(k_h)]


def test_defaults():
    srp, dwta = LshConfig(), LshConfig(family="DWTA")
    assert (srp.hashes_per_table, srp.num_tables) == (9, 8)
    assert dwta.hashes_per_table == 6 and dwta.bits_per_hash == 4
    assert dwta.code_width == 24
    with pytest.raises(InputError, match="32"):
        LshConfig(family="DWTA", hashes_per_table=9)


def test_srp_planes_are_sparse_ternary():
    fam = SrpFamily.generate(LshConfig(hashes_per_table=16, num_tables=16), 500, seed=1)
    vals, counts = np.unique(fam.planes, return_counts=True)
    assert vals.tolist() == [-1, 0, 1]
    frac = counts / counts.sum()
    assert frac[1] == pytest.approx(2 / 3, abs=0.01)
    assert frac[0] == pytest.approx(1 / 6, abs=0.01)


@given(st.integers(0, 2 ** 31), st.integers(1, 30))
def test_srp_matches_sign_reference(seed, dim):
    cfg = LshConfig(hashes_per_table=5, num_tables=3)
    fam = SrpFamily.generate(cfg, dim, seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dim) * (rng.random(dim) < 0.5)
    ref = srp_bits_reference(fam.planes, x).reshape(3, 5)
    v = SparseVector.from_dense(x)
    for t in range(3):
        assert _bits_of(srp_hash(fam, t, v), 5) == ref[t].tolist()


def test_srp_zero_projection_is_bit_zero():
    fam = SrpFamily.generate(LshConfig(hashes_per_table=4, num_tables=2), 6, 0)
    assert srp_hash(fam, 0, SparseVector([], [], 6)) == 0
    assert srp_hash(fam, 1, SparseVector([], [], 6)) == 0


@given(st.integers(0, 2 ** 31), st.integers(1, 60), st.integers(2, 8))
def test_dwta_matches_definition(seed, dim, m):
    cfg = LshConfig(family="DWTA", hashes_per_table=3, num_tables=4, bin_size=m)
    fam = DwtaFamily.generate(cfg, dim, seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dim) * (rng.random(dim) < rng.uniform(0.05, 1))
    ref = dwta_reference(fam.windows, x, 3, 4, m)
    v = SparseVector.from_dense(x)
    assert [dwta_hash(fam, t, v) for t in range(4)] == ref


def test_dwta_all_zero_input_hits_sentinel():
    cfg = LshConfig(family="DWTA", hashes_per_table=2, num_tables=3, bin_size=8)
    fam = DwtaFamily.generate(cfg, 50, 3)
    v = SparseVector([], [], 50)
    assert all(dwta_hash(fam, t, v) == fam.sentinel_code for t in range(3))
    assert fam.sentinel_code == (8 << 4) | 8


def test_dwta_windows_cover_before_repeating():
    cfg = LshConfig(family="DWTA", hashes_per_table=4, num_tables=4, bin_size=8)
    fam = DwtaFamily.generate(cfg, 100, 0)
    first = fam.windows.reshape(-1)[:100]
    assert sorted(first.tolist()) == list(range(100))


@given(st.integers(0, 2 ** 31), st.floats(1e-3, 10.0))
def test_dwta_positive_scale_invariance(seed, c):
    cfg = LshConfig(family="DWTA", hashes_per_table=4, num_tables=4)
    fam = DwtaFamily.generate(cfg, 80, seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(80) * (rng.random(80) < 0.2)
    v = SparseVector.from_dense(x)
    assert [dwta_hash(fam, t, v) for t in range(4)] == \
        [dwta_hash(fam, t, v.scale(c)) for t in range(4)]


def test_hash_rejects_bad_arguments():
    fam = SrpFamily.generate(LshConfig(), 10, 0)
    with pytest.raises(InputError, match="dimension mismatch"):
        srp_hash(fam, 0, SparseVector([0], [1.0], 11))
    with pytest.raises(InputError, match="table"):
        srp_hash(fam, 8, SparseVector([0], [1.0], 10))


def _index(n=40, dim=16, seed=0, family="SRP", **kw):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n, dim))
    cfg = LshConfig(family=family, **kw)
    return build_index(W, owner=1, cfg=cfg, hash_seed=seed), W


@pytest.mark.parametrize("family", ["SRP", "DWTA"])
def test_index_places_every_neuron_once_per_table(family):
    idx, W = _index(family=family)
    for t in range(idx.config.num_tables):
        ids = sorted(i for bucket in idx.table(t).values() for i in bucket)
        assert ids == list(range(40))
        for code, bucket in idx.table(t).items():
            for j in bucket:
                assert idx.family.hash_rows(PackedRows.from_dense(W[j:j + 1]))[0, t] == code


def test_rebuild_keeps_family_unless_regenerated():
    idx, W = _index()
    same = rebuild(idx, W)
    assert same.same_tables(idx) and same.generation == 1
    assert same.family is idx.family
    moved = rebuild(idx, W, new_seed=99)
    assert moved.generation == 1 and moved.hash_seed == 99
    assert not np.array_equal(moved.family.planes, idx.family.planes)
    with pytest.raises(InputError):
        rebuild(idx, W[:10])


def test_stats_histogram_is_consistent():
    idx, _ = _index(n=64)
    for row in idx.stats():
        assert row["neurons"] == 64
        assert sum(int(s) * c for s, c in row["occupancy_histogram"].items()) == 64
        assert row["nonempty_buckets"] == sum(row["occupancy_histogram"].values())


def _queries(n, dim, seed):
    rng = np.random.default_rng(seed)
    return PackedRows.from_dense(rng.standard_normal((n, dim)) * (rng.random((n, dim)) < .5))


@given(st.integers(0, 1000), st.integers(1, 40), st.sampled_from(list(FillPolicy)),
       st.sampled_from(["SRP", "DWTA"]))
def test_selection_properties(seed, budget, fill, family):
    idx, _ = _index(n=40, dim=16, seed=seed % 7, family=family, hashes_per_table=3)
    keys = _queries(12, 16, seed)
    rng = np.random.default_rng(seed)
    forced_ids = [np.unique(rng.choice(40, size=int(rng.integers(0, 3)))) for _ in range(12)]
    forced = (np.concatenate([[0], np.cumsum([f.size for f in forced_ids])]),
              np.concatenate(forced_ids).astype(np.int32))
    off, ids = select_batch(idx, keys, budget, fill, np.random.default_rng(seed), forced)
    codes = idx.family.hash_rows(keys)
    for s in range(12):
        sel = ids[off[s]:off[s + 1]]
        assert np.all(np.diff(sel) > 0)
        assert set(forced_ids[s].tolist()) <= set(sel.tolist())
        cand = set()
        for t in range(idx.config.num_tables):
            cand |= set(idx.table(t).get(int(codes[s, t]), []))
        pool = cand | set(forced_ids[s].tolist())
        if fill is FillPolicy.UNIFORM_FILL:
            assert sel.size == max(min(budget, 40), forced_ids[s].size)
        else:
            assert set(sel.tolist()) <= pool
            assert sel.size == max(min(budget, len(pool)), forced_ids[s].size)


def test_selection_is_deterministic():
    idx, _ = _index()
    keys = _queries(20, 16, 1)
    a = select_batch(idx, keys, 5, FillPolicy.UNIFORM_FILL, np.random.default_rng(3))
    b = select_batch(idx, keys, 5, FillPolicy.UNIFORM_FILL, np.random.default_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_select_active_single_query():
    idx, W = _index()
    pol = SelectionPolicy(budget=6)
    got = select_active(idx, SparseVector.from_dense(W[3]), pol, np.random.default_rng(0))
    assert len(got) == 6 and 3 in got
    with pytest.raises(InputError):
        SelectionPolicy(budget=0)
    with pytest.raises(InputError, match="dimension mismatch"):
        select_active(idx, SparseVector([0], [1.0], 3), pol, np.random.default_rng(0))


def test_reservoir_small_cases():
    rng = np.random.default_rng(0)
    assert reservoir_sample([1, 2], 5, rng) == [1, 2]
    assert reservoir_sample([1, 2, 3], 0, rng) == []
    got = reservoir_sample(range(100), 10, rng)
    assert len(set(got)) == 10


def test_reservoir_inclusion_is_uniform():
    rng = np.random.default_rng(1)
    counts = np.zeros(10)
    trials = 20000
    for _ in range(trials):
        for x in reservoir_sample(range(10), 3, rng):
            counts[x] += 1
    assert np.all(np.abs(counts / trials - 0.3) < 0.015)


def test_colliding_index_reservoir_path_is_uniform():
    # all neurons share one bucket, so every query sees all of them as candidates
    idx = build_index(np.ones((20, 4)), 0, LshConfig(hashes_per_table=2, num_tables=2))
    keys = PackedRows.from_dense(np.ones((20000, 4)))
    off, ids = select_batch(idx, keys, 5, FillPolicy.STOP_EARLY, np.random.default_rng(2))
    assert np.all(np.diff(off) == 5)
    freq = np.bincount(ids, minlength=20) / 20000
    assert np.all(np.abs(freq - 0.25) < 0.015)
    assert math.isclose(freq.sum(), 5.0)
