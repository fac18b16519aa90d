import numpy as np
import pytest
from hypothesis import given, strategies as st

from hashshard.sparse import (Batch, DataRecord, InputError, PackedRows, SparseVector,
                              sparse_dot, validate_record)


def test_construction_rejects_unsorted_indices():
    with pytest.raises(InputError, match="strictly increasing"):
        SparseVector([3, 1], [1.0, 2.0], 5)


def test_construction_rejects_out_of_range():
    with pytest.raises(InputError, match="out of range"):
        SparseVector([1, 5], [1.0, 2.0], 5)


def test_empty_vector_is_legal():
    v = SparseVector([], [], 7)
    assert v.nnz == 0
    assert sparse_dot(v, np.ones(7)) == 0.0


def test_vectors_are_immutable():
    v = SparseVector([0, 2], [1.0, 2.0], 3)
    with pytest.raises(ValueError):
        v.values[0] = 5.0


def test_sparse_dot_dimension_mismatch():
    with pytest.raises(InputError, match="dimension mismatch"):
        sparse_dot(SparseVector([0], [1.0], 3), np.ones(4))


def test_batch_capacity():
    r = DataRecord(SparseVector([0], [1.0], 2), [1])
    assert len(Batch((r, r), 4)) == 2
    with pytest.raises(InputError):
        Batch((r, r, r), 2)
    with pytest.raises(InputError):
        Batch((), 2)


@st.composite
def sparse_and_dense(draw):
    dim = draw(st.integers(1, 40))
    idx = sorted(draw(st.sets(st.integers(0, dim - 1), max_size=dim)))
    floats = st.floats(-1e3, 1e3, allow_nan=False)
    vals = draw(st.lists(floats, min_size=len(idx), max_size=len(idx)))
    dense = draw(st.lists(floats, min_size=dim, max_size=dim))
    return SparseVector(idx, vals, dim), np.array(dense)


@given(sparse_and_dense())
def test_sparse_dot_matches_scattered_dense(pair):
    a, b = pair
    buf = a.to_dense()
    # same evaluation order as the sparse loop: only the stored entries, ascending
    ref = 0.0
    for i in a.indices:
        ref += buf[i] * b[i]
    assert sparse_dot(a, b) == ref
    assert sparse_dot(a, b) == pytest.approx(float(buf @ b), rel=1e-12, abs=1e-9)


@st.composite
def records(draw):
    """Records with a known verdict: either clean or broken in one way."""
    fdim = draw(st.integers(2, 20))
    ldim = draw(st.integers(1, 10))
    idx = sorted(draw(st.sets(st.integers(0, fdim - 1), min_size=1, max_size=fdim)))
    labels = draw(st.lists(st.integers(0, ldim - 1), min_size=1, max_size=3))
    fault = draw(st.sampled_from(["none", "unsorted", "range", "label", "nolabel", "dim"]))
    if fault == "unsorted" and len(idx) >= 2:
        idx[0], idx[1] = idx[1], idx[0]
    elif fault == "unsorted":
        fault = "none"
    if fault == "range":
        idx[-1] = fdim + draw(st.integers(0, 5))
    if fault == "label":
        labels[0] = ldim + draw(st.integers(0, 5))
    if fault == "nolabel":
        labels = []
    vec_dim = fdim + 1 if fault == "dim" else fdim
    vec = SparseVector(idx, np.ones(len(idx)), vec_dim, check=False)
    return DataRecord(vec, labels), fdim, ldim, fault == "none"


@given(records())
def test_validate_record_accepts_exactly_the_clean_ones(case):
    rec, fdim, ldim, clean = case
    v = validate_record(rec, fdim, ldim)
    assert (v is None) == clean


def test_violation_names_the_position():
    rec = DataRecord(SparseVector([0, 4, 2], [1, 1, 1], 9, check=False), [0])
    v = validate_record(rec, 9, 3)
    assert v.invariant == "indices not strictly increasing"
    assert v.position == 2


def test_packed_rows_round_trip():
    dense = np.array([[0, 1.5, 0], [2.0, 0, 0], [0, 0, 0]])
    vecs = [SparseVector.from_dense(r) for r in dense]
    rows = PackedRows.from_vectors(vecs, 3, dtype=np.float64)
    assert rows.n_rows == 3 and rows.nnz == 2
    np.testing.assert_array_equal(rows.to_dense(), dense)
    np.testing.assert_array_equal(rows.to_scipy().toarray(), dense)
    assert rows.sparse_vector(0) == vecs[0]
    full = PackedRows.from_dense(dense)
    assert full.is_full() and not rows.is_full()
