import numpy as np
import pytest
from hypothesis import given, strategies as st

from hashshard import layer as L
from hashshard.kernels import compiled_available, get_backend
from hashshard.layer import (Activation, LayerSnapshot, LayerSpec, NeuronShard, NonFiniteError,
                             OptimizerConfig, adam_step, backward_shard,
                             compute_output_distribution, cross_entropy, forward_shard,
                             label_positions, label_targets, output_error)
from hashshard.sparse import InputError, PackedRows
from oracles import softmax_masked, target_matrix

BACKENDS = ["python"] + (["cython"] if compiled_available() else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    monkeypatch.setattr(L, "K", get_backend(request.param))
    return request.param


def _inputs(rng, n, dim, density=0.5):
    mask = rng.random((n, dim)) < density
    X = np.where(mask, rng.standard_normal((n, dim)), 0.0)
    counts = mask.sum(axis=1)
    off = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    idx = np.nonzero(mask)[1].astype(np.int32)
    return PackedRows(off, idx, X[mask], dim), X, mask


def _active(rng, n, width, k):
    loc = np.concatenate([np.sort(rng.choice(width, k, replace=False)) for _ in range(n)])
    mask = np.zeros((n, width), dtype=bool)
    mask[np.repeat(np.arange(n), k), loc] = True
    return (np.arange(n + 1, dtype=np.int64) * k, loc.astype(np.int32)), mask


def _shard(rng, width, dim, offset=0, dtype=np.float64):
    return NeuronShard(0, offset, rng.standard_normal((width, dim)).astype(dtype),
                       rng.standard_normal(width).astype(dtype))


def test_layer_spec_validation():
    assert LayerSpec(10, 100, sparsity=0.05).shard_budget(2) == 3
    assert LayerSpec(10, 100, sparsity=0.05, per_shard_budget=7).shard_budget(2) == 7
    with pytest.raises(InputError):
        LayerSpec(10, 100, sparsity=0.0)
    with pytest.raises(InputError):
        LayerSpec(10, 10, sparsity=0.05)
    with pytest.raises(InputError):
        OptimizerConfig(lr=0)


@pytest.mark.parametrize("mode", ["active", "dense_sparse_input", "dense_full_input"])
def test_forward_backward_match_masked_reference(backend, mode):
    rng = np.random.default_rng(5)
    n, dim, width = 6, 11, 8
    density = 1.0 if mode == "dense_full_input" else 0.5
    rows, X, present = _inputs(rng, n, dim, density)
    if mode == "dense_full_input":
        rows = PackedRows.from_dense(X)
    shard = _shard(rng, width, dim, offset=20)
    if mode == "active":
        active, amask = _active(rng, n, width, 3)
    else:
        active, amask = None, np.ones((n, width), dtype=bool)
    snap = forward_shard(shard, rows, active, Activation.RELU)
    z = X @ shard.weights.T + shard.biases
    ref = np.maximum(z, 0)[amask]
    np.testing.assert_allclose(snap.activations, ref, rtol=1e-12, atol=1e-12)
    assert snap.ids.min() >= 20

    err = rng.standard_normal(int(amask.sum()))
    E = np.zeros((n, width))
    E[amask] = err
    in_err = backward_shard(shard, rows, active, err)
    np.testing.assert_allclose(shard.grad_w, E.T @ X, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(shard.grad_b, E.sum(axis=0), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(in_err, (E @ shard.weights)[present], rtol=1e-12, atol=1e-12)
    touched = (amask.astype(int).T @ present.astype(int)) > 0
    np.testing.assert_array_equal(shard.touched.astype(bool), touched)
    np.testing.assert_array_equal(shard.touched_rows.astype(bool), amask.any(axis=0))


def test_forward_rejects_bad_arguments():
    rng = np.random.default_rng(0)
    shard = _shard(rng, 4, 5)
    rows, _, _ = _inputs(rng, 2, 6)
    with pytest.raises(InputError, match="input dim"):
        forward_shard(shard, rows, None, Activation.RELU)
    rows, _, _ = _inputs(rng, 2, 5)
    bad = (np.array([0, 1, 2]), np.array([0, 4], dtype=np.int32))
    with pytest.raises(InputError, match="active id"):
        forward_shard(shard, rows, bad, Activation.RELU)


def test_empty_feature_rows_give_bias_only(backend):
    rng = np.random.default_rng(1)
    shard = _shard(rng, 4, 5)
    rows = PackedRows(np.zeros(3, dtype=np.int64), np.zeros(0, np.int32), np.zeros(0), 5)
    snap = forward_shard(shard, rows, (np.array([0, 2, 4]), np.array([0, 3, 1, 2], np.int32)),
                         Activation.SOFTMAX)
    np.testing.assert_allclose(snap.activations, shard.biases[[0, 3, 1, 2]])
    snap = forward_shard(shard, rows, None, Activation.RELU)
    np.testing.assert_allclose(snap.activations, np.tile(np.maximum(shard.biases, 0), 2))


def _gathered(rng, n, width, k, dense=False):
    if dense:
        act = (np.arange(n + 1, dtype=np.int64) * width,
               np.tile(np.arange(width, dtype=np.int32), n))
        mask = np.ones((n, width), dtype=bool)
    else:
        act, mask = _active(rng, n, width, k)
    z = rng.standard_normal(act[1].size) * 4
    snap = LayerSnapshot(act[0], act[1], z, width, np.diff(act[0])[None, :], dense=dense)
    Z = np.zeros((n, width))
    Z[mask] = z
    return snap, Z, mask


@pytest.mark.parametrize("dense", [False, True])
def test_softmax_and_error_match_reference(dense):
    rng = np.random.default_rng(2)
    n, width = 5, 12
    snap, Z, mask = _gathered(rng, n, width, 4, dense)
    labels = [snap.ids[snap.offsets[s]:snap.offsets[s + 1]][:2] for s in range(n)]
    labels[1] = labels[1][:1]
    p = compute_output_distribution(snap)
    P = softmax_masked(Z, mask)
    np.testing.assert_allclose(p, P[mask], rtol=1e-12)
    sums = np.add.reduceat(p, snap.offsets[:-1])
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)
    Y = target_matrix(labels, width)
    np.testing.assert_allclose(label_targets(snap, labels), Y[mask])
    err = output_error(snap, p, labels)
    np.testing.assert_allclose(err, (P - Y)[mask], atol=1e-12)
    assert snap.errors is err
    ce = cross_entropy(p, snap, labels)
    ref = -np.sum(Y * np.log(np.where(Y > 0, P, 1)), axis=1)
    np.testing.assert_allclose(ce, ref, rtol=1e-12)


def test_softmax_float32_sums_to_one():
    rng = np.random.default_rng(3)
    snap, _, _ = _gathered(rng, 50, 300, 40)
    snap.activations = (snap.activations * 10).astype(np.float32)
    p = compute_output_distribution(snap)
    assert p.dtype == np.float32
    np.testing.assert_allclose(np.add.reduceat(p.astype(np.float64), snap.offsets[:-1]), 1.0,
                               atol=1e-6)


def test_label_outside_active_set_is_an_error():
    rng = np.random.default_rng(4)
    snap, _, mask = _gathered(rng, 2, 10, 3)
    missing = int(np.flatnonzero(~mask[0])[0])
    with pytest.raises(AssertionError, match="not in the active set"):
        label_positions(snap, [[missing], [int(snap.ids[3])]])


def test_empty_active_output_set_is_an_error():
    snap = LayerSnapshot(np.array([0, 0, 1]), np.array([2], np.int32), np.array([1.0]), 5,
                         np.array([[0, 1]]))
    with pytest.raises(InputError, match="sample 0"):
        compute_output_distribution(snap)


def test_snapshot_check():
    ok = LayerSnapshot(np.array([0, 2]), np.array([1, 3], np.int32), np.zeros(2), 5,
                       np.array([[2]]))
    ok.check()
    with pytest.raises(InputError, match="sorted"):
        LayerSnapshot(np.array([0, 2]), np.array([3, 1], np.int32), np.zeros(2), 5,
                      np.array([[2]])).check()
    with pytest.raises(InputError, match="range"):
        LayerSnapshot(np.array([0, 1]), np.array([5], np.int32), np.zeros(1), 5,
                      np.array([[1]])).check()


def test_sparse_layer_gradient_matches_finite_differences(backend):
    """Fixed active sets: loss(W) = sum cross-entropy of a sparse softmax layer."""
    rng = np.random.default_rng(6)
    n, dim, width = 4, 7, 10
    rows, X, present = _inputs(rng, n, dim, 0.6)
    shard = _shard(rng, width, dim)
    active, amask = _active(rng, n, width, 4)
    labels = [active[1][active[0][s]:active[0][s] + 1] for s in range(n)]

    def loss():
        snap = forward_shard(shard, rows, active, Activation.SOFTMAX)
        snap.width = width
        return float(cross_entropy(compute_output_distribution(snap), snap, labels).sum())

    snap = forward_shard(shard, rows, active, Activation.SOFTMAX)
    snap.width = width
    err = output_error(snap, compute_output_distribution(snap), labels)
    backward_shard(shard, rows, active, err, want_input_error=False)
    h = 1e-5
    for (j, c) in [(j, c) for j in range(width) for c in range(dim)]:
        old = shard.weights[j, c]
        shard.weights[j, c] = old + h
        up = loss()
        shard.weights[j, c] = old - h
        down = loss()
        shard.weights[j, c] = old
        assert shard.grad_w[j, c] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)


def test_adam_is_lazy_and_touch_pure(backend):
    rng = np.random.default_rng(7)
    n, dim, width = 3, 9, 6
    rows, X, present = _inputs(rng, n, dim, 0.3)
    shard = _shard(rng, width, dim)
    before = shard.weights.copy()
    b_before = shard.biases.copy()
    active, amask = _active(rng, n, width, 2)
    backward_shard(shard, rows, active, rng.standard_normal(int(amask.sum())))
    touched = (amask.astype(int).T @ present.astype(int)) > 0
    adam_step(shard, OptimizerConfig(lr=1e-2))
    assert shard.step == 1
    # untouched weights are bit-identical, touched ones moved
    assert np.array_equal(shard.weights[~touched], before[~touched])
    assert np.all(shard.weights[touched] != before[touched])
    assert np.array_equal(shard.biases[~amask.any(0)], b_before[~amask.any(0)])
    assert np.all(shard.adam_m_w[~touched] == 0)
    assert not shard.touched.any() and not shard.grad_w.any()


def test_adam_first_step_size_is_lr():
    shard = NeuronShard(0, 0, np.zeros((2, 2)), np.zeros(2))
    shard.grad_w[:] = [[3.0, -0.5], [0, 0]]
    shard.touched[0] = 1
    shard.touched_rows[0] = 1
    adam_step(shard, OptimizerConfig(lr=0.1, epsilon=1e-12))
    np.testing.assert_allclose(shard.weights[0], [-0.1, 0.1], rtol=1e-9)
    assert np.all(shard.weights[1] == 0)


def test_non_finite_gradient_raises_with_location(backend):
    shard = NeuronShard(0, 40, np.zeros((3, 4)), np.zeros(3))
    shard.grad_w[2, 1] = np.inf
    shard.touched[2, 1] = 1
    shard.touched_rows[2] = 1
    with pytest.raises(NonFiniteError) as e:
        adam_step(shard, OptimizerConfig(), layer=1)
    assert (e.value.layer, e.value.neuron, e.value.coord) == (1, 42, 1)
    assert "input coordinate 1" in str(e.value)
    assert shard.step == 0


@given(st.integers(0, 2 ** 31), st.integers(1, 4))
def test_hogwild_chunks_give_the_same_forward(seed, workers):
    rng = np.random.default_rng(seed)
    rows, _, _ = _inputs(rng, 9, 12, 0.5)
    shard = _shard(rng, 10, 12)
    active, _ = _active(rng, 9, 10, 4)
    a = forward_shard(shard, rows, active, Activation.RELU, workers=1)
    b = forward_shard(shard, rows, active, Activation.RELU, workers=workers)
    np.testing.assert_array_equal(a.activations, b.activations)
