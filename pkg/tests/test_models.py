import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asofed.models import (EmptyInputError, ModelSpec, ParamSet, ShapeError, axpy,
                           finite_difference_grad, from_bytes, gradient_relative_error,
                           init_params, loss_and_grad, loss_only, predict, to_bytes)

FAMILIES = ("linear-regression", "logistic-classification", "mlp-1hidden")


def make_spec(family, d=4, o=3, h=5):
    if family == "linear-regression":
        return ModelSpec(family, d, 1)
    if family == "logistic-classification":
        return ModelSpec(family, d, o)
    return ModelSpec(family, d, o, h)


def make_batch(spec, n, rng):
    X = rng.normal(size=(n, spec.input_dim))
    if spec.task == "regression":
        return X, rng.normal(size=n)
    k = max(spec.output_dim, 2)
    return X, rng.integers(0, k, size=n)


# -- independent reference losses (written without the package's forward pass)

def ref_loss(spec, flat, X, y):
    p = ParamSet(flat, spec.shape_signature)
    if spec.family == "mlp-1hidden":
        W1, b1, W2, b2 = p.layers
        Z = np.tanh(X @ W1.T + b1) @ W2.T + b2
    else:
        W, b = p.layers
        Z = X @ W.T + b
    if spec.task == "regression":
        return 0.5 * np.mean((Z[:, 0] - y) ** 2)
    if spec.output_dim == 1:
        z = Z[:, 0]
        return np.mean(np.logaddexp(0, z) - y * z)
    lse = np.log(np.sum(np.exp(Z - Z.max(1, keepdims=True)), 1)) + Z.max(1)
    return np.mean(lse - Z[np.arange(len(y)), y])


def ref_fd(spec, flat, X, y, h=1e-5):
    g = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        g[i] = (ref_loss(spec, flat + e, X, y) - ref_loss(spec, flat - e, X, y)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


# -- ParamSet ---------------------------------------------------------------

def test_paramset_rejects_wrong_size():
    with pytest.raises(ShapeError):
        ParamSet(np.zeros(5), ((2, 2),))


def test_layers_are_views_of_flat():
    p = ParamSet.from_layers([np.ones((2, 3)), np.zeros((1, 2))])
    p.layers[0][1, 2] = 7.0
    assert p.flat[5] == 7.0
    assert p.shape_signature == ((2, 3), (1, 2))


def test_combining_mismatched_signatures_fails():
    a = ParamSet.from_layers([np.ones((2, 2))])
    b = ParamSet.from_layers([np.ones((1, 4))])
    with pytest.raises(ShapeError):
        axpy(a, 1.0, b)


def test_axpy_examples():
    w = ParamSet.from_layers([np.array([1.0, -2.0, 3.0])])
    g = ParamSet.from_layers([np.array([5.0, 5.0, 5.0])])
    assert np.array_equal(axpy(w, 0.0, g).flat, w.flat)
    neg = ParamSet(-w.flat, w.shape_signature)
    assert np.array_equal(axpy(w, 1.0, neg).flat, np.zeros(3))
    one = axpy(ParamSet.from_layers([[1.0]]), 0.5, ParamSet.from_layers([[2.0]]))
    assert one.flat.tolist() == [2.0]


def test_binary_snapshot_layout():
    p = ParamSet.from_layers([np.arange(6.0).reshape(2, 3), np.array([[0.5]])])
    raw = to_bytes(p)
    expect = struct.pack("<III", 2, 2, 3) + struct.pack("<II", 1, 1)
    expect += struct.pack("<7d", 0, 1, 2, 3, 4, 5, 0.5)
    assert raw == expect


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4),
       st.integers(0, 2**32 - 1))
def test_snapshot_roundtrip(sig, seed):
    rng = np.random.default_rng(seed)
    p = ParamSet.from_layers([rng.normal(size=s) for s in sig])
    q = from_bytes(to_bytes(p))
    assert q.shape_signature == p.shape_signature
    assert np.array_equal(q.flat, p.flat)


def test_truncated_snapshot_rejected():
    raw = to_bytes(ParamSet.from_layers([np.ones((2, 2))]))
    with pytest.raises(ValueError):
        from_bytes(raw[:-3])


# -- ModelSpec / init -------------------------------------------------------

def test_mlp_without_hidden_units_is_invalid():
    with pytest.raises(ValueError, match="invalid dimension"):
        ModelSpec("mlp-1hidden", 3, 2, 0)


def test_init_is_deterministic_per_seed():
    spec = ModelSpec("linear-regression", 3, 1)
    a, b = init_params(spec, 7), init_params(spec, 7)
    assert np.array_equal(a.flat, b.flat)


def test_init_differs_across_seeds():
    spec = ModelSpec("logistic-classification", 2, 2)
    assert not np.array_equal(init_params(spec, 1).flat, init_params(spec, 2).flat)


@pytest.mark.parametrize("family", FAMILIES)
def test_init_within_glorot_range(family):
    spec = make_spec(family, d=30, o=4, h=20)
    p = init_params(spec, 0)
    for (rows, cols), layer in zip(p.shape_signature, p.layers):
        if rows == 1:
            assert np.all(layer == 0)  # biases start at zero
        else:
            s = np.sqrt(6.0 / (rows + cols))
            assert np.all(np.abs(layer) <= s)
            assert np.abs(layer).max() > 0.5 * s


# -- losses and gradients ---------------------------------------------------

def test_zero_linear_model_on_zero_targets():
    spec = ModelSpec("linear-regression", 3, 1)
    p = ParamSet(np.zeros(4), spec.shape_signature)
    res = loss_and_grad(spec, p, np.ones((5, 3)), np.zeros(5))
    assert res.loss == 0.0
    assert np.all(res.grad.flat == 0.0)
    assert res.n_samples == 5


def test_linear_loss_hand_value():
    # w = [1, 2], b = 0.5; x = [1, 1] -> 3.5 vs target 1.5: 1/2 * 2^2 = 2
    spec = ModelSpec("linear-regression", 2, 1)
    p = ParamSet(np.array([1.0, 2.0, 0.5]), spec.shape_signature)
    res = loss_and_grad(spec, p, np.array([[1.0, 1.0]]), np.array([1.5]))
    assert res.loss == pytest.approx(2.0)
    assert res.grad.flat.tolist() == pytest.approx([2.0, 2.0, 2.0])


def test_perfect_regressor_has_zero_loss(rng):
    spec = ModelSpec("linear-regression", 4, 1)
    p = init_params(spec, 3)
    X = rng.normal(size=(10, 4))
    assert loss_only(spec, p, X, predict(spec, p, X)) == 0.0


def test_cross_entropy_vanishes_for_confident_correct_prediction():
    spec = ModelSpec("logistic-classification", 1, 2)
    losses = []
    for scale in (1.0, 10.0, 100.0):
        p = ParamSet(np.array([-scale, scale, 0.0, 0.0]), spec.shape_signature)
        losses.append(loss_only(spec, p, np.array([[1.0]]), np.array([1])))
    assert losses[0] > losses[1] > losses[2] >= 0
    assert losses[2] < 1e-80


def test_logistic_single_sample_matches_finite_differences(rng):
    spec = ModelSpec("logistic-classification", 5, 3)
    p = init_params(spec, 4)
    X, y = make_batch(spec, 1, rng)
    assert gradient_relative_error(spec, p, X, y, h=1e-5) <= 1e-4


@pytest.mark.parametrize("family", FAMILIES)
def test_gradient_matches_independent_reference(family, rng):
    spec = make_spec(family)
    p = init_params(spec, 11)
    p.flat[:] += rng.normal(scale=0.3, size=p.flat.size)
    X, y = make_batch(spec, 7, rng)
    res = loss_and_grad(spec, p, X, y)
    assert res.loss == pytest.approx(ref_loss(spec, p.flat, X, y), rel=1e-12)
    assert rel_err(res.grad.flat, ref_fd(spec, p.flat, X, y)) <= 1e-6


def test_binary_sigmoid_head_gradient(rng):
    spec = ModelSpec("logistic-classification", 3, 1)
    p = init_params(spec, 2)
    X = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, size=6)
    g = loss_and_grad(spec, p, X, y).grad.flat
    assert rel_err(g, ref_fd(spec, p.flat, X, y)) <= 1e-6


@given(st.sampled_from(FAMILIES), st.integers(1, 6), st.integers(1, 9), st.integers(0, 10**6))
def test_gradient_property(family, d, n, seed):
    rng = np.random.default_rng(seed)
    spec = make_spec(family, d=d, o=3, h=4)
    p = init_params(spec, seed)
    p.flat[:] += rng.normal(scale=0.5, size=p.flat.size)
    X, y = make_batch(spec, n, rng)
    fd = finite_difference_grad(spec, p, X, y)
    g = loss_and_grad(spec, p, X, y).grad.flat
    assert rel_err(g, fd) <= 1e-4 or np.linalg.norm(g - fd) < 1e-9


@given(st.sampled_from(FAMILIES), st.integers(0, 10**6))
def test_loss_and_grad_is_pure(family, seed):
    rng = np.random.default_rng(seed)
    spec = make_spec(family)
    p = init_params(spec, seed)
    X, y = make_batch(spec, 5, rng)
    before = p.flat.copy()
    a = loss_and_grad(spec, p, X, y)
    b = loss_and_grad(spec, p, X, y)
    assert a.loss == b.loss
    assert np.array_equal(a.grad.flat, b.grad.flat)
    assert np.array_equal(p.flat, before)
    assert a.grad.shape_signature == spec.shape_signature


def test_dimension_mismatch_is_a_shape_error(rng):
    spec = ModelSpec("logistic-classification", 3, 2)
    with pytest.raises(ShapeError):
        loss_and_grad(spec, init_params(spec, 0), rng.normal(size=(4, 5)), np.zeros(4, int))


def test_empty_batch_is_rejected():
    spec = ModelSpec("logistic-classification", 3, 2)
    with pytest.raises(EmptyInputError):
        loss_and_grad(spec, init_params(spec, 0), np.zeros((0, 3)), np.zeros(0, int))
