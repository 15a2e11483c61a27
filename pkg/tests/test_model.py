import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dice import model as M
from dice.analysis import fd_gradient, fd_hvp, gradient_rel_error

from conftest import SCALAR


def scalar_batch(z):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return M.Batch(np.ones((len(z), 1)), z)


def random_mlp_case(seed, sizes=(4, 5, 3), activation="tanh", b=6):
    rng = np.random.default_rng(seed)
    m = M.ModelSpec("mlp", sizes, activation=activation)
    theta = M.init_params(m, rng) + 0.1 * rng.standard_normal(m.d)
    batch = M.Batch(rng.standard_normal((b, sizes[0])), rng.integers(0, sizes[-1], b).astype(float))
    return m, theta, batch


def test_parameter_counts():
    assert SCALAR.d == 1
    assert M.ModelSpec("linear-regression", (4, 1)).d == 5
    assert M.ModelSpec("mlp", (32, 32, 10)).d == 32 * 32 + 32 + 32 * 10 + 10
    with pytest.raises(ValueError):
        M.ModelSpec("linear-regression", (4, 2))


def test_loss_examples():
    lin = M.ModelSpec("linear-regression", (3, 1))
    batch = M.Batch(np.ones((4, 3)), np.zeros(4))
    assert M.loss(lin, np.zeros(lin.d), batch) == 0.0
    logit = M.ModelSpec("logistic-regression", (2, 2))
    batch = M.Batch(np.array([[1.0, 2.0], [-1.0, 0.5]]), np.array([0.0, 1.0]))
    assert M.loss(logit, np.zeros(logit.d), batch) == pytest.approx(np.log(2), abs=1e-15)


def _straight_line_mlp_loss(theta, x, y, sizes):
    # written out layer by layer, without the library's unpack/forward helpers
    pos, a = 0, x
    for i in range(len(sizes) - 1):
        n0, n1 = sizes[i], sizes[i + 1]
        w = theta[pos : pos + n0 * n1].reshape(n0, n1)
        pos += n0 * n1
        b = theta[pos : pos + n1]
        pos += n1
        a = a @ w + b
        if i < len(sizes) - 2:
            a = np.tanh(a)
    total = 0.0
    for row, label in zip(a, y):
        total += np.log(np.sum(np.exp(row))) - row[int(label)]
    return total / len(y)


def test_mlp_forward_matches_independent_implementation():
    for seed in range(5):
        m, theta, batch = random_mlp_case(seed, sizes=(4, 7, 5, 3))
        ref = _straight_line_mlp_loss(theta, batch.x, batch.y, m.layer_sizes)
        assert M.loss(m, theta, batch) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_gradient_scalar_quadratic():
    assert M.gradient(SCALAR, np.array([3.0]), scalar_batch(1.0)) == pytest.approx([2.0], abs=0)


def test_gradient_zero_at_stationary_point():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 3))
    w_true = np.array([0.5, -1.0, 2.0])
    lin = M.ModelSpec("linear-regression", (3, 1), bias=False)
    batch = M.Batch(x, x @ w_true)
    assert np.linalg.norm(M.gradient(lin, w_true, batch)) < 1e-14


@pytest.mark.parametrize("kind,sizes,act", [
    ("linear-regression", (4, 1), "tanh"),
    ("logistic-regression", (4, 3), "tanh"),
    ("mlp", (4, 6, 3), "tanh"),
    ("mlp", (4, 5, 5, 2), "tanh"),
])
def test_gradient_matches_finite_differences(kind, sizes, act):
    rng = np.random.default_rng(7)
    m = M.ModelSpec(kind, sizes, activation=act)
    for _ in range(3):
        theta = 0.5 * rng.standard_normal(m.d)
        y = rng.standard_normal(5) if kind == "linear-regression" else rng.integers(0, sizes[-1], 5).astype(float)
        batch = M.Batch(rng.standard_normal((5, sizes[0])), y)
        assert gradient_rel_error(M.gradient(m, theta, batch), fd_gradient(m, theta, batch)) <= 1e-5


def test_hvp_scalar_and_linear_regression():
    assert M.hvp(SCALAR, np.array([0.3]), scalar_batch(1.0), np.array([5.0])) == pytest.approx([5.0], abs=0)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 4))
    lin = M.ModelSpec("linear-regression", (4, 1), bias=False)
    batch = M.Batch(x, rng.standard_normal(8))
    h = x.T @ x / 8
    v = rng.standard_normal(4)
    np.testing.assert_allclose(M.hvp(lin, rng.standard_normal(4), batch, v), h @ v, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(M.dense_hessian(lin, np.zeros(4), batch), h, rtol=1e-13, atol=1e-14)
    assert M.dense_hessian(SCALAR, np.zeros(1), scalar_batch(4.0)).tolist() == [[1.0]]


def test_hvp_matches_finite_differences_mlp():
    for seed in range(4):
        m, theta, batch = random_mlp_case(seed)
        v = np.random.default_rng(seed + 100).standard_normal(m.d)
        hv, fd = M.hvp(m, theta, batch, v), fd_hvp(m, theta, batch, v)
        assert np.linalg.norm(hv - fd) <= 1e-4 * np.linalg.norm(fd)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_hvp_is_linear(seed, a, b):
    m, theta, batch = random_mlp_case(seed % 50)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, m.d))
    lhs = M.hvp(m, theta, batch, a * u + b * v)
    rhs = a * M.hvp(m, theta, batch, u) + b * M.hvp(m, theta, batch, v)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * (1 + np.abs(rhs).max()))


def test_quadratic_expansion_exact_for_least_squares():
    rng = np.random.default_rng(4)
    lin = M.ModelSpec("linear-regression", (3, 1))
    batch = M.Batch(rng.standard_normal((6, 3)), rng.standard_normal(6))
    theta, v = rng.standard_normal((2, lin.d))
    g, hv = M.gradient(lin, theta, batch), M.hvp(lin, theta, batch, v)
    lhs = M.loss(lin, theta + v, batch)
    rhs = M.loss(lin, theta, batch) + g @ v + 0.5 * v @ hv
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_dense_hessian_mlp_symmetric_and_consistent():
    m, theta, batch = random_mlp_case(9, sizes=(5, 6, 2))
    assert m.d == 50
    h = M.dense_hessian(m, theta, batch)
    assert np.max(np.abs(h - h.T)) <= 1e-8
    rng = np.random.default_rng(0)
    for _ in range(10):
        v = rng.standard_normal(m.d)
        np.testing.assert_allclose(h @ v, M.hvp(m, theta, batch, v), atol=1e-12)


def test_dense_hessian_cap():
    m = M.ModelSpec("mlp", (40, 50, 10))
    with pytest.raises(M.HessianTooLarge):
        M.dense_hessian(m, np.zeros(m.d), M.Batch(np.zeros((1, 40)), np.zeros(1)))


def test_sgd_displacement_examples():
    assert M.sgd_displacement(SCALAR, np.array([1.0]), scalar_batch(1.0), 0.1).tolist() == [0.0]
    assert M.sgd_displacement(SCALAR, np.array([3.0]), scalar_batch(1.0), 0.1) == pytest.approx([-0.2], abs=1e-16)
    m, theta, batch = random_mlp_case(3)
    per = [M.sgd_displacement(m, theta, batch.subset([i]), 0.05) for i in range(len(batch))]
    np.testing.assert_allclose(M.sgd_displacement(m, theta, batch, 0.05), np.mean(per, axis=0), atol=1e-15)
    with pytest.raises(ValueError):
        M.sgd_displacement(m, theta, batch, 0.0)


def test_shape_errors():
    m = M.ModelSpec("logistic-regression", (3, 2))
    with pytest.raises(M.ShapeError):
        M.loss(m, np.zeros(m.d), M.Batch(np.zeros((2, 4)), np.zeros(2)))
    with pytest.raises(M.ShapeError):
        M.gradient(m, np.zeros(m.d + 1), M.Batch(np.zeros((2, 3)), np.zeros(2)))


def test_model_spec_json_round_trip():
    m = M.ModelSpec("mlp", (3, 4, 2), activation="relu")
    assert M.ModelSpec.from_json(m.to_json()) == m
