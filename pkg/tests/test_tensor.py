import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynflow import tensor as T
from oracles import central_diff, naive_matmul


def test_matmul_identity(backend):
    m = T.tensor([[3, 4], [5, 6]])
    assert np.array_equal(T.matmul(T.tensor(np.eye(2)), m), m)


def test_matmul_analytic(backend):
    assert T.matmul(T.tensor([[1, 2]]), T.tensor([[3], [4]])).tolist() == [[11.0]]


def test_matmul_matches_triple_loop(backend, rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(T.matmul(T.tensor(a), T.tensor(b)), naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.zeros(2, 3), T.zeros(2, 3))


def test_identity_associativity_is_exact(backend, rng):
    a, b = T.tensor(rng.standard_normal((4, 6))), T.tensor(rng.standard_normal((6, 3)))
    eye = T.tensor(np.eye(6))
    assert np.array_equal(T.matmul(T.matmul(a, eye), b), T.matmul(a, T.matmul(eye, b)))


def test_add_identity():
    assert T.add(T.tensor([[1, 1]]), T.tensor([[0, 0]])).tolist() == [[1.0, 1.0]]


def test_mul_matches_scalar_loop(rng):
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    ref = np.array([[a[i, j] * b[i, j] for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(T.mul(T.tensor(a), T.tensor(b)), ref, rtol=0, atol=1e-12)


def test_elementwise_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.sub(T.zeros(1, 2), T.zeros(2, 1))
    with pytest.raises(ValueError):
        T.elementwise(T.zeros(1, 1), T.zeros(1, 1), "div")


@given(arrays(np.float64, st.tuples(st.integers(0, 6), st.integers(0, 6)), elements=st.floats(-1e6, 1e6)))
def test_transpose_involution(a):
    t = T.tensor(a) if a.size else T.zeros(*a.shape)
    assert np.array_equal(T.transpose(T.transpose(t)), t)


def test_tensors_are_read_only():
    t = T.tensor([[1.0, 2.0]])
    with pytest.raises(ValueError):
        t[0, 0] = 3.0


def test_rank_above_two_rejected():
    with pytest.raises(T.ShapeError):
        T.tensor(np.zeros((2, 2, 2)))


def test_scalars_and_vectors_promote():
    assert T.tensor(3.0).shape == (1, 1)
    assert T.tensor([1, 2, 3]).shape == (1, 3)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_is_an_error():
    with pytest.raises(T.NonFiniteError):
        T.tensor([[np.nan]])
    big = T.tensor([[1e308]])
    with pytest.raises(T.NonFiniteError):
        T.scale(big, 10)
    with pytest.raises(T.NonFiniteError):
        T.matmul(big, T.tensor([[10.0]]))


def test_relu_example(backend):
    assert T.relu(T.tensor([-1, 2])).tolist() == [[0.0, 2.0]]


def test_softmax_symmetric():
    assert T.softmax_rows(T.tensor([[0, 0]])).tolist() == [[0.5, 0.5]]


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(T.softmax_rows(T.tensor(x)).sum(axis=1), 1.0, rtol=1e-12)


def test_sigmoid_derivative_at_zero(backend):
    h = 1e-6
    g = T.sigmoid_grad(T.tensor([[0.0]]), T.tensor([[1.0]]))[0, 0]
    fd = (T.sigmoid(T.tensor([[h]]))[0, 0] - T.sigmoid(T.tensor([[-h]]))[0, 0]) / (2 * h)
    assert g == 0.25
    assert abs(g - fd) < 1e-8


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)


UNARY = [
    ("relu", T.relu, T.relu_grad),
    ("sigmoid", T.sigmoid, T.sigmoid_grad),
    ("tanh", T.tanh, T.tanh_grad),
    ("softmax_rows", T.softmax_rows, T.softmax_rows_grad),
]


@pytest.mark.parametrize("name,fn,grad", UNARY, ids=[u[0] for u in UNARY])
@pytest.mark.parametrize("seed", range(5))
def test_activation_gradients_match_finite_differences(backend, name, fn, grad, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (3, 4))
    if name == "relu":  # keep clear of the kink
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    w = rng.standard_normal((3, 4))
    num = central_diff(lambda v: float((np.asarray(fn(T.tensor(v))) * w).sum()), x)
    ana = grad(T.tensor(x), T.tensor(w))
    assert _rel(ana, num) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_linear_gradients_match_finite_differences(backend, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.uniform(-2, 2, (2, 4)), rng.uniform(-2, 2, (4, 3)), rng.uniform(-2, 2, (1, 3))
    up = rng.standard_normal((2, 3))

    def loss(x_, w_, b_):
        return float((np.asarray(T.linear(T.tensor(x_), T.tensor(w_), T.tensor(b_))) * up).sum())

    dx, dw, db = T.linear_grads(T.tensor(x), T.tensor(w), T.tensor(up))
    assert _rel(dx, central_diff(lambda v: loss(v, w, b), x)) < 1e-6
    assert _rel(dw, central_diff(lambda v: loss(x, v, b), w)) < 1e-6
    assert _rel(db, central_diff(lambda v: loss(x, w, v), b)) < 1e-6


def test_binary_and_structural_gradients(rng):
    # d(a*b)/da = b; hcat/hsplit and sum_rows are linear
    a, b = rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, (2, 3))
    num = central_diff(lambda v: float(np.asarray(T.mul(T.tensor(v), T.tensor(b))).sum()), a)
    assert _rel(num, b) < 1e-6
    parts = T.hsplit(T.hcat([T.tensor(a), T.tensor(b)]), [3, 3])
    assert np.array_equal(parts[0], a) and np.array_equal(parts[1], b)
    rows = T.vsplit(T.vcat([T.tensor(a), T.tensor(b)]), [2, 2])
    assert np.array_equal(rows[1], b)
    np.testing.assert_allclose(T.sum_rows(T.tensor(a)), a.sum(axis=0, keepdims=True))


def test_split_width_errors():
    with pytest.raises(T.ShapeError):
        T.hsplit(T.zeros(1, 4), [1, 2])
    with pytest.raises(T.ShapeError):
        T.hcat([T.zeros(1, 2), T.zeros(2, 2)])


def test_single_precision_switch():
    T.set_default_dtype("float32")
    assert T.tensor([[1.0]]).dtype == np.float32
    assert T.linear(T.tensor([[1.0, 2.0]]), T.tensor([[1.0], [1.0]]), T.tensor([[0.0]])).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_default_dtype("float16")


@pytest.mark.parametrize("shape", [(0, 3), (3, 0), (1, 1), (5, 7)])
def test_backends_agree(shape):
    from dynflow import _kernels_py, kernels

    if kernels.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    from dynflow import _kernels

    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((shape[1], 4))
    b = rng.standard_normal((1, 4))
    g = rng.standard_normal((shape[0], 4))
    np.testing.assert_allclose(_kernels.linear_forward(x, w, b), _kernels_py.linear_forward(x, w, b), atol=1e-12)
    for p, q in zip(_kernels.linear_backward(x, w, g), _kernels_py.linear_backward(x, w, g)):
        np.testing.assert_allclose(p, q, atol=1e-12)
    assert np.array_equal(_kernels.relu(x), _kernels_py.relu(x))
    np.testing.assert_allclose(_kernels.sigmoid(x), _kernels_py.sigmoid(x), atol=1e-15)
    assert _kernels.all_finite(x) and not _kernels.all_finite(np.full((1, 1), np.inf))
