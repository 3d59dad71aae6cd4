import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qafnet import numerics as nx
from qafnet.errors import ContractError, ShapeError, TrainingError

from conftest import rel_error

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_pick():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(np.eye(2), a).data, a)
    assert np.array_equal(nx.matmul([[1.0, 0.0]], [[0.0], [5.0]]).data, [[0.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    oracle = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                oracle[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(nx.matmul(a, b).data, oracle, rtol=1e-14, atol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_array_equal(nx.softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]])
    np.testing.assert_array_equal(nx.softmax_rows([[1000.0, 1000.0]]).data, [[0.5, 0.5]])
    np.testing.assert_allclose(nx.softmax_rows([[0.0, np.log(3.0)]]).data, [[0.25, 0.75]], rtol=1e-15)


def test_softmax_mask_zeroes_entries():
    y = nx.softmax_rows([[1.0, 2.0, 3.0]], mask=np.array([[True, True, False]])).data
    assert y[0, 2] == 0.0
    np.testing.assert_allclose(y[0, :2], nx.softmax_rows([[1.0, 2.0]]).data[0], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, shift):
    y = nx.softmax_rows(x).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((y >= 0) & (y <= 1))
    np.testing.assert_allclose(nx.softmax_rows(x + shift).data, y, atol=1e-12)


def test_backward_sum_and_square():
    w = np.arange(6.0).reshape(2, 3)
    tape = nx.Tape()
    W = tape.leaf("W", w)
    np.testing.assert_array_equal(tape.backward(nx.reduce_sum(W))["W"], np.ones_like(w))
    tape = nx.Tape()
    W = tape.leaf("W", w)
    np.testing.assert_allclose(tape.backward(0.5 * nx.reduce_sum(W * W))["W"], w, rtol=1e-15)


def test_backward_unreached_leaf_is_exact_zero():
    tape = nx.Tape()
    a = tape.leaf("a", np.ones(3))
    tape.leaf("b", np.ones((2, 2)))
    g = tape.backward(nx.reduce_sum(a))
    assert np.array_equal(g["b"], np.zeros((2, 2)))


def test_backward_contract_errors():
    tape = nx.Tape()
    a = tape.leaf("a", np.ones(3))
    with pytest.raises(ContractError):
        tape.backward(a)
    with pytest.raises(ContractError):
        nx.Tape().backward(nx.reduce_sum(a))
    with pytest.raises(ContractError):
        tape.leaf("a", np.zeros(1))


def test_tensor_is_immutable():
    t = nx.Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def _gradcheck(build, params, tol=1e-6):
    def f(p):
        tape = nx.Tape()
        leaves = {k: tape.leaf(k, v) for k, v in p.items()}
        return build(leaves).item()

    tape = nx.Tape()
    leaves = {k: tape.leaf(k, v) for k, v in params.items()}
    grads = tape.backward(build(leaves))
    for name in params:
        fd = nx.finite_difference_grad(f, params, name)
        assert rel_error(grads[name], fd, floor=1e-6) < tol, name


@pytest.mark.parametrize("op", ["tanh", "sin", "cos", "exp", "neg"])
def test_unary_gradients(op):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    _gradcheck(lambda L: nx.reduce_sum(getattr(nx, op)(L["x"]) * w), {"x": x})


def test_broadcast_add_mul_gradients():
    rng = np.random.default_rng(2)
    params = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4,)), "c": rng.normal(size=(3, 1))}
    _gradcheck(lambda L: nx.reduce_sum(nx.tanh((L["a"] + L["b"]) * L["c"] - L["b"])), params)


def test_batched_matmul_softmax_gradients():
    rng = np.random.default_rng(3)
    params = {"x": rng.normal(size=(2, 3, 4)), "w": rng.normal(size=(4, 4))}

    def build(L):
        q = nx.matmul(L["x"], L["w"])
        a = nx.softmax_rows(nx.matmul(q, nx.swap_last(L["x"])))
        return nx.reduce_mean(nx.sin(nx.matmul(a, L["x"])))

    _gradcheck(build, params)


def test_reshape_take_rows_gradients():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(4, 4))

    def build(L):
        r = nx.take_rows(nx.reshape(L["x"], (3, 4)), [0, 2, 2, 1])
        return nx.reduce_sum(nx.tanh(r) * w)

    _gradcheck(build, {"x": rng.normal(size=(12,))})


def test_pinball_gradient_away_from_kink():
    y = np.array([0.0, 1.0, 2.0])
    _gradcheck(lambda L: nx.reduce_sum(nx.pinball(y, L["q"], 0.3)), {"q": np.array([0.5, 0.2, 2.7])})


def test_adam_zero_gradient_keeps_params():
    opt = nx.Adam(lr=0.1)
    p = {"w": np.array([1.0, -2.0])}
    out = opt.step(p, {"w": np.zeros(2)})
    assert np.array_equal(out["w"], p["w"])
    assert opt.step_count == 1


def test_adam_first_step_moves_by_lr():
    opt = nx.Adam(lr=0.1)
    out = opt.step({"w": np.array([0.0])}, {"w": np.array([1.0])})
    # bias-corrected m/sqrt(v) is exactly 1 on the first step
    np.testing.assert_allclose(out["w"], [-0.1 / (1.0 + 1e-8)], rtol=1e-15)


def test_adam_converges_on_quadratic():
    opt = nx.Adam(lr=0.1)
    p = {"w": np.array([0.0])}
    for _ in range(100):
        p = opt.step(p, {"w": 2.0 * (p["w"] - 3.0)})
    assert abs(p["w"][0] - 3.0) < 0.05


def test_adam_errors():
    opt = nx.Adam()
    with pytest.raises(TrainingError) as exc:
        opt.step({"w": np.zeros(2)}, {"w": np.array([0.0, np.nan])})
    assert exc.value.leaf_id == "w"
    with pytest.raises(ShapeError):
        opt.step({"w": np.zeros(2)}, {"w": np.zeros(3)})


@settings(max_examples=30, deadline=None)
@given(st.lists(finite, min_size=1, max_size=5))
def test_adam_step_count_and_moment_shapes(g):
    g = np.array(g)
    opt = nx.Adam()
    p = {"w": np.zeros_like(g)}
    for k in range(3):
        p = opt.step(p, {"w": g})
        assert opt.step_count == k + 1
        assert opt.m["w"].shape == opt.v["w"].shape == g.shape


def test_forward_backward_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))

    def run():
        tape = nx.Tape()
        W = tape.leaf("w", w)
        return tape.backward(nx.reduce_sum(nx.softmax_rows(nx.matmul(x, W))))["w"]

    assert np.array_equal(run(), run())


def test_pinball_kink_takes_zero_subgradient():
    tape = nx.Tape()
    q = tape.leaf("q", np.array([1.0, 2.0]))
    g = tape.backward(nx.reduce_sum(nx.pinball(np.array([1.0, 3.0]), q, 0.2)))["q"]
    assert np.array_equal(g, [0.0, -0.2])
