"""Autodiff engine: forward oracles, gradient checks, graph mechanics."""

import numpy as np
import pytest

from peftlab import tensor as T
from peftlab.errors import ContractError, NumericError, ShapeError

from helpers import check_grads, random_inputs

N_SEEDS = 20


def test_storage_is_float32():
    t = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.data.dtype == np.float32
    out = T.matmul(t, t)
    assert out.data.dtype == np.float32


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4)).astype(np.float32)
    b = rng.normal(size=(4, 5)).astype(np.float32)
    want = np.zeros((3, 5), dtype=np.float64)
    for i in range(3):
        for j in range(5):
            acc = 0.0
            for k in range(4):
                acc += float(a[i, k]) * float(b[k, j])
            want[i, j] = acc
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    np.testing.assert_allclose(got, want.astype(np.float32), rtol=1e-6)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_batched_broadcast():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
    b = rng.normal(size=(5, 6)).astype(np.float32)
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    np.testing.assert_allclose(got, (a.astype(np.float64) @ b).astype(np.float32),
                               rtol=1e-6)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_matmul(seed):
    a, b = random_inputs([(3, 4), (4, 2)], seed)
    check_grads(lambda x, y: T.matmul(x, y), [a, b], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_matmul_batched(seed):
    a, b = random_inputs([(2, 3, 4), (4, 2)], seed)
    check_grads(lambda x, y: T.matmul(x, y), [a, b], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_add_subtract_broadcast(seed):
    a, b = random_inputs([(3, 5), (5,)], seed)
    check_grads(lambda x, y: T.add(x, y), [a, b], seed)
    check_grads(lambda x, y: T.subtract(x, y), [a, b], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_hadamard_divide(seed):
    a, b = random_inputs([(4, 3), (4, 3)], seed)
    b = np.where(np.abs(b) < 0.3, b + np.sign(b + 0.01), b).astype(np.float32)
    check_grads(lambda x, y: T.hadamard(x, y), [a, b], seed)
    check_grads(lambda x, y: T.divide(x, y), [a, b], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_scale_exp(seed):
    (a,) = random_inputs([(3, 4)], seed)
    check_grads(lambda x: T.scale(x, -0.7), [a], seed)
    check_grads(lambda x: T.exp(x), [a], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_activations(seed):
    (a,) = random_inputs([(4, 6)], seed, avoid_kinks=True)
    check_grads(lambda x: T.relu(x), [a], seed)
    check_grads(lambda x: T.gelu(x), [a], seed)
    check_grads(lambda x: T.sigmoid(x), [a], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_softmax(seed):
    (a,) = random_inputs([(3, 2, 5)], seed)
    check_grads(lambda x: T.softmax(x), [a], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_layer_norm(seed):
    x, g, b = random_inputs([(2, 3, 6), (6,), (6,)], seed)
    check_grads(lambda *ts: T.layer_norm(*ts), [x, g, b], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_column_l2_norm(seed):
    (w,) = random_inputs([(5, 4)], seed)
    w = w + np.sign(w + 0.01).astype(np.float32)  # keep columns off zero
    check_grads(lambda x: T.column_l2_norm(x), [w], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_concat_slice_reshape_transpose(seed):
    a, b = random_inputs([(2, 3, 4), (2, 2, 4)], seed)
    check_grads(lambda x, y: T.concat_rows(x, y), [a, b], seed)
    check_grads(lambda x: T.slice_axis(x, 1, 1, 3), [a], seed)
    check_grads(lambda x: T.reshape(x, (6, 4)), [a], seed)
    check_grads(lambda x: T.transpose(x), [a], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_reductions_broadcast(seed):
    (a,) = random_inputs([(3, 4, 2)], seed)
    check_grads(lambda x: T.sum_axis(x, 1, keepdims=True), [a], seed)
    check_grads(lambda x: T.mean_axis(x, 0), [a], seed)
    (b,) = random_inputs([(1, 4)], seed)
    check_grads(lambda x: T.broadcast_to(x, (3, 4)), [b], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_embedding(seed):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(7, 4)).astype(np.float32)
    ids = rng.integers(0, 7, size=(2, 5))
    check_grads(lambda t: T.embedding(t, ids), [table], seed)


@pytest.mark.parametrize("seed", range(N_SEEDS))
def test_grad_log_softmax_nll(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 3)).astype(np.float32)
    labels = rng.integers(0, 3, size=6)
    for reduction in ("mean", "sum"):
        leaf = T.Tensor(logits, requires_grad=True)
        loss = T.log_softmax_nll(leaf, labels, reduction)
        T.backward(loss)
        fd = T.finite_diff_grad(
            lambda t: T.log_softmax_nll(t, labels, reduction).item(),
            T.Tensor(logits))
        assert T.grad_close(leaf.grad, fd.data)


def test_log_softmax_nll_matches_manual_value():
    logits = T.Tensor([[2.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 1])
    got = T.log_softmax_nll(logits, labels, "mean").item()
    want = float(np.mean([np.log(1 + np.exp(-2.0)), np.log(1 + np.exp(-1.0))]))
    assert abs(got - want) < 1e-6


def test_backward_requires_scalar():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        T.backward(y)


def test_backward_accumulates_until_zeroed():
    x = T.Tensor([3.0], requires_grad=True)
    for _ in range(2):
        T.backward(T.sum_all(T.hadamard(x, x)))
    np.testing.assert_allclose(x.grad, [12.0])  # 6 + 6
    x.zero_grad()
    T.backward(T.sum_all(T.hadamard(x, x)))
    np.testing.assert_allclose(x.grad, [6.0])


def test_each_node_visited_once():
    calls = {"n": 0}
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    y = T.hadamard(x, x)
    orig = y.node.pullback

    def counting(g):
        calls["n"] += 1
        return orig(g)

    y.node.pullback = counting
    z = T.add(y, y)  # y consumed twice; its pullback must still run once
    T.backward(T.sum_all(z))
    assert calls["n"] == 1
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_interior_grads_released_leaf_grads_kept():
    x = T.Tensor(np.ones(3), requires_grad=True)
    h = T.scale(x, 2.0)
    out = T.sum_all(h)
    T.backward(out)
    assert x.grad is not None
    assert h.grad is None


def test_no_grad_suspends_recording():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_constant_inputs_stay_off_tape():
    x = T.Tensor(np.ones(3))
    y = T.scale(x, 2.0)
    assert y.node is None


def test_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(123)
        x = T.Tensor(rng.normal(size=(4, 4)).astype(np.float32),
                     requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 4)).astype(np.float32),
                     requires_grad=True)
        h = T.gelu(T.matmul(x, w))
        loss = T.mean_all(T.softmax(h))
        T.backward(loss)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert gx1.tobytes() == gx2.tobytes()
    assert gw1.tobytes() == gw2.tobytes()


def test_hadamard_mask_semantics():
    rng = np.random.default_rng(5)
    for trial in range(50):
        x = rng.normal(size=37).astype(np.float32)
        bits = (rng.uniform(size=37) < 0.5).astype(np.float32)
        out = T.hadamard(T.Tensor(x), T.Tensor(bits)).data
        kept = bits == 1.0
        assert out[kept].tobytes() == x[kept].tobytes()
        assert np.all(out[~kept] == 0.0)


def test_column_l2_norm_zero_column_raises_on_backward():
    w = T.Tensor(np.array([[0.0, 1.0], [0.0, 2.0]], dtype=np.float32),
                 requires_grad=True)
    y = T.column_l2_norm(w)
    with pytest.raises(NumericError, match="column 0"):
        T.backward(T.sum_all(y))


def test_finite_diff_on_quadratic():
    w = T.Tensor([1.0, -2.0, 0.5])
    fd = T.finite_diff_grad(lambda t: T.sum_all(T.hadamard(t, t)).item(), w)
    np.testing.assert_allclose(fd.data, 2 * w.data, rtol=1e-3)


def test_finite_diff_nonfinite_raises():
    def bad(t):
        return float("nan")

    with pytest.raises(NumericError):
        T.finite_diff_grad(bad, T.Tensor([1.0]))
