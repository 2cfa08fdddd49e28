"""Tensor primitives against naive oracles, plus gradient checks for every op."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from videograph import engine
from videograph.engine import (
    DimensionError,
    DomainError,
    Parameter,
    Tape,
    Tensor,
    clamp_row_normalize,
    cosine_affinity,
    gradient_check,
    graph_conv,
    row_softmax,
)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def test_matmul_identity():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = engine.matmul(Tensor(np.eye(2)), x)
    assert np.array_equal(out.data, x.data)


def test_matmul_selector_row():
    out = engine.matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]]))
    assert out.data.tolist() == [[2.0]]


def test_matmul_matches_naive_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    out = engine.matmul(Tensor(a), Tensor(b))
    assert np.max(np.abs(out.data - naive_matmul(a, b))) <= 1e-12


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        engine.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_row_softmax_uniform_on_equal_rows():
    for scale in (0.3, 1.0, 7.0):
        out = row_softmax(Tensor(np.full((2, 5), 1.7)), scale)
        assert np.allclose(out.data, 0.2, atol=1e-12)


def test_row_softmax_closed_form():
    out = row_softmax(Tensor([[0.0, math.log(3.0)]]), 1.0)
    assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)


def test_row_softmax_scale_preserves_argmax():
    x = np.array([[1.0, 2.0]])
    for scale in (0.01, 1.0, 1000.0):
        out = row_softmax(Tensor(x), scale)
        assert out.data.argmax() == 1
    sharp = row_softmax(Tensor(x), 1000.0)
    assert np.allclose(sharp.data, [[0.0, 1.0]], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(2, 6))
def test_row_softmax_rows_sum_to_one(seed, m, n):
    x = np.random.default_rng(seed).normal(scale=4.0, size=(m, n))
    out = row_softmax(Tensor(x), 1.6)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)
    assert (out.data > 0).all() and (out.data < 1).all()
    assert np.array_equal(out.data.argmax(axis=-1), x.argmax(axis=-1))


def test_graph_conv_zero_adjacency_is_affine_map():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    out = graph_conv(Tensor(x), Tensor(np.zeros((4, 4))), Tensor(w))
    assert np.allclose(out.data, x @ w, atol=1e-12)


def test_graph_conv_two_node_hand_expansion():
    # adj = [[0,1],[1,0]], A+I = ones; D = 2I so every normalized entry is 1/2.
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3))
    out = graph_conv(Tensor(x), Tensor([[0.0, 1.0], [1.0, 0.0]]), Tensor(np.eye(3)))
    expect = np.stack([(x[0] + x[1]) / 2.0, (x[0] + x[1]) / 2.0])
    assert np.allclose(out.data, expect, atol=1e-12)


def test_graph_conv_permutation_equivariance():
    rng = np.random.default_rng(3)
    n = 5
    x = rng.normal(size=(n, 3))
    adj = rng.uniform(size=(n, n))
    w = rng.normal(size=(3, 2))
    perm = rng.permutation(n)
    base = graph_conv(Tensor(x), Tensor(adj), Tensor(w), activation="elu")
    permuted = graph_conv(
        Tensor(x[perm]), Tensor(adj[np.ix_(perm, perm)]), Tensor(w), activation="elu"
    )
    assert np.allclose(permuted.data, base.data[perm], atol=1e-12)


def test_graph_conv_rejects_negative_adjacency():
    with pytest.raises(DomainError):
        graph_conv(Tensor(np.ones((2, 2))), Tensor([[0.0, -0.1], [0.0, 0.0]]), Tensor(np.eye(2)))


def test_cosine_affinity_identical_unit_rows():
    x = np.tile(np.array([0.6, 0.8]), (3, 1))
    out = cosine_affinity(Tensor(x), Tensor(np.eye(2)), Tensor(np.eye(2)))
    assert np.allclose(out.data, 1.0, atol=1e-12)


def test_cosine_affinity_orthogonal_rows():
    out = cosine_affinity(Tensor(np.eye(3)), Tensor(np.eye(3)), Tensor(np.eye(3)))
    assert np.allclose(out.data, np.eye(3), atol=1e-12)


def test_cosine_affinity_matches_direct_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 3))
    wa, wb = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    a, b = x @ wa, x @ wb
    expect = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            expect[i, j] = a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
    out = cosine_affinity(Tensor(x), Tensor(wa), Tensor(wb))
    assert np.max(np.abs(out.data - expect)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cosine_affinity_bounded_and_symmetric_with_shared_projection(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    w = Tensor(rng.normal(size=(3, 3)))
    out = cosine_affinity(Tensor(x), w, w)
    assert (out.data >= -1 - 1e-9).all() and (out.data <= 1 + 1e-9).all()
    assert np.allclose(out.data, out.data.T, atol=1e-12)


def test_elementwise_definitions():
    assert engine.elu(Tensor([0.0])).data[0] == 0.0
    assert engine.elu(Tensor([-30.0])).data[0] == pytest.approx(-1.0, abs=1e-12)
    assert engine.relu(Tensor([-5.0])).data[0] == 0.0
    assert engine.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_mean_rows_of_identical_rows():
    row = np.array([1.5, -2.0, 0.25])
    out = engine.mean_rows(Tensor(np.tile(row, (6, 1))))
    assert np.allclose(out.data, row[None, :], atol=1e-15)


def test_concat_off_axis_mismatch():
    with pytest.raises(DimensionError):
        engine.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


def test_node_norm_standardizes_channels():
    rng = np.random.default_rng(5)
    x = rng.normal(loc=3.0, scale=2.5, size=(50, 4))
    out = engine.node_norm(Tensor(x), Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 4))))
    assert np.max(np.abs(out.data.mean(axis=0))) <= 1e-6
    assert np.max(np.abs(out.data.var(axis=0) - 1.0)) <= 1e-6


def test_purity_bitwise_repeatable():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 3))
    a = row_softmax(Tensor(x), 1.6).data
    b = row_softmax(Tensor(x), 1.6).data
    assert np.array_equal(a, b)


def test_clamp_row_normalize_row_stochastic():
    rng = np.random.default_rng(7)
    raw = rng.uniform(size=(5, 5)) + np.eye(5)
    out = clamp_row_normalize(Tensor(raw))
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    assert (out.data > 0).all()


# ---------------------------------------------------------------------------
# gradient checks


def test_gradient_check_linear_function():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(3, 4)))
    w = Parameter(rng.normal(size=(4, 2)), "w")
    err = gradient_check(lambda: engine.sum_all(engine.matmul(x, w.value)), [w], eps=1e-5)
    assert err <= 1e-8
    # analytic gradient of sum(XW) is X^T 1
    with Tape() as tape:
        loss = engine.sum_all(engine.matmul(x, w.value))
        w.zero_grad()
        tape.backward(loss)
    assert np.allclose(w.grad, x.data.T @ np.ones((3, 2)), atol=1e-12)


def test_gradient_check_constant_function():
    w = Parameter(np.ones((2, 2)), "w")
    err = gradient_check(lambda: Tensor([4.0]), [w], eps=1e-5)
    assert err == 0.0
    assert np.array_equal(w.grad, np.zeros((2, 2)))


def test_gradient_check_rejects_bad_eps():
    w = Parameter(np.ones((1, 1)), "w")
    with pytest.raises(DomainError):
        gradient_check(lambda: Tensor([0.0]), [w], eps=1e-2)


OP_CASES = {
    "matmul": lambda w, x: engine.matmul(x, w.value),
    "add_broadcast": lambda w, x: engine.add(x, engine.mean_rows(w.value)),
    "mul": lambda w, x: engine.mul(engine.matmul(x, w.value), engine.matmul(x, w.value)),
    "div": lambda w, x: engine.div(
        engine.matmul(x, w.value), engine.add(engine.square(engine.matmul(x, w.value)), 2.0)
    ),
    "row_softmax": lambda w, x: row_softmax(engine.matmul(x, w.value), 1.7),
    "sigmoid": lambda w, x: engine.sigmoid(engine.matmul(x, w.value)),
    "elu": lambda w, x: engine.elu(engine.matmul(x, w.value)),
    "relu": lambda w, x: engine.relu(engine.matmul(x, w.value)),
    "exp": lambda w, x: engine.exp(engine.mul(engine.matmul(x, w.value), 0.3)),
    "log": lambda w, x: engine.log(engine.add(engine.square(engine.matmul(x, w.value)), 0.5)),
    "sqrt": lambda w, x: engine.sqrt(engine.add(engine.square(engine.matmul(x, w.value)), 0.5)),
    "powf": lambda w, x: engine.powf(engine.add(engine.square(engine.matmul(x, w.value)), 1.0), -0.5),
    "maximum": lambda w, x: engine.maximum(engine.matmul(x, w.value), 0.21),
    "transpose": lambda w, x: engine.matmul(engine.transpose(engine.matmul(x, w.value)), x),
    "concat": lambda w, x: engine.concat([engine.matmul(x, w.value), x], axis=1),
    "reshape": lambda w, x: engine.reshape(engine.matmul(x, w.value), (1, -1)),
    "slice_rows": lambda w, x: engine.slice_rows(engine.matmul(x, w.value), 1, 3),
    "mean_rows": lambda w, x: engine.mean_rows(engine.matmul(x, w.value)),
    "sum_axis": lambda w, x: engine.sum_axis(engine.matmul(x, w.value), -1),
    "node_norm": lambda w, x: engine.node_norm(
        engine.matmul(x, w.value), Tensor(np.full((1, 3), 1.3)), Tensor(np.full((1, 3), -0.2))
    ),
    "graph_conv": lambda w, x: graph_conv(
        x, row_softmax(engine.matmul(engine.matmul(x, w.value), engine.transpose(x)), 1.0), w.value,
        activation="elu",
    ),
    "graph_conv_unnorm": lambda w, x: graph_conv(
        x, Tensor(np.abs(np.random.default_rng(0).normal(size=(4, 4)))), w.value,
        activation="relu", normalize=False,
    ),
    "cosine_affinity": lambda w, x: cosine_affinity(x, w.value, Tensor(np.eye(3))),
    "clamp_row_normalize": lambda w, x: clamp_row_normalize(
        engine.sigmoid(engine.matmul(x, w.value))
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_passes_gradient_check(name):
    build = OP_CASES[name]
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        x = Tensor(rng.normal(size=(4, 3)))
        w = Parameter(rng.normal(size=(3, 3)) * 0.8, "w")
        err = gradient_check(lambda: engine.sum_all(engine.square(build(w, x))), [w], eps=1e-5)
        assert err <= 1e-4, f"{name} seed {seed}: {err}"


def test_gradient_check_detects_injected_wrong_backward(monkeypatch):
    # mutation sanity: corrupt one op's backward and the checker must flag it
    def broken(a, b):
        a, b = engine._coerce(a), engine._coerce(b)
        out = Tensor(a.data @ b.data)

        def backward(a=a, b=b, out=out):
            g = out.grad
            if g is None:
                return
            engine._acc(a, g @ b.data.T)
            engine._acc(b, 0.5 * (a.data.T @ g))  # wrong scale

        engine._record(backward)
        return out

    rng = np.random.default_rng(42)
    x = Tensor(rng.normal(size=(3, 3)))
    w = Parameter(rng.normal(size=(3, 3)), "w")
    monkeypatch.setattr(engine, "matmul", broken)
    err = gradient_check(lambda: engine.sum_all(engine.square(engine.matmul(x, w.value))), [w])
    assert err > 1e-1


def test_batched_matmul_gradients_match_per_slice():
    rng = np.random.default_rng(9)
    stack = rng.normal(size=(3, 4, 2))
    w = Parameter(rng.normal(size=(2, 2)), "w")

    def batched():
        return engine.sum_all(engine.square(engine.matmul(Tensor(stack), w.value)))

    assert gradient_check(batched, [w], eps=1e-5) <= 1e-4
    with Tape() as tape:
        loss = batched()
        w.zero_grad()
        tape.backward(loss)
    g_batched = w.grad.copy()
    with Tape() as tape:
        parts = [
            engine.sum_all(engine.square(engine.matmul(Tensor(stack[i]), w.value)))
            for i in range(3)
        ]
        total = engine.add(engine.add(parts[0], parts[1]), parts[2])
        w.zero_grad()
        tape.backward(total)
    assert np.allclose(g_batched, w.grad, atol=1e-12)
