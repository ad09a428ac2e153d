import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlpath import numerics as nx
from mtlpath.numerics import AdamState, ParameterStore, Tensor

# Scalar Adam on f(w) = w^2 from w = 1, 1000 steps, float64 reference loop
# written independently of the package (beta1=.9, beta2=.999, eps=1e-8).
ADAM_W_AFTER_1000_LR_1E3 = 0.2576650275716581
ADAM_W_AFTER_1000_LR_1E2 = -1.8138527032632695e-21


def _store(**arrays):
    s = ParameterStore()
    for k, v in arrays.items():
        s.add(k, v)
    return s


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(nx.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_row_col():
    assert nx.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_backward_identity():
    s = _store(a=[[1, 2], [3, 4]], b=np.eye(2))
    nx.backward(nx.reduce_sum(nx.matmul(s["a"], s["b"])), s)
    np.testing.assert_array_equal(s["a"].grad, [[1, 1], [1, 1]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 10**6))
def test_matmul_matches_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(-9, 10, (m, k))
    b = rng.integers(-9, 10, (k, n))
    ref = [[sum(int(a[i, p]) * int(b[p, j]) for p in range(k)) for j in range(n)] for i in range(m)]
    np.testing.assert_array_equal(nx.matmul(Tensor(a), Tensor(b)).data, ref)


def test_elementwise_closed_forms():
    assert nx.elementwise("sigmoid", 0.0).item() == 0.5
    assert nx.elementwise("tanh", 0.0).item() == 0.0
    np.testing.assert_allclose(nx.elementwise("softmax_rows", [[0.0, 0.0, 0.0]]).data, [[1 / 3] * 3], rtol=1e-6)


def test_elementwise_rejects_bad_shapes_and_ops():
    with pytest.raises(nx.ShapeError):
        nx.elementwise("add", np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        nx.elementwise("relu6", 1.0)


def test_scalar_broadcast_gradient():
    s = _store(w=[1.0, 2.0, 3.0], k=2.0)
    nx.backward(nx.reduce_sum(nx.mul(s["w"], s["k"])), s)
    np.testing.assert_array_equal(s["w"].grad, [2, 2, 2])
    assert s["k"].grad.item() == 6.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(2, 9), st.floats(-30, 30), st.integers(0, 10**6))
# float32 saturates to exactly 1.0 once logit gaps exceed ~16, so keep gaps moderate
def test_softmax_rows_normalised(rows, cols, shift, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * 2 + shift
    s = nx.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all((s > 0) & (s < 1))


def test_backward_sum_and_square():
    s = _store(w=np.arange(6.0).reshape(2, 3))
    nx.backward(nx.reduce_sum(s["w"]), s)
    np.testing.assert_array_equal(s["w"].grad, np.ones((2, 3)))

    s = _store(w=[3.0])
    nx.backward(nx.reduce_sum(nx.mul(s["w"], s["w"])), s)
    assert s["w"].grad.tolist() == [6.0]


def test_backward_unreachable_zero_and_accumulates():
    s = _store(w=[1.0, 2.0], unused=[[5.0]])
    for _ in range(2):
        nx.backward(nx.reduce_sum(s["w"]), s)
    np.testing.assert_array_equal(s["w"].grad, [2, 2])
    np.testing.assert_array_equal(s["unused"].grad, [[0]])
    s.zero_grads()
    np.testing.assert_array_equal(s["w"].grad, [0, 0])


def test_backward_rejects_non_scalar():
    s = _store(w=[1.0, 2.0])
    with pytest.raises(nx.ContractError):
        nx.backward(nx.mul(s["w"], 2.0), s)


# every op, randomised operands, float32 analytic vs central differences
def _op_cases(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    same = rng.normal(size=(3, 4))
    ids = rng.integers(0, 3, size=(2, 5))
    tgt = rng.integers(0, 4, size=3)
    return {
        "matmul": ({"a": a, "b": b}, lambda s: nx.matmul(s["a"], s["b"])),
        "add": ({"a": a, "c": same}, lambda s: nx.add(s["a"], s["c"])),
        "sub": ({"a": a, "c": same}, lambda s: nx.sub(s["a"], s["c"])),
        "mul": ({"a": a, "c": same}, lambda s: nx.mul(s["a"], s["c"])),
        "sigmoid": ({"a": a}, lambda s: nx.sigmoid(s["a"])),
        "tanh": ({"a": a}, lambda s: nx.tanh(s["a"])),
        "softmax_rows": ({"a": a}, lambda s: nx.softmax_rows(s["a"])),
        "log": ({"a": np.abs(a) + 0.5}, lambda s: nx.log(s["a"], floor=1e-12)),
        "linear": ({"x": a, "w": b, "bias": rng.normal(size=2)}, lambda s: nx.linear(s["x"], s["w"], s["bias"])),
        "concat": ({"a": a, "c": same}, lambda s: nx.concat([s["a"], s["c"]])),
        "stack": ({"a": a, "c": same}, lambda s: nx.stack([s["a"], s["c"]])),
        "slice": ({"a": a}, lambda s: nx.slice_last(s["a"], 1, 3)),
        "select": ({"e": rng.normal(size=(2, 3, 4))}, lambda s: nx.select(s["e"], 1)),
        "take_rows": ({"e": rng.normal(size=(3, 4))}, lambda s: nx.take_rows(s["e"], ids)),
        "pick": ({"a": a}, lambda s: nx.pick(s["a"], tgt)),
        "sum_axis": ({"e": rng.normal(size=(2, 3, 4))}, lambda s: nx.reduce_sum(s["e"], axis=1)),
        "bmm_vec": ({"e": rng.normal(size=(2, 3, 4)), "q": rng.normal(size=(2, 4))}, lambda s: nx.bmm_vec(s["e"], s["q"])),
        "weighted_sum": ({"w": rng.normal(size=(2, 3)), "e": rng.normal(size=(2, 3, 4))}, lambda s: nx.weighted_sum(s["w"], s["e"])),
    }


@pytest.mark.parametrize("op", list(_op_cases(np.random.default_rng(0))))
def test_op_gradients_match_finite_differences(op):
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        arrays, fn = _op_cases(rng)[op]
        proj = {}

        def f(s):
            out = fn(s)
            if "r" not in proj:
                proj["r"] = np.random.default_rng(trial + 1000).normal(size=out.shape)
            return nx.reduce_sum(nx.mul(out, proj["r"]))

        worst = max(worst, nx.gradcheck(f, _store(**arrays), h=3e-3, max_coords=None))
    assert worst < 1e-3


def test_adam_first_step_closed_form():
    s = _store(w=[0.0])
    s["w"].grad = np.array([2.0], dtype=np.float32)
    state = AdamState(lr=1e-3)
    nx.adam_step(s, state)
    assert state.t == 1
    assert s["w"].data[0] == pytest.approx(-1e-3, rel=1e-5)
    # caller zeroes gradients, not the optimizer
    assert s["w"].grad[0] == 2.0


def test_adam_zero_gradient_is_a_no_op():
    s = _store(w=[1.0, -2.0])
    s.zero_grads()
    nx.adam_step(s, AdamState())
    np.testing.assert_array_equal(s["w"].data, np.float32([1.0, -2.0]))


def test_adam_missing_grad_names_parameter():
    s = _store(w=[1.0], v=[1.0])
    s["w"].grad = np.zeros(1, dtype=np.float32)
    with pytest.raises(nx.ContractError, match="'v'"):
        nx.adam_step(s, AdamState())


@pytest.mark.parametrize("lr, expected, tol", [(1e-3, ADAM_W_AFTER_1000_LR_1E3, 1e-4), (1e-2, ADAM_W_AFTER_1000_LR_1E2, 1e-4)])
def test_adam_quadratic_matches_reference_loop(lr, expected, tol):
    s = _store(w=[1.0])
    state = AdamState(lr=lr)
    for _ in range(1000):
        s.zero_grads()
        nx.backward(nx.reduce_sum(nx.mul(s["w"], s["w"])), s)
        nx.adam_step(s, state)
    assert abs(float(s["w"].data[0]) - expected) < tol
    if lr == 1e-2:
        assert abs(s["w"].data[0]) < 0.05


def test_adam_deterministic():
    rng = np.random.default_rng(3)
    w0, g = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    outs = []
    for _ in range(2):
        s = _store(w=w0)
        state = AdamState()
        for _ in range(3):
            s["w"].grad = g.astype(np.float32)
            nx.adam_step(s, state)
        outs.append(s["w"].data.tobytes())
    assert outs[0] == outs[1]


def test_gradcheck_quadratic_and_constant():
    # central differences are exact for quadratics; float64 leaves only rounding
    with nx.precision(np.float64):
        s = _store(w=np.random.default_rng(1).normal(size=(3, 3)))
        assert nx.gradcheck(lambda st: nx.reduce_sum(nx.mul(st["w"], st["w"])), s, h=1e-3) < 1e-6
    s = _store(w=np.random.default_rng(1).normal(size=(3, 3)))
    assert nx.gradcheck(lambda st: nx.reduce_sum(nx.mul(st["w"], st["w"])), s, h=1e-2) < 1e-4
    assert nx.gradcheck(lambda st: nx.reduce_sum(nx.scale(st["w"], 0.0)), s) < 1e-12


def test_gradcheck_step_bounds_and_non_finite():
    s = _store(w=[1.0])
    with pytest.raises(nx.ContractError):
        nx.gradcheck(lambda st: nx.reduce_sum(st["w"]), s, h=0.5)
    with pytest.raises(nx.NumericError):
        nx.gradcheck(lambda st: nx.reduce_sum(nx.log(nx.sub(st["w"], 1.0))), s, h=1e-3)


def test_corrupted_backward_is_detected():
    s = _store(w=np.random.default_rng(2).normal(size=(2, 3)))
    f = lambda st: nx.reduce_sum(nx.tanh(st["w"]))
    assert nx.gradcheck(f, s) < 1e-3
    with nx.corrupt_backward("tanh"):
        assert nx.gradcheck(f, s) > 1e-2


def test_float64_precision_switch():
    with nx.precision(np.float64):
        t = Tensor([1.0])
        assert t.data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_parameter_store_partition():
    s = ParameterStore()
    s.add("a", [1.0], "shared")
    s.add("b", [1.0], "path")
    s.add("c", [1.0], "dkt")
    with pytest.raises(nx.ContractError):
        s.add("a", [2.0])
    with pytest.raises(nx.ContractError):
        s.add("d", [2.0], "other")
    parts = [set(s.names(t)) for t in nx.TASKS]
    assert set().union(*parts) == set(s) and sum(map(len, parts)) == len(s)
    assert list(s) == ["a", "b", "c"]


def test_tensor_values_finite_after_forward():
    x = Tensor(np.array([[-1e4, 0.0, 1e4]]))
    for op in ("sigmoid", "tanh", "softmax_rows"):
        assert np.all(np.isfinite(nx.elementwise(op, x).data))
    assert math.isclose(nx.sigmoid(x).data[0, 0], 0.0, abs_tol=1e-30)
