import numpy as np
import pytest

from latmol.autodiff import (
    AdamState,
    NonFiniteError,
    OPS,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    backward,
    clip,
    concat,
    finite_difference_check,
    gather_rows,
    matmul,
    primitive_forward,
    scatter_add,
    silu,
    slice_cols,
    square,
    tsum,
)


def test_matmul_identity():
    a = Tensor(np.arange(12.0).reshape(3, 4))
    out = matmul(Tensor(np.eye(3)), a)
    np.testing.assert_array_equal(out.values, a.values)


def test_silu_at_zero():
    assert silu(Tensor([0.0])).values[0] == 0.0


def test_scatter_add_collapses_rows():
    src = Tensor([[1.0, 2.0], [3.0, 5.0]])
    out = scatter_add(src, [0, 0], 1)
    np.testing.assert_array_equal(out.values, [[4.0, 7.0]])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(square(x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = square(x)
    with pytest.raises(ValueError):
        backward(tape, y)


def test_silu_gradient_at_zero_is_half():
    x = Tensor([0.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(silu(x))
    backward(tape, loss)
    h = 1e-6
    fd = (float(silu(Tensor([h])).values) - float(silu(Tensor([-h])).values)) / (2 * h)
    assert abs(x.grad[0] - 0.5) < 1e-12
    assert abs(fd - 0.5) < 1e-9


def test_matmul_chain_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

    def f(params):
        return tsum(square(matmul(matmul(params[0], params[1]), params[2])))

    assert finite_difference_check(f, [a, b, c]) < 1e-6


def test_gradient_accumulation_and_reset():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(square(x))
    backward(tape, loss)
    first = x.grad.copy()
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2 * first)
    x.zero_grad()
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, first)


def test_forward_is_deterministic():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(5, 5)))
    b = Tensor(rng.normal(size=(5, 5)))
    one = matmul(silu(a), b).values
    two = matmul(silu(a), b).values
    assert (one == two).all()


def _op_case(name, rng):
    """Random small inputs plus call wrapper for a registered op."""
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    if name == "matmul":
        b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        return [a, b], lambda p: matmul(p[0], p[1])
    if name in ("add", "sub", "mul"):
        return [a, b], lambda p: OPS[name](p[0], p[1])
    if name == "div":
        b = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
        return [a, b], lambda p: OPS[name](p[0], p[1])
    if name == "concat":
        return [a, b], lambda p: concat([p[0], p[1]], axis=1)
    if name == "gather_rows":
        return [a], lambda p: gather_rows(p[0], [1, 0, 1])
    if name == "scatter_add":
        return [a], lambda p: scatter_add(p[0], [1, 1], 3)
    if name in ("sum", "mean"):
        return [a], lambda p: OPS[name](p[0], axis=1, keepdims=True)
    if name in ("sqrt", "log"):
        c = Tensor(rng.uniform(0.5, 3.0, size=(2, 3)), requires_grad=True)
        return [c], lambda p: OPS[name](p[0])
    if name == "clip":
        return [a], lambda p: clip(p[0], -0.7, 0.7)
    if name == "broadcast":
        c = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        return [c], lambda p: OPS[name](p[0], (4, 3))
    if name == "slice_cols":
        return [a], lambda p: slice_cols(p[0], 1, 3)
    return [a], lambda p: OPS[name](p[0])


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(42)
    trials = 100 // len(OPS) + 2
    for _ in range(trials):
        params, call = _op_case(name, rng)

        def f(p):
            return tsum(square(call(p)))

        assert finite_difference_check(f, params) < 1e-6


def test_primitive_forward_dispatch():
    out = primitive_forward("add", Tensor([1.0]), Tensor([2.0]))
    assert out.values[0] == 3.0
    with pytest.raises(KeyError):
        primitive_forward("no-such-op", Tensor([1.0]))


def test_finite_difference_check_quadratic_is_tight():
    x = Tensor([1.0, -2.0, 0.5], requires_grad=True)

    def f(p):
        return tsum(square(p[0]))

    assert finite_difference_check(f, [x]) < 1e-9


def test_finite_difference_check_constant_function():
    x = Tensor([1.0, 2.0], requires_grad=True)

    def f(p):
        return tsum(square(p[0])) * 0.0

    assert finite_difference_check(f, [x]) == 0.0


def test_finite_difference_check_reports_non_finite():
    x = Tensor([0.0], requires_grad=True)

    def f(p):
        from latmol.autodiff import log

        return tsum(log(p[0]))

    with pytest.raises(NonFiniteError):
        finite_difference_check(f, [x])


def test_adam_zero_gradient_keeps_params():
    p = Tensor([1.0, -2.0])
    state = AdamState()
    before = p.values.copy()
    adam_step({"p": p}, {"p": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p.values, before)
    assert state.step == 1


def test_adam_moments_decay_on_zero_gradient():
    p = Tensor([1.0, -2.0])
    state = AdamState()
    state.m["p"] = np.array([0.5, 0.5])
    state.v["p"] = np.array([0.25, 0.25])
    adam_step({"p": p}, {"p": np.zeros(2)}, state, lr=0.0)
    np.testing.assert_allclose(state.m["p"], 0.9 * 0.5)
    np.testing.assert_allclose(state.v["p"], 0.999 * 0.25)


def test_adam_constant_gradient_converges_to_lr_steps():
    p = Tensor([0.0])
    state = AdamState()
    lr = 1e-3
    g = np.array([0.37])
    last = p.values.copy()
    for _ in range(500):
        last = p.values.copy()
        adam_step({"p": p}, {"p": g}, state, lr=lr)
    # Bias-corrected Adam with a constant gradient steps by lr * sign(g).
    assert abs(abs(p.values[0] - last[0]) - lr) < 1e-6


def test_adam_zero_lr_keeps_params():
    p = Tensor([3.0])
    before = p.values.copy()
    adam_step({"p": p}, {"p": np.array([1.0])}, AdamState(), lr=0.0)
    np.testing.assert_array_equal(p.values, before)


def test_adam_refuses_non_finite_gradient():
    p = Tensor([1.0])
    with pytest.raises(NonFiniteError):
        adam_step({"p": p}, {"p": np.array([np.nan])}, AdamState(), lr=0.1)
