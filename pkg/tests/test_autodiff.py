import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mladapt.autodiff import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    concat,
    conv1d,
    finite_diff_check,
    gather_cols,
    layer_norm,
    log_softmax,
    logaddexp,
    matmul,
    no_grad,
    relu,
    softmax,
)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal((a @ eye).data, a.data)


def test_softmax_symmetry():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_log_softmax_symmetry():
    out = log_softmax(Tensor([0.0, 0.0])).data
    np.testing.assert_allclose(out, [-np.log(2.0)] * 2, atol=1e-12)


def test_backward_sum_gives_ones():
    x = Tensor([1.0, 5.0, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_elementwise_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_log_softmax_pick_gradient_is_softmax_minus_onehot():
    # independent oracle: central finite differences
    rng = np.random.default_rng(0)
    logits = rng.normal(size=5)

    def f(x):
        return log_softmax(x)[2:3].reshape(())

    err = finite_diff_check(f, Tensor(logits.copy()))
    assert err <= 1e-5

    x = Tensor(logits.copy(), requires_grad=True)
    with Tape() as tape:
        tape.backward(f(x))
    expected = -(np.exp(logits) / np.exp(logits).sum())
    expected[2] += 1.0
    np.testing.assert_allclose(x.grad, expected, atol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_finite_diff_polynomial_is_tight():
    err = finite_diff_check(lambda x: (x * x).sum(), Tensor([1.0, -2.0]))
    assert err <= 1e-7


def test_finite_diff_constant_function():
    err = finite_diff_check(lambda x: Tensor(3.5), Tensor([1.0, 2.0]))
    assert err == 0.0


def test_finite_diff_nonfinite_raises():
    with pytest.raises(NumericError):
        finite_diff_check(lambda x: Tensor(np.inf), Tensor([1.0]))


def test_shape_error_names_primitive_and_extents():
    with pytest.raises(ShapeError) as info:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg

    with pytest.raises(ShapeError, match="add"):
        Tensor(np.zeros((2, 2))) + Tensor(np.zeros((3, 3)))


def test_no_grad_suppresses_recording():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad
        assert len(tape) == 0


def test_ops_outside_tape_do_not_require_grad():
    x = Tensor([1.0], requires_grad=True)
    assert not (x * 2.0).requires_grad


def test_conv1d_output_frames_and_values():
    # kernel 3, stride 2, padding 1: known tiny case against direct sums
    x = Tensor(np.arange(10, dtype=float).reshape(5, 2))
    w = Tensor(np.ones((3, 2, 1)))
    b = Tensor(np.zeros(1))
    out = conv1d(x, w, b, stride=2)
    assert out.shape == (3, 1)
    xp = np.vstack([np.zeros(2), x.data, np.zeros(2)])
    expected = [xp[i:i + 3].sum() for i in (0, 2, 4)]
    np.testing.assert_allclose(out.data[:, 0], expected)


def test_layer_norm_normalizes_rows():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(2.0, 3.0, (4, 8)))
    out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-3)


def test_logaddexp_handles_neg_inf():
    a = Tensor(np.array([-np.inf, 0.0]), requires_grad=True)
    b = Tensor(np.array([-np.inf, -np.inf]), requires_grad=True)
    with Tape() as tape:
        out = logaddexp(a, b)
        loss = out[1:2].reshape(())
    assert out.data[0] == -np.inf
    tape.backward(loss)
    assert np.isfinite(a.grad).all() and np.isfinite(b.grad).all()


def _random_case(rng, name):
    t = int(rng.integers(2, 5))
    d = int(rng.integers(2, 6))
    if name == "matmul":
        k = int(rng.integers(2, 5))
        other = Tensor(rng.normal(size=(d, k)))
        return (t, d), lambda x: matmul(x, other).sum()
    if name == "matmul3d":
        h = int(rng.integers(2, 4))
        other = Tensor(rng.normal(size=(h, d, 3)))
        return (h, t, d), lambda x: matmul(x, other).sum()
    if name == "add_bias":
        bias = Tensor(rng.normal(size=d))
        return (t, d), lambda x: (x + bias).sum()
    if name == "mul":
        other = Tensor(rng.normal(size=(t, d)))
        return (t, d), lambda x: (x * other * x).sum()
    if name == "relu":
        # keep coordinates away from the kink at 0
        return (t, d), lambda x: relu(x * 1.0).sum()
    if name == "softmax":
        return (t, d), lambda x: (softmax(x) * softmax(x)).sum()
    if name == "log_softmax":
        return (t, d), lambda x: (log_softmax(x) * log_softmax(x)).sum()
    if name == "layer_norm":
        g = Tensor(rng.normal(size=d))
        b = Tensor(rng.normal(size=d))
        return (t, d), lambda x: (layer_norm(x, g, b) * layer_norm(x, g, b)).sum()
    if name == "conv1d":
        w = Tensor(rng.normal(size=(3, d, 2)))
        b = Tensor(rng.normal(size=2))
        return (t + 2, d), lambda x: (conv1d(x, w, b, 2) * conv1d(x, w, b, 2)).sum()
    if name == "slice_concat":
        return (t + 1, d), lambda x: concat([x[1:], x[:1]], axis=0).mean()
    if name == "gather":
        idx = rng.integers(0, d, 2 * d)
        return (t, d), lambda x: (gather_cols(x, idx) * gather_cols(x, idx)).sum()
    if name == "logaddexp":
        other = Tensor(rng.normal(size=(t, d)))
        return (t, d), lambda x: logaddexp(x, other).sum()
    if name == "transpose_reshape":
        return (t, d), lambda x: (x.transpose((1, 0)).reshape(t * d) * 2.0).mean()
    raise AssertionError(name)


PRIMITIVES = [
    "matmul", "matmul3d", "add_bias", "mul", "relu", "softmax", "log_softmax",
    "layer_norm", "conv1d", "slice_concat", "gather", "logaddexp",
    "transpose_reshape",
]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients_match_finite_differences(name):
    # >= 100 random shapes/seeds across the suite for every primitive
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng((17, PRIMITIVES.index(name), i))
        shape, f = _random_case(rng, name)
        x = rng.normal(size=shape)
        if name == "relu":
            x = x + 0.05 * np.sign(x)
        worst = max(worst, finite_diff_check(f, Tensor(x)))
    assert worst <= 1e-5, f"{name}: {worst}"


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(-50, 50), min_size=2, max_size=6),
        min_size=1,
        max_size=5,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1)
)
def test_softmax_rows_nonnegative_and_sum_to_one(rows):
    out = softmax(Tensor(np.array(rows))).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        with Tape() as tape:
            h = relu(matmul(x, w))
            loss = (softmax(h) * h).sum()
        tape.backward(loss)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert gx1.tobytes() == gx2.tobytes()
    assert gw1.tobytes() == gw2.tobytes()
