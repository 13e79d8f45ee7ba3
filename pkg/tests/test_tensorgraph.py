"""
Unit tests for the reverse-mode autodiff engine
"""

import threading

import numpy as np
import pytest

from echoinr.errors import DomainError, ShapeError
from echoinr.tensorgraph import (
    Tape,
    Tensor,
    abs_,
    add,
    affine,
    avg_pool,
    clamp,
    concat_cols,
    conv2d_same,
    current_tape,
    get_default_dtype,
    set_default_dtype,
    diff,
    div,
    exp,
    gather_rows,
    grad_check,
    log10_guarded,
    mean,
    mul,
    relu,
    reshape,
    softplus,
    square,
    sub,
    sum_,
)


def _brute_conv(x, kernel):
    """Direct replicate-padded convolution by explicit loops"""
    rows, cols = x.shape
    kh, kw = kernel.shape
    a, b = kh // 2, kw // 2
    out = np.zeros_like(x)
    for i in range(rows):
        for j in range(cols):
            total = 0.0
            for u in range(-a, a + 1):
                for v in range(-b, b + 1):
                    p = min(max(i - u, 0), rows - 1)
                    q = min(max(j - v, 0), cols - 1)
                    total += kernel[u + a, v + b] * x[p, q]
            out[i, j] = total
    return out


# relative error with a floor on the denominator, over many random points
GRAD_INSTANCES = 100
GRAD_FLOOR = 1e-4
GRAD_TOL = 1e-5

UNARY_CASES = [
    ("square", lambda t: sum_(square(t)), None),
    ("exp", lambda t: sum_(exp(t)), None),
    ("softplus", lambda t: sum_(softplus(t)), None),
    ("mean", lambda t: mul(mean(t), 3.0), None),
    ("reshape", lambda t: sum_(square(reshape(t, (20,)))), None),
    ("diff0", lambda t: sum_(square(diff(t, 0))), None),
    ("diff1", lambda t: sum_(square(diff(t, 1))), None),
    ("avg_pool", lambda t: sum_(square(avg_pool(t, 2))), (4, 6)),
]


def _check(f, x):
    return grad_check(f, x, atol=GRAD_FLOOR)


@pytest.mark.parametrize("name,f,shape", UNARY_CASES)
def test_grad_check_smooth_ops(name, f, shape):
    """Smooth ops match central differences on random inputs"""
    rng = np.random.default_rng(7)
    for trial in range(GRAD_INSTANCES):
        x = Tensor(rng.normal(size=shape or (4, 5)))
        assert _check(f, x) < GRAD_TOL, (name, trial)


@pytest.mark.parametrize("op", [add, sub, mul, div], ids=lambda op: op.__name__)
def test_grad_check_binary_ops(op):
    """Binary ops are differentiable in both operands with broadcasting"""
    rng = np.random.default_rng(1)
    for trial in range(GRAD_INSTANCES):
        other = Tensor(rng.uniform(0.5, 2.0, size=(1, 4)))
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
        assert _check(lambda t: sum_(square(op(t, other))), x) < GRAD_TOL, trial
        assert _check(lambda t: sum_(square(op(x, t))), other) < GRAD_TOL, trial


def test_grad_check_kinked_ops_away_from_kinks():
    """abs, relu and clamp agree with finite differences away from their kinks"""
    rng = np.random.default_rng(2)
    for trial in range(GRAD_INSTANCES):
        values = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
        x = Tensor(values)
        assert _check(lambda t: sum_(abs_(t)), x) < GRAD_TOL, trial
        assert _check(lambda t: sum_(square(relu(t))), x) < GRAD_TOL, trial
        inside = Tensor(values * 0.4)
        assert _check(lambda t: sum_(square(clamp(t, -0.5, 0.5))), inside) < GRAD_TOL, trial


def test_grad_check_log10_guarded():
    """log10(x + eps) gradient on positive inputs"""
    rng = np.random.default_rng(3)
    for trial in range(GRAD_INSTANCES):
        x = Tensor(rng.uniform(0.1, 2.0, size=(3, 3)))
        assert _check(lambda t: sum_(log10_guarded(t, 1e-8)), x) < GRAD_TOL, trial


def test_log10_guarded_rejects_negative_input():
    """Negative envelope values are a domain error"""
    with pytest.raises(DomainError):
        log10_guarded(Tensor([[-1e-3, 1.0]]), 1e-8)


def test_grad_check_affine_batch():
    """Batched affine is differentiable in x, W and b"""
    rng = np.random.default_rng(4)
    for trial in range(GRAD_INSTANCES):
        x = Tensor(rng.normal(size=(6, 3)))
        W = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(2,)))
        assert _check(lambda t: sum_(square(affine(t, W, b))), x) < GRAD_TOL, trial
        assert _check(lambda t: sum_(square(affine(x, t, b))), W) < GRAD_TOL, trial
        assert _check(lambda t: sum_(square(affine(x, W, t))), b) < GRAD_TOL, trial


def test_gather_rows_scatter_adds_repeated_indices():
    """Rows gathered twice receive the sum of both upstream gradients"""
    table = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    with Tape() as tape:
        out = sum_(gather_rows(table, [1, 1, 3]))
    tape.backward(out)
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_gather_rows_out_of_bounds():
    """Indices past the table end raise IndexError"""
    with pytest.raises(IndexError):
        gather_rows(Tensor(np.zeros((4, 1))), [4])


def test_concat_cols_splits_gradient():
    """Each input receives its own columns of the upstream gradient"""
    a = Tensor(np.ones((2, 1)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = concat_cols([a, b])
    tape.backward(out, seed=np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(a.grad, [[0], [3]])
    np.testing.assert_array_equal(b.grad, [[1, 2], [4, 5]])


def test_conv2d_matches_brute_force():
    """Separable and general kernels both match the loop oracle"""
    rng = np.random.default_rng(5)
    for trial in range(50):
        rows, cols = rng.integers(5, 12, size=2)
        kh, kw = rng.choice([1, 3, 5], size=2)
        x = rng.normal(size=(rows, cols))
        if trial % 2:
            kernel = np.outer(rng.normal(size=kh), rng.normal(size=kw))
        else:
            kernel = rng.normal(size=(kh, kw))
        out = conv2d_same(Tensor(x), kernel).value
        np.testing.assert_allclose(out, _brute_conv(x, kernel), atol=1e-12, rtol=0)


def test_conv2d_gradient():
    """The adjoint of replicate-padded convolution matches central differences"""
    rng = np.random.default_rng(6)
    for trial in range(GRAD_INSTANCES):
        kh, kw = rng.choice([1, 3, 5], size=2)
        if trial % 2:
            kernel = np.outer(rng.normal(size=kh), rng.normal(size=kw))
        else:
            kernel = rng.normal(size=(kh, kw))
        x = Tensor(rng.normal(size=(6, 7)))
        assert _check(lambda t: sum_(square(conv2d_same(t, kernel))), x) < GRAD_TOL, trial


def test_conv2d_delta_kernel_is_identity():
    """A 1x1 unit kernel returns the input bit-for-bit"""
    x = np.random.default_rng(8).uniform(size=(5, 6))
    np.testing.assert_array_equal(conv2d_same(Tensor(x), np.ones((1, 1))).value, x)


def test_conv2d_rejects_even_kernel():
    """Kernel dimensions must be odd"""
    with pytest.raises(ShapeError):
        conv2d_same(Tensor(np.zeros((5, 5))), np.ones((2, 3)))


def test_shape_mismatch_raises():
    """Non-broadcastable operands raise ShapeError"""
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_gradient_accumulates_over_reuse():
    """A tensor used twice gets the sum of both paths"""
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = add(mul(x, x), mul(x, 2.0))
    tape.backward(y)
    assert x.grad == pytest.approx(8.0)


def test_no_recording_without_tape():
    """Operations outside a tape are plain numpy evaluations"""
    x = Tensor(2.0, requires_grad=True)
    y = square(x)
    assert y.requires_grad is False
    assert float(y.value) == 4.0


def test_tape_records_in_program_order():
    """Entries appear in the order the operations ran"""
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        mean(exp(square(x)))
    assert [entry.op for entry in tape.entries] == ["square", "exp", "mean"]


def test_first_non_finite_names_the_op():
    """The first op producing inf or nan is reported"""
    x = Tensor(np.array([[800.0]]), requires_grad=True)
    with Tape() as tape:
        mean(exp(x))
    assert tape.first_non_finite() == (0, "exp")


def test_tapes_are_thread_local():
    """A tape opened on one thread does not see another thread's operations"""
    seen = {}

    def worker():
        seen["tape"] = current_tape()

    with Tape():
        thread = threading.Thread(target=worker)
        thread.start()
        thread.join()
    assert seen["tape"] is None


def test_matches_torch_on_composite_function():
    """Gradients agree with torch autograd on a small network-like expression"""
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(9)
    x_np, W_np, b_np = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)

    W, b = Tensor(W_np, requires_grad=True), Tensor(b_np, requires_grad=True)
    with Tape() as tape:
        loss = mean(softplus(relu(affine(Tensor(x_np), W, b))))
    tape.backward(loss)

    Wt = torch.tensor(W_np, requires_grad=True)
    bt = torch.tensor(b_np, requires_grad=True)
    out = torch.nn.functional.softplus(torch.relu(torch.tensor(x_np) @ Wt.T + bt)).mean()
    out.backward()

    assert float(loss.value) == pytest.approx(out.item(), abs=1e-12)
    np.testing.assert_allclose(W.grad, Wt.grad.numpy(), atol=1e-12)
    np.testing.assert_allclose(b.grad, bt.grad.numpy(), atol=1e-12)


def test_default_dtype_applies_to_new_tensors():
    """float32 mode changes the storage of new tensors and conv kernels"""
    assert get_default_dtype() is np.float64
    try:
        set_default_dtype("float32")
        assert get_default_dtype() is np.float32
        assert Tensor([[1.0, 2.0]]).value.dtype == np.float32
        out = conv2d_same(Tensor(np.ones((3, 3))), np.ones((1, 1)))
        assert out.value.dtype == np.float32
    finally:
        set_default_dtype("float64")
    with pytest.raises(ValueError):
        set_default_dtype("float16")
