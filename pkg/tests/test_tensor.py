import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kvprompt import tensor as T
from kvprompt.gradcheck import check_gradients, numeric_grad, relative_error
from kvprompt.tensor import DimensionError, NonFiniteError, Tensor

SEEDS = range(100)


# each case: (input shapes, fn(*tensors) -> tensor); the loss is <fn(...), W> for a random W
def _ln(x, w, b):
    return T.layer_norm(x, w, b)


OPS = {
    "add": ([(3, 4), (4,)], lambda a, b: a + b),
    "sub": ([(3, 4), (3, 1)], lambda a, b: a - b),
    "mul": ([(3, 4), (3, 4)], lambda a, b: a * b),
    "scale": ([(2, 5)], lambda a: T.scale(a, -1.7)),
    "gelu": ([(3, 4)], T.gelu),
    "matmul": ([(3, 4), (4, 2)], lambda a, b: a @ b),
    "batched_matmul": ([(2, 3, 4), (4, 2)], lambda a, b: a @ b),
    "softmax": ([(3, 5)], T.softmax_rows),
    "softmax_keep": ([(2, 3, 5)], lambda a: T.softmax(a, np.array([True, False, True, True, False]))),
    "concat": ([(2, 3), (2, 1)], lambda a, b: T.concat([a, b], axis=1)),
    "transpose": ([(2, 3, 4)], lambda a: T.transpose(a, (2, 0, 1))),
    "reshape": ([(2, 6)], lambda a: T.reshape(a, (3, 4))),
    "slice": ([(5, 3)], lambda a: T.slice_rows(a, 1, 4)),
    "take": ([(2, 3, 4)], lambda a: T.take(a, 1, axis=1)),
    "broadcast": ([(1, 4)], lambda a: T.broadcast_to(a, (3, 4))),
    "mean_axis": ([(3, 4)], lambda a: T.mean(a, axis=0)),
    "mean_all": ([(3, 4)], T.mean),
    "layer_norm": ([(3, 6), (6,), (6,)], _ln),
}


def _inputs(seed, shapes, dtype):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=s).astype(dtype) for s in shapes], rng


def _loss(fn, tensors, weight):
    out = fn(*tensors)
    return T.sum_all(out * Tensor(weight.astype(out.dtype)))


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_64bit_over_100_seeds(name):
    shapes, fn = OPS[name]
    worst = 0.0
    with T.precision(64):
        for seed in SEEDS:
            arrays_, rng = _inputs(seed, shapes, np.float64)
            ts = [Tensor(a, requires_grad=True) for a in arrays_]
            with T.no_grad():
                w = rng.normal(size=fn(*ts).shape)
            errs = check_gradients(lambda: _loss(fn, ts, w), ts)
            worst = max(worst, *errs)
    assert worst <= 1e-6, f"{name}: worst relative error {worst:.2e}"


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_32bit_against_64bit_oracle(name):
    # finite differences in float32 are dominated by rounding, so the oracle
    # differentiates the same function in float64
    shapes, fn = OPS[name]
    worst = 0.0
    for seed in SEEDS:
        arrays_, rng = _inputs(seed, shapes, np.float64)
        with T.precision(64):
            ts64 = [Tensor(a.copy(), requires_grad=True) for a in arrays_]
            with T.no_grad():
                w = rng.normal(size=fn(*ts64).shape)
            numeric = [numeric_grad(lambda: _loss(fn, ts64, w), t) for t in ts64]
        with T.precision(32):
            ts32 = [Tensor(a.astype(np.float32), requires_grad=True) for a in arrays_]
            T.backward(_loss(fn, ts32, w))
        worst = max(worst, *(relative_error(t.grad, n) for t, n in zip(ts32, numeric)))
    assert worst <= 1e-3, f"{name}: worst relative error {worst:.2e}"


def test_cross_entropy_gradient_64bit():
    with T.precision(64):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
            labels = rng.integers(0, 4, size=5)
            for red in ("mean", "sum"):
                (err,) = check_gradients(lambda: T.cross_entropy(logits, labels, red), [logits])
                assert err <= 1e-6


def test_cross_entropy_value_matches_logsumexp():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    with T.precision(64):
        loss = T.cross_entropy(Tensor(z), y).item()
    expected = np.mean([np.log(np.exp(r).sum()) - r[c] for r, c in zip(z, y)])
    assert loss == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal((eye @ eye).data, np.eye(2))


def test_matmul_small_example():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_3x4_by_4x2_fd_32bit():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)).astype(np.float32), requires_grad=True)
    errs = check_gradients(lambda: T.sum_all(a @ b), [a, b], eps=1e-2)
    assert max(errs) <= 1e-4


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    out = T.softmax_rows(Tensor(np.zeros((1, 3))))
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-7)


def test_softmax_matches_high_precision_oracle():
    mpmath.mp.dps = 50
    exps = [mpmath.e ** k for k in (1, 2, 3)]
    expected = [float(e / sum(exps)) for e in exps]
    with T.precision(64):
        out = T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
    np.testing.assert_allclose(out, expected, rtol=1e-15, atol=0)


def test_softmax_nan_input_is_an_error():
    t = Tensor(np.zeros((1, 2)))
    t.data[0, 0] = np.nan  # bypasses the construction-time check
    with pytest.raises(NonFiniteError):
        T.softmax(t)


def test_softmax_rows_requires_matrix():
    with pytest.raises(DimensionError):
        T.softmax_rows(Tensor(np.zeros(3)))


def test_softmax_keep_mask_zeroes_hidden_entries():
    x = Tensor(np.array([[1.0, 100.0, 2.0]]))
    out = T.softmax(x, np.array([True, False, True]))
    assert out.data[0, 1] == 0.0
    np.testing.assert_allclose(out.data[0, [0, 2]], np.exp([1, 2]) / np.exp([1, 2]).sum(), rtol=1e-6)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                     elements=st.floats(-50, 50, allow_nan=False))


@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(Tensor(x.astype(np.float32)))
    assert (out.data >= 0).all()
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


@given(finite_rows, st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    with T.precision(64):
        a = T.softmax_rows(Tensor(x)).data
        b = T.softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-6)


# ---------------------------------------------------------------- concat

def test_concat_single_returns_input():
    t = Tensor(np.ones((2, 2)))
    assert T.concat([t]) is t


def test_concat_shape_arithmetic():
    out = T.concat([Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 1)))], axis=1)
    assert out.shape == (2, 4)


def test_concat_incompatible_shapes():
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 1)))], axis=1)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4), st.integers(0, 1))
def test_concat_slice_round_trip_bit_exact(seed, n1, n2, axis):
    rng = np.random.default_rng(seed)
    other = 3
    s1 = (n1, other) if axis == 0 else (other, n1)
    s2 = (n2, other) if axis == 0 else (other, n2)
    a, b = rng.normal(size=s1).astype(np.float32), rng.normal(size=s2).astype(np.float32)
    cat = T.concat([Tensor(a), Tensor(b)], axis=axis)
    np.testing.assert_array_equal(T.slice_rows(cat, 0, n1, axis).data, a)
    np.testing.assert_array_equal(T.slice_rows(cat, n1, n1 + n2, axis).data, b)


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_unreachable_tensor_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    T.backward(T.sum_all(x * 2.0))
    np.testing.assert_array_equal(y.grad, np.zeros(3))


def test_backward_non_scalar_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        T.backward(x * 2.0)


def _two_layer(x, w1, w2):
    return T.mean(T.gelu(x @ w1) @ w2)


@pytest.mark.parametrize("bits,tol", [(32, 1e-3), (64, 1e-6)])
def test_two_layer_composition(bits, tol):
    rng = np.random.default_rng(1)
    data = [rng.normal(size=s) for s in ((4, 5), (5, 6), (6, 2))]
    with T.precision(64):
        ref = [Tensor(d, requires_grad=True) for d in data]
        numeric = [numeric_grad(lambda: _two_layer(*ref), t) for t in ref]
    with T.precision(bits):
        ts = [Tensor(d.astype(T.get_dtype()), requires_grad=True) for d in data]
        T.backward(_two_layer(*ts))
    for t, n in zip(ts, numeric):
        assert relative_error(t.grad, n) <= tol


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_gradient_accumulation_is_additive(seed):
    rng = np.random.default_rng(seed)
    with T.precision(64):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)))

        def loss1():
            return T.sum_all(T.gelu(x @ w))

        def loss2():
            return T.mean(x * x)

        T.backward(loss1() + loss2())
        joint = x.grad.copy()
        x.grad = np.zeros_like(x.data)
        T.backward(loss1())
        T.backward(loss2())
    np.testing.assert_allclose(joint, x.grad, atol=1e-6)


def test_tape_is_topological_and_visits_once():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    z = y + y * x
    loss = T.sum_all(z)
    tape = T.build_tape(loss)
    pos = {id(n): i for i, n in enumerate(tape)}
    assert len(pos) == len(tape)
    for node in tape:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    T.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0 + 4.0, 2.0 + 4.0])


# ---------------------------------------------------------------- invariants, precision, init

def test_nonfinite_data_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.inf])


def test_grad_present_iff_requires_grad():
    assert Tensor(np.ones(2)).grad is None
    t = Tensor(np.ones((2, 3)), requires_grad=True)
    assert t.grad.shape == t.shape


def test_precision_switch_is_scoped():
    assert T.get_dtype() == np.float32
    with T.precision(64):
        assert T.zeros((1,)).dtype == np.float64
    assert T.zeros((1,)).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_default_precision(16)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_trunc_normal_bounds_and_scale():
    rng = T.make_rng(0)
    x = T.trunc_normal(rng, (100_000,), std=0.02, dtype=np.float64)
    assert np.abs(x).max() <= 0.04
    # truncation at 2 sigma shrinks the std by a factor of ~0.880
    assert x.std() == pytest.approx(0.02 * 0.8796, rel=0.02)


def test_rng_is_reproducible():
    a = T.make_rng(42).standard_normal(5)
    b = T.make_rng(42).standard_normal(5)
    np.testing.assert_array_equal(a, b)
