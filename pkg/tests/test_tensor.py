import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sharnn import tensor as T
from sharnn.errors import ConfigError, ContractError, DimensionError
from sharnn.gradcheck import finite_difference_check
from sharnn.tensor import Tape, Tensor

mpmath.mp.dps = 40


def param(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def grad_of(f, *xs):
    with Tape():
        out = f(*xs)
        out.backward()
    return [x.grad for x in xs]


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_row_by_column():
    out = T.matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]])))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    err = finite_difference_check(lambda: T.matmul(a, b).sum(), [a, b])
    assert err < 1e-6


def test_matmul_gradient_formulas():
    rng = np.random.default_rng(1)
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    ga, gb = grad_of(lambda x, y: (T.matmul(x, y) * Tensor(w)).sum(), a, b)
    np.testing.assert_allclose(ga, w @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(gb, a.data.T @ w, rtol=1e-12)


@pytest.mark.parametrize("shape_a,shape_b", [((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5))])
def test_batched_matmul_gradient(shape_a, shape_b):
    rng = np.random.default_rng(2)
    a, b = param(rng.normal(size=shape_a)), param(rng.normal(size=shape_b))
    w = Tensor(rng.normal(size=shape_a[:-1] + (shape_b[-1],)))
    assert finite_difference_check(lambda: (T.matmul(a, b) * w).sum(), [a, b]) < 1e-6


# ------------------------------------------------------------ activations


def test_sigmoid_tanh_at_zero():
    assert T.sigmoid(Tensor(np.array(0.0))).item() == 0.5
    assert T.tanh(Tensor(np.array(0.0))).item() == 0.0


def test_sigmoid_two_against_mpmath():
    expected = float(1 / (1 + mpmath.e ** -2))
    assert T.sigmoid(Tensor(np.array(2.0))).item() == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(0.880797, abs=5e-7)


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise"):
        y = T.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert y.tolist() == [0.0, 1.0]


def test_activation_ranges():
    x = Tensor(np.linspace(-30, 30, 101))
    s, t = T.sigmoid(x).data, T.tanh(x).data
    assert np.all((s >= 0) & (s <= 1)) and np.all((t >= -1) & (t <= 1))
    mid = Tensor(np.linspace(-5, 5, 11))
    assert np.all((T.sigmoid(mid).data > 0) & (T.sigmoid(mid).data < 1))
    assert np.all(np.abs(T.tanh(mid).data) < 1)


def _gelu_oracle(x):
    x = mpmath.mpf(x)
    return float(x * (1 + mpmath.erf(x / mpmath.sqrt(2))) / 2)


def test_gelu_values():
    assert T.gelu(Tensor(np.array(0.0))).item() == 0.0
    g1 = T.gelu(Tensor(np.array(1.0))).item()
    assert g1 == pytest.approx(_gelu_oracle(1.0), rel=1e-14)
    assert g1 == pytest.approx(0.841345, abs=5e-7)


def test_gelu_far_tail():
    got = T.gelu(Tensor(np.array(-10.0))).item()
    expected = _gelu_oracle(-10.0)
    assert expected == pytest.approx(-7.6e-23, rel=0.01)
    assert got == pytest.approx(expected, rel=1e-10)


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    assert T.softmax(Tensor(np.array([0.0, 0.0]))).data.tolist() == [0.5, 0.5]
    assert T.softmax(Tensor(np.array([1000.0, 1000.0]))).data.tolist() == [0.5, 0.5]
    got = T.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data
    den = sum(mpmath.e**k for k in (1, 2, 3))
    oracle = [float(mpmath.e**k / den) for k in (1, 2, 3)]
    np.testing.assert_allclose(got, oracle, rtol=1e-14)
    np.testing.assert_allclose(got, [0.090031, 0.244728, 0.665241], atol=5e-7)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
def test_softmax_slices_sum_to_one(x):
    for axis in (0, 1):
        s = T.softmax(Tensor(x), axis=axis).data.sum(axis=axis)
        assert np.all(np.abs(s - 1) < 1e-9)


# ------------------------------------------------------------- layer norm


def _ln(x, eps=1e-5):
    H = np.shape(x)[-1]
    return T.layer_norm(Tensor(np.asarray(x, dtype=np.float64)), Tensor(np.ones(H)), Tensor(np.zeros(H)), eps)


def test_layer_norm_constant_row_is_zero():
    assert np.array_equal(_ln([[3.0, 3.0, 3.0]]).data, np.zeros((1, 3)))


def test_layer_norm_two_values():
    # mean 2, population std 1
    np.testing.assert_allclose(_ln([[1.0, 3.0]]).data, [[-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)]], rtol=1e-14)
    np.testing.assert_allclose(_ln([[1.0, 3.0]]).data, [[-1.0, 1.0]], atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 9), elements=st.floats(-100, 100)))
def test_layer_norm_zero_mean(x):
    assert np.all(np.abs(_ln(x).data.mean(axis=-1)) < 1e-7)


def test_layer_norm_unit_variance_for_spread_rows():
    x = np.random.default_rng(3).normal(size=(20, 64))
    assert np.all(np.abs(_ln(x).data.var(axis=-1) - 1) < 1e-4)


def test_layer_norm_rejects_wrong_affine_size():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# ----------------------------------------------------------------- dropout


def test_dropout_identity_cases():
    x = Tensor(np.arange(6.0))
    assert T.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert T.dropout(x, 0.5, False, None) is x


def test_dropout_preserves_expectation():
    x = Tensor(np.ones(10**6))
    y = T.dropout(x, 0.1, True, np.random.default_rng(0)).data
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) <= {0.0, 1 / 0.9}


def test_dropout_rate_one_is_config_error():
    with pytest.raises(ConfigError):
        T.dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


def test_dropout_row_mask_broadcasts():
    y = T.dropout(Tensor(np.ones((50, 4))), 0.5, True, np.random.default_rng(0), mask_shape=(50, 1)).data
    assert np.all((y == 0).all(axis=1) | (y == 2).all(axis=1))


def test_dropout_deterministic_given_seed():
    a = T.dropout(Tensor(np.ones(100)), 0.3, True, np.random.default_rng(7)).data
    b = T.dropout(Tensor(np.ones(100)), 0.3, True, np.random.default_rng(7)).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- backward


def test_backward_sum():
    (g,) = grad_of(lambda x: x.sum(), param([1.0, 2.0, 3.0]))
    assert g.tolist() == [1.0, 1.0, 1.0]


def test_backward_square():
    (g,) = grad_of(lambda x: (x * x).sum(), param([1.0, 2.0]))
    assert g.tolist() == [2.0, 4.0]


def test_reused_tensor_sums_paths():
    (g,) = grad_of(lambda x: (x + x).sum(), param([5.0]))
    assert g.tolist() == [2.0]


def test_backward_rejects_non_scalar():
    x = param([1.0, 2.0])
    with Tape():
        y = x * 2.0
        with pytest.raises(ContractError):
            y.backward()


def test_backward_requires_tape():
    with pytest.raises(ContractError):
        (param([1.0]) * 2.0).sum().backward()


def test_tape_replays_in_reverse_order_and_clears():
    order = []
    x = param([1.0, 2.0])
    with Tape() as tape:
        y = T.tanh(x)
        z = T.sigmoid(y)
        loss = z.sum()
    assert [outs[0] for outs, _, _ in tape.records] == [y, z, loss]
    for k, (outs, ins, fn) in enumerate(tape.records):
        def spy(*g, _fn=fn, _out=outs[0]):
            order.append(_out)
            return _fn(*g)

        tape.records[k] = (outs, ins, spy)
    loss.backward()
    assert order == [loss, z, y]
    tape.clear()
    assert len(tape) == 0 and loss._tape is None


def test_every_reachable_tensor_gets_grad():
    x = param([0.3, -0.2])
    with Tape():
        y = T.tanh(x)
        z = y * y
        loss = z.sum()
        loss.backward()
    assert all(t.grad is not None and t.grad.shape == t.shape for t in (x, y, z, loss))


def test_no_tape_means_no_recording():
    y = T.tanh(param([1.0]))
    assert y._tape is None and not y.requires_grad


# -------------------------------------------------- primitive gradient checks

rng = np.random.default_rng(42)
PRIMS = {
    "sigmoid": (lambda x: T.sigmoid(x), (3, 4)),
    "tanh": (lambda x: T.tanh(x), (3, 4)),
    "gelu": (lambda x: T.gelu(x), (3, 4)),
    "exp": (lambda x: T.exp(x), (5,)),
    "softmax": (lambda x: T.softmax(x, axis=-1), (3, 5)),
    "softmax_axis0": (lambda x: T.softmax(x, axis=0), (3, 5)),
    "transpose": (lambda x: T.transpose(x, (2, 0, 1)), (2, 3, 4)),
    "reshape": (lambda x: T.reshape(x, (6, 2)), (3, 4)),
    "getitem": (lambda x: x[1:, ::2], (3, 4)),
    "fancy_getitem": (lambda x: x[np.array([0, 2, 0])], (3, 4)),
    "sum_axis": (lambda x: x.sum(axis=1), (3, 4)),
    "mean": (lambda x: x.mean(axis=0, keepdims=True), (3, 4)),
    "concat": (lambda x: T.concat([x, x * x], axis=1), (3, 4)),
    "stack": (lambda x: T.stack([x, T.tanh(x)], axis=1), (3, 4)),
    "unbind": (lambda x: T.stack(T.unbind(x, 1)[::-1], 0), (3, 4)),
    "broadcast_mul": (lambda x: x * T.sigmoid(x[0]), (3, 4)),
    "broadcast_add": (lambda x: x + x.sum(axis=0, keepdims=True), (3, 4)),
    "scale_neg_sub": (lambda x: (1.0 - x) / 3.0 - x, (4,)),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients(name):
    f, shape = PRIMS[name]
    x = param(rng.normal(size=shape))
    out0 = f(x)
    w = Tensor(np.random.default_rng(0).normal(size=out0.shape))
    assert finite_difference_check(lambda: (f(x) * w).sum(), [x]) < 1e-6


def test_log_gradient():
    x = param(np.random.default_rng(5).uniform(0.5, 2.0, size=6))
    assert finite_difference_check(lambda: T.log(x).sum(), [x]) < 1e-6


def test_layer_norm_gradient():
    r = np.random.default_rng(6)
    x, g, b = param(r.normal(size=(2, 3, 5))), param(r.normal(size=5)), param(r.normal(size=5))
    w = Tensor(r.normal(size=(2, 3, 5)))
    assert finite_difference_check(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-6


def test_embedding_gradient_with_repeats():
    r = np.random.default_rng(7)
    W = param(r.normal(size=(6, 3)))
    ids = np.array([[0, 5], [5, 2]])
    w = Tensor(r.normal(size=(2, 2, 3)))
    assert finite_difference_check(lambda: (T.embedding(W, ids) * w).sum(), [W]) < 1e-6


def test_cross_entropy_gradient():
    r = np.random.default_rng(8)
    logits = param(r.normal(size=(7, 11)))
    targets = r.integers(0, 11, size=7)
    assert finite_difference_check(lambda: T.cross_entropy(logits, targets), [logits]) < 1e-6


def test_cross_entropy_value():
    logits = np.random.default_rng(9).normal(size=(4, 5))
    t = np.array([0, 1, 4, 2])
    expected = -np.mean([logits[i, t[i]] - np.log(np.exp(logits[i]).sum()) for i in range(4)])
    assert T.cross_entropy(Tensor(logits), t).item() == pytest.approx(expected, rel=1e-13)


def test_dropout_gradient_uses_same_mask():
    x = param(np.random.default_rng(10).normal(size=(4, 4)))
    # a fresh rng per call keeps f deterministic
    f = lambda: T.dropout(x, 0.3, True, np.random.default_rng(0)).sum()
    assert finite_difference_check(f, [x]) < 1e-6


def test_lstm_pointwise_gradient():
    r = np.random.default_rng(11)
    z, c = param(r.normal(size=(2, 12))), param(r.normal(size=(2, 3)))
    w1, w2 = Tensor(r.normal(size=(2, 3))), Tensor(r.normal(size=(2, 3)))

    def f():
        h, c2 = T.lstm_pointwise(z, c)
        return (h * w1).sum() + (c2 * w2).sum()

    assert finite_difference_check(f, [z, c]) < 1e-6


def test_lstm_sequence_matches_chained_steps_and_gradients():
    r = np.random.default_rng(12)
    Tn, B, H = 5, 2, 3
    pre, W = param(r.normal(size=(Tn, B, 4 * H))), param(r.normal(size=(H, 4 * H)) * 0.5)
    h0, c0 = param(r.normal(size=(B, H))), param(r.normal(size=(B, H)))
    w = Tensor(r.normal(size=(Tn, B, H)))

    hs, hT, cT = T.lstm_sequence(pre, W, h0, c0)
    h, c, outs = h0, c0, []
    for t in range(Tn):
        h, c = T.lstm_pointwise(pre[t] + T.matmul(h, W), c)
        outs.append(h.data)
    np.testing.assert_allclose(hs.data, np.stack(outs), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(cT.data, c.data, rtol=1e-13)

    def f():
        hs, hT, cT = T.lstm_sequence(pre, W, h0, c0)
        return (hs * w).sum() + hT.sum() + (cT * cT).sum()

    assert finite_difference_check(f, [pre, W, h0, c0]) < 1e-6


def test_ops_are_deterministic():
    r = np.random.default_rng(13)
    x = r.normal(size=(3, 8))

    def run(seed):
        t = Tensor(x)
        return T.dropout(T.gelu(T.softmax(t)), 0.2, True, np.random.default_rng(seed)).data

    assert np.array_equal(run(1), run(1))
