import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semvpr import tensor as T
from semvpr.tensor import DimensionError, Tensor

from gradcheck import away_from_zero, check

SEEDS = range(20)


def naive_conv(x, w, b, stride, padding):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                out[oc, i, j] = acc
    return out


def weighted_sum(t, rng):
    """Contract an arbitrary-shape output with fixed random weights to get a scalar."""
    return T.sum_(T.mul(t, rng.standard_normal(t.shape)))


# -- conv2d ----------------------------------------------------------------------

def test_conv2d_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 9.0


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 5, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("shape,wshape,stride,padding", [
    ((2, 4, 4), (3, 2, 3, 3), 1, 1),
    ((3, 7, 6), (4, 3, 3, 3), 2, 1),
    ((2, 9, 9), (2, 2, 4, 4), 2, 1),
    ((1, 8, 5), (2, 1, 5, 5), 1, 2),
    ((3, 6, 6), (2, 3, 2, 2), 3, 0),
])
def test_conv2d_matches_loop_oracle(shape, wshape, stride, padding):
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal(shape), rng.standard_normal(wshape), rng.standard_normal(wshape[0])
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv2d_batched_matches_single():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((3, 2, 6, 6)), rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4)
    batched = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], T.conv2d(Tensor(x[i]), Tensor(w), Tensor(b), 2, 1).data,
                                   atol=1e-14)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradient(seed):
    rng = np.random.default_rng(seed)
    stride, padding = [(1, 0), (1, 1), (2, 1)][seed % 3]
    x, w, b = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    check(lambda x, w, b: weighted_sum(T.conv2d(x, w, b, stride=stride, padding=padding),
                                       np.random.default_rng(seed + 100)), [x, w, b])


# -- upsample ------------------------------------------------------------------------

def test_upsample_broadcast_single_cell():
    out = T.upsample_nearest(Tensor(np.full((1, 1, 1), 5.0)), (2, 2))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 5.0))


def test_upsample_same_shape_is_identity():
    x = np.arange(12.0).reshape(1, 3, 4)
    np.testing.assert_array_equal(T.upsample_nearest(Tensor(x), (3, 4)).data, x)


def test_upsample_2x2_to_4x4_blocks():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = T.upsample_nearest(Tensor(x), (4, 4)).data[0]
    # out[i, j] = x[floor(i*2/4), floor(j*2/4)]
    expected = np.array([[x[0, i * 2 // 4, j * 2 // 4] for j in range(4)] for i in range(4)])
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(out[:2, :2], np.full((2, 2), 1.0))
    np.testing.assert_array_equal(out[2:, 2:], np.full((2, 2), 4.0))


def test_upsample_rejects_zero_extent():
    with pytest.raises(DimensionError):
        T.upsample_nearest(Tensor(np.ones((1, 2, 2))), (0, 2))


def test_upsample_backward_accumulates_replicas():
    x = Tensor(np.ones((1, 2, 3)), requires_grad=True)
    T.sum_(T.upsample_nearest(x, (5, 7))).backward()
    ri = (np.arange(5) * 2) // 5
    rj = (np.arange(7) * 3) // 7
    expected = np.outer(np.bincount(ri, minlength=2), np.bincount(rj, minlength=3))
    np.testing.assert_array_equal(x.grad[0], expected)


@pytest.mark.parametrize("seed", SEEDS)
def test_upsample_gradient(seed):
    rng = np.random.default_rng(seed)
    target = [(4, 4), (5, 7), (3, 3), (6, 9)][seed % 4]
    check(lambda x: weighted_sum(T.upsample_nearest(x, target), np.random.default_rng(seed)),
          [rng.standard_normal((2, 3, 3))])


# -- softplus ---------------------------------------------------------------------------

def test_softplus_at_zero():
    assert T.softplus(Tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-15)


def test_softplus_saturates():
    assert abs(T.softplus(Tensor(50.0)).item() - 50.0) < 1e-12


def test_softplus_negative_tail_matches_extended_precision():
    mpmath.mp.dps = 50
    expected = float(mpmath.log1p(mpmath.exp(-50)))
    got = T.softplus(Tensor(-50.0)).item()
    assert got > 0
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(1.93e-22, rel=1e-2)


@given(st.floats(min_value=-700, max_value=700, allow_nan=False))
@settings(max_examples=200, deadline=None)
def test_softplus_strictly_positive(x):
    assert T.softplus(Tensor(x)).item() > 0


def test_softplus_no_overflow():
    with np.errstate(over="raise"):
        out = T.softplus(Tensor(np.array([1e4, -1e4, 800.0])))
    assert np.isfinite(out.data).all()


# -- backward contract -----------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.sum_(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_is_additive():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 4))

    def losses(x):
        return T.sum_(T.softplus(x) * x), T.sum_(T.sigmoid(x * 3.0))

    x = Tensor(a, requires_grad=True)
    l1, l2 = losses(x)
    (l1 + l2).backward()
    together = x.grad.copy()

    x1 = Tensor(a, requires_grad=True)
    losses(x1)[0].backward()
    x2 = Tensor(a, requires_grad=True)
    losses(x2)[1].backward()
    np.testing.assert_allclose(together, x1.grad + x2.grad, rtol=0, atol=1e-14)


def test_backward_visits_nodes_once_in_reverse_order():
    visits = []
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    z = y + y  # y feeds z twice
    w = T.sum_(z * y)
    for t in (y, z, w):
        inner = t._backward

        def spy(g, inner=inner, t=t):
            visits.append(t._seq)
            return inner(g)

        t._backward = spy
    w.backward()
    assert visits == sorted(visits, reverse=True)
    assert len(visits) == len(set(visits)) == 3
    # d/dx of sum((4x)(2x)) = 16x
    np.testing.assert_array_equal(x.grad, [16.0, 16.0])


def test_grad_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.sum_(x).backward()
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_detach_cuts_gradient():
    x = Tensor([2.0], requires_grad=True)
    T.sum_(x * x.detach()).backward()
    np.testing.assert_array_equal(x.grad, [2.0])


# -- per-op gradient checks ------------------------------------------------------------------

UNARY = {
    "relu": lambda x: T.relu(x),
    "leaky_relu": lambda x: T.leaky_relu(x, 0.2),
    "sigmoid": lambda x: T.sigmoid(x),
    "softplus": lambda x: T.softplus(x),
    "exp": lambda x: T.exp(x * 0.3),
    "mean_axes": lambda x: T.mean(x, axis=(1, 2)),
    "sum_axis": lambda x: T.sum_(x, axis=0, keepdims=True),
    "l2_normalize_last": lambda x: T.l2_normalize(x, axis=-1),
    "l2_normalize_spatial": lambda x: T.l2_normalize(x, axis=(-2, -1)),
    "log_softmax": lambda x: T.log_softmax(x, axis=0),
    "softmax": lambda x: T.softmax(x, axis=1),
    "reshape_transpose": lambda x: T.transpose(T.reshape(x, (3, 8)), (1, 0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_gradient(name, seed):
    rng = np.random.default_rng(seed)
    fn = UNARY[name]
    check(lambda x: weighted_sum(fn(x), np.random.default_rng(seed + 7)), [away_from_zero(rng, (2, 3, 4))])


@pytest.mark.parametrize("seed", SEEDS)
def test_binary_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    probe = np.random.default_rng(seed + 1)
    w = probe.standard_normal((3, 4))
    check(lambda a, b: T.sum_((a * b + a - b) * w), [a, b])
    check(lambda a, b: T.sum_(T.div(a, b) * w), [a, 1.5 + np.abs(b)])
    wc, ws = probe.standard_normal((3, 8)), probe.standard_normal((2, 3, 4))
    check(lambda a, b: T.sum_(T.concat([a, b * 2.0], axis=1) * wc), [a, b])
    check(lambda a, b: T.sum_(T.stack([a, b], axis=0) * ws), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_broadcast_mul_gradient(seed):
    rng = np.random.default_rng(seed)
    x, m = rng.standard_normal((4, 3, 5)), rng.standard_normal((1, 3, 5))
    check(lambda x, m: weighted_sum(T.broadcast_mul(x, m), np.random.default_rng(seed)), [x, m])


@pytest.mark.parametrize("seed", SEEDS)
def test_power_and_root_gradients(seed):
    rng = np.random.default_rng(seed)
    x = 0.2 + rng.random((2, 3))
    p = np.array(1.0 + 3.0 * rng.random())
    w = rng.standard_normal((2, 3))
    check(lambda x, p: T.sum_(T.power(x, p) * w), [x, p])
    check(lambda x, p: T.sum_(T.root(x, p) * w), [x, p])


def test_power_at_zero_is_finite():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    p = Tensor(3.0, requires_grad=True)
    T.sum_(T.root(T.power(x, p), p)).backward()
    assert np.isfinite(x.grad).all() and np.isfinite(p.grad).all()


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal((3, 2))
    check(lambda a, b: T.sum_(T.matmul(a, b) * probe), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
    check(lambda a, b: T.matmul(a, b), [rng.standard_normal(5), rng.standard_normal(5)])
    v = rng.standard_normal(3)
    check(lambda a, b: T.sum_(T.matmul(a, b) * v), [rng.standard_normal((3, 4)), rng.standard_normal(4)])


@pytest.mark.parametrize("seed", SEEDS)
def test_euclidean_distance_gradient(seed):
    rng = np.random.default_rng(seed)
    check(lambda a, b: T.euclidean_distance(a, b), [rng.standard_normal(6), rng.standard_normal(6)])


@pytest.mark.parametrize("seed", SEEDS)
def test_log_and_sqrt_gradients(seed):
    rng = np.random.default_rng(seed)
    x = 0.5 + rng.random(5)
    w = rng.standard_normal(5)
    check(lambda x: T.sum_(T.log(x) * w), [x])
    check(lambda x: T.sum_(T.sqrt(x) * w), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_index_gradient(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(4)
    check(lambda x: T.sum_(T.index(x, seed % 3) * w), [rng.standard_normal((3, 4))])


def test_euclidean_distance_length_mismatch():
    with pytest.raises(DimensionError):
        T.euclidean_distance(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_l2_normalize_zero_slice_is_finite():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    T.sum_(T.l2_normalize(x, axis=-1)).backward()
    assert np.isfinite(x.grad).all()
