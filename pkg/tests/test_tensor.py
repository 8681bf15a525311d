import numpy as np
import pytest

from adwm import DimensionError, Tensor, UsageError, concat, conv2d, gradcheck, softmax, spatial_mean, stack


# ----------------------------------------------------------------------
# oracles

def conv2d_loops(x, k):
    """Direct nested-loop cross-correlation with zero padding, (C,H,W) input."""
    cout, cin, kh, kw = k.shape
    _, h, w = x.shape
    p = kh // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    y = np.zeros((cout, h, w))
    for o in range(cout):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for c in range(cin):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i + a, j + b] * k[o, c, a, b]
                y[o, i, j] = acc
    return y


# ----------------------------------------------------------------------
# matmul

def test_matmul_identity():
    a = Tensor(np.eye(2)) @ Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(a.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_hand_expansion():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as e:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    assert "(2, 3)" in str(e.value)


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 3, 4))
    b = rng.standard_normal((5, 4, 2))
    out = Tensor(a) @ Tensor(b)
    for i in range(5):
        assert np.allclose(out.data[i], a[i] @ b[i])


# ----------------------------------------------------------------------
# conv2d

def test_conv2d_dirac_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 6, 5))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    out = conv2d(Tensor(x), Tensor(k))
    assert np.array_equal(out.data, x)


def test_conv2d_ones_center():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data[0, 1, 1] == 9.0


def test_conv2d_zero_kernel():
    rng = np.random.default_rng(2)
    out = conv2d(Tensor(rng.standard_normal((2, 4, 4))), Tensor(np.zeros((5, 2, 3, 3))))
    assert np.all(out.data == 0.0)


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(5):
        cin, cout = rng.integers(1, 4, size=2)
        h, w = rng.integers(3, 8, size=2)
        x = rng.standard_normal((cin, h, w))
        k = rng.standard_normal((cout, cin, 3, 3))
        out = conv2d(Tensor(x), Tensor(k))
        assert np.allclose(out.data, conv2d_loops(x, k), atol=1e-12)


def test_conv2d_batched_matches_per_sample():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 3, 5, 7))
    k = rng.standard_normal((4, 3, 3, 3))
    out = conv2d(Tensor(x), Tensor(k))
    assert out.shape == (6, 4, 5, 7)
    for i in range(6):
        single = conv2d(Tensor(x[i]), Tensor(k))
        assert np.allclose(out.data[i], single.data, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_bad_padding():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), padding=2)


# ----------------------------------------------------------------------
# softmax

def test_softmax_uniform():
    out = softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_closed_form():
    out = softmax(Tensor(np.log([1.0, 2.0, 3.0])))
    assert np.allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_overflow_stability():
    out = softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] > 1.0 - 1e-12


def test_softmax_properties():
    rng = np.random.default_rng(5)
    for _ in range(100):
        v = rng.standard_normal(rng.integers(1, 9)) * rng.uniform(0.1, 50)
        y = softmax(Tensor(v)).data
        assert abs(y.sum() - 1.0) <= 1e-12
        assert np.all(y > 0) and np.all(y < 1 + 1e-15)
        assert np.argmax(y) == np.argmax(v)


def test_softmax_empty():
    with pytest.raises(DimensionError):
        softmax(Tensor(np.zeros(0)))


# ----------------------------------------------------------------------
# spatial_mean and elementwise

def test_spatial_mean_constant():
    assert np.allclose(spatial_mean(Tensor(np.full((3, 4, 4), 7.0))).data, 7.0)


def test_spatial_mean_direct():
    f = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert spatial_mean(f).data[0] == 2.5


def test_spatial_mean_1x1():
    x = np.array([[[3.0]], [[5.0]]])
    assert np.array_equal(spatial_mean(Tensor(x)).data, [3.0, 5.0])


def test_elementwise_identity_weighting():
    rng = np.random.default_rng(6)
    f = rng.standard_normal((3, 4, 5))
    out = Tensor(f) * Tensor(np.ones((3, 1, 1)))
    assert np.array_equal(out.data, f)


def test_channel_broadcast_equals_tiling():
    rng = np.random.default_rng(7)
    f = rng.standard_normal((4, 5, 6))
    w = rng.standard_normal(4)
    out = Tensor(f) * Tensor(w.reshape(4, 1, 1))
    tiled = f * np.tile(w.reshape(4, 1, 1), (1, 5, 6))
    assert np.array_equal(out.data, tiled)


def test_sigmoid_relu_points():
    assert Tensor(0.0).sigmoid().data == 0.5
    assert Tensor(-1.0).relu().data == 0.0
    assert Tensor(2.0).relu().data == 2.0
    assert Tensor(-1.0).leaky_relu().data == -0.01


def test_non_broadcastable_shapes():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((3, 4))) + Tensor(np.zeros((2, 4)))


# ----------------------------------------------------------------------
# backward

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(8).standard_normal((3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic_calculus_oracle():
    x = Tensor(np.random.default_rng(9).standard_normal(6), requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data, atol=1e-12)


def test_backward_detached_gets_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    d = x.detach()
    (d * d).sum().backward()
    assert x.grad is None and d.grad is None


def test_backward_requires_scalar():
    with pytest.raises(UsageError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_grad_accumulates_through_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    assert np.allclose(x.grad, [5.0])


# ----------------------------------------------------------------------
# gradcheck over every op

def test_gradcheck_sum_tight():
    x = Tensor(np.random.default_rng(10).standard_normal((3, 3)))
    assert gradcheck(lambda t: t.sum(), x) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_all_ops(seed):
    rng = np.random.default_rng(seed)
    fixed_k = Tensor(rng.standard_normal((2, 2, 3, 3)))

    cases = [
        (lambda a, b: (a + b).sum(), [(3, 4), (3, 4)]),
        (lambda a, b: (a * b).sum(), [(3, 4), (4,)]),
        (lambda a, b: (a - b * 2.0).sum(), [(2, 3), (2, 3)]),
        (lambda a, b: (a / (b * b + 1.0)).sum(), [(3,), (3,)]),
        (lambda a, b: (a @ b).sum(), [(3, 4), (4, 2)]),
        (lambda a: a.relu().sum(), [(4, 4)]),
        (lambda a: a.leaky_relu().sum(), [(4, 4)]),
        (lambda a: a.sigmoid().sum(), [(3, 3)]),
        (lambda a: (a * a + 0.5).sqrt().sum(), [(3, 3)]),
        (lambda a: a.abs().sum(), [(3, 3)]),
        (lambda a: a.mean(axis=1).sum(), [(3, 5)]),
        (lambda a: a.reshape(6).sum(), [(2, 3)]),
        (lambda a: (a.transpose(1, 0) @ a).sum(), [(3, 2)]),
        (lambda a: a.diagonal().sum(), [(4, 4)]),
        (lambda a: (softmax(a) * softmax(a)).sum(), [(5,)]),
        (lambda a: spatial_mean(a).sum(), [(2, 3, 3)]),
        (lambda a: conv2d(a, fixed_k).sum(), [(2, 4, 4)]),
        (lambda a, b: conv2d(b, a).sum(), [(2, 3, 3, 3), (3, 4, 4)]),
        (lambda a, b: concat([a, b], axis=0).sum(), [(2, 3), (1, 3)]),
        (lambda a, b: (stack([a, b], axis=0) * stack([b, a], axis=0)).sum(), [(2, 3), (2, 3)]),
    ]
    for fn, shapes in cases:
        # keep values away from relu/abs kinks and off softmax ties
        xs = [Tensor(rng.standard_normal(s) + 0.1 * np.sign(rng.standard_normal(s)))
              for s in shapes]
        err = gradcheck(fn, xs if len(xs) > 1 else xs[0])
        assert err < 1e-4, f"gradcheck failed for case {fn}: {err}"


def test_gradcheck_rejects_nonscalar():
    with pytest.raises(UsageError):
        gradcheck(lambda t: t * 2.0, Tensor(np.ones(3)))


# ----------------------------------------------------------------------
# determinism

def test_seeded_graph_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((4, 8, 8)), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 4, 3, 3)), requires_grad=True)
        out = (conv2d(x, k).sigmoid() * 3.0).sum()
        out.backward()
        return out.data.copy(), x.grad.copy(), k.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
