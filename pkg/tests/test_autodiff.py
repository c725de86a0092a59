"""Tensor primitives, reverse-mode gradients and the finite-difference oracle."""

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabdesk import autodiff as ad
from tabdesk.autodiff import DimensionError, Tensor, backward, finite_diff_check

TOL = 1e-4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


def weighted_sum(out: Tensor, rng) -> Tensor:
    """Contract with fixed random weights so every output coordinate matters."""
    w = np.random.default_rng(99).normal(size=out.shape)
    return (out * w).sum()


# ---------------------------------------------------------------------------
# forward semantics


class TestMatmul:
    def test_identity(self, rng):
        A = rng.normal(size=(2, 2))
        np.testing.assert_array_equal(ad.matmul(Tensor(A), Tensor(np.eye(2))).data, A)

    def test_annihilator(self, rng):
        A = rng.normal(size=(3, 3))
        assert np.all(ad.matmul(Tensor(A), Tensor(np.zeros((3, 2)))).data == 0)

    def test_triple_loop_oracle(self, rng):
        A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += A[i, k] * B[k, j]
        np.testing.assert_allclose(ad.matmul(Tensor(A), Tensor(B)).data, ref, rtol=0, atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(3, 5))
        a = ad.softmax(Tensor(x)).data
        b = ad.softmax(Tensor(x + 123.4)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_log2(self):
        np.testing.assert_allclose(ad.softmax(Tensor(np.array([np.log(2.0), 0.0]))).data, [2 / 3, 1 / 3], atol=1e-15)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_sums_to_one(self, values):
        p = ad.softmax(Tensor(np.array(values))).data
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-9

    def test_masked_slots_vanish(self, rng):
        x = Tensor(rng.normal(size=(2, 4)))
        mask = np.array([[True, False, False, True], [False, False, True, False]])
        p = ad.softmax(ad.mask_fill(x, mask)).data
        assert np.all(p[mask] < 1e-12)
        np.testing.assert_allclose(p.sum(-1), 1.0)

    def test_mask_constant_per_precision(self):
        assert ad.mask_value(np.float32) == -1e9
        assert ad.mask_value(np.float64) == -1e30


class TestRmsNorm:
    def test_constant_vector(self):
        out = ad.rms_norm(Tensor(np.full(4, 2.5)), Tensor(np.ones(4)), eps=1e-12).data
        np.testing.assert_allclose(out, 1.0, atol=1e-9)

    def test_zero_vector(self):
        out = ad.rms_norm(Tensor(np.zeros(3)), Tensor(np.ones(3)), eps=1e-6).data
        assert np.all(out == 0) and np.all(np.isfinite(out))

    def test_three_four(self):
        out = ad.rms_norm(Tensor(np.array([3.0, 4.0])), Tensor(np.ones(2)), eps=0.0).data
        np.testing.assert_allclose(out, np.array([3.0, 4.0]) / np.sqrt(12.5), atol=1e-14)
        np.testing.assert_allclose(out, [0.848528137, 1.131370850], atol=1e-9)


class TestRope:
    def test_position_zero_is_identity(self, rng):
        x = rng.normal(size=(3, 8))
        np.testing.assert_allclose(ad.rope_rotate(Tensor(x), np.zeros(3)).data, x, atol=0)

    def test_isometry(self, rng):
        x = rng.normal(size=(6, 16))
        out = ad.rope_rotate(Tensor(x), np.arange(6) * 7.0).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-10)
        # every rotated pair keeps its own norm
        np.testing.assert_allclose(np.hypot(out[:, 0::2], out[:, 1::2]), np.hypot(x[:, 0::2], x[:, 1::2]), atol=1e-10)

    def test_relative_position(self, rng):
        q, k = rng.normal(size=8), rng.normal(size=8)

        def score(p1, p2):
            a = ad.rope_rotate(Tensor(q[None]), np.array([p1])).data[0]
            b = ad.rope_rotate(Tensor(k[None]), np.array([p2])).data[0]
            return a @ b

        assert abs(score(5, 3) - score(9, 7)) < 1e-10

    def test_odd_width_rejected(self):
        with pytest.raises(DimensionError):
            ad.rope_rotate(Tensor(np.ones((2, 5))), np.arange(2))


class TestElementwiseAndIndexing:
    def test_tanh_zero(self):
        assert ad.tanh(Tensor(np.zeros(1))).data[0] == 0.0

    def test_gather_copy_oracle(self, rng):
        A = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(ad.gather(Tensor(A), [2, 0], axis=0).data, np.stack([A[2], A[0]]))

    def test_gather_out_of_range(self):
        with pytest.raises(DimensionError):
            ad.gather(Tensor(np.ones((3, 2))), [3], axis=0)

    def test_mask_shape_violation(self):
        with pytest.raises(DimensionError):
            ad.mask_fill(Tensor(np.ones((2, 3))), np.ones((3, 2), dtype=bool))

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)

    def test_finite_on_large_inputs(self, rng):
        x = Tensor(rng.normal(size=(4, 6)) * 1e3)
        for fn in (ad.tanh, ad.softmax, ad.gelu, ad.relu, ad.sin):
            assert np.all(np.isfinite(fn(x).data))

    def test_float32_preserved(self, rng):
        x = Tensor(rng.normal(size=(2, 4)).astype(np.float32))
        g = Tensor(np.ones(4, dtype=np.float32))
        for out in (ad.gelu(x), ad.rms_norm(x, g), ad.softmax(x), x * 0.5 + 1.0, 2.0 / (x * x + 1.0)):
            assert out.dtype == np.float32


# ---------------------------------------------------------------------------
# backward


class TestBackward:
    def test_square(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_softmax_sum_is_constant(self, rng):
        x = leaf(rng, 5)
        backward(ad.softmax(x).sum())
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array(1.5), requires_grad=True)
        backward(x + x)
        assert x.grad == 2.0

    def test_non_scalar_rejected(self, rng):
        with pytest.raises(ValueError):
            backward(leaf(rng, 3) * 2.0)

    def test_every_reachable_node_has_matching_grad(self, rng):
        x, W = leaf(rng, 4, 3), leaf(rng, 3, 2)
        h = ad.tanh(ad.matmul(x, W))
        s = ad.softmax(h)
        backward(s.sum() + (h * h).mean())
        for node in (x, W, h, s):
            assert node.grad is not None and node.grad.shape == node.shape

    def test_each_node_visited_once(self, rng):
        calls = []
        x = leaf(rng, 3)
        y = x * 2.0
        inner = y._backward

        def spy(g):
            calls.append(1)
            return inner(g)

        y._backward = spy
        backward((y + y + y).sum())
        assert len(calls) == 1
        np.testing.assert_allclose(x.grad, 6.0)

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng, 3)
        with ad.no_grad():
            y = ad.tanh(x) * 2.0
        assert y._parents == () and not y.requires_grad

    def test_no_grad_is_per_thread(self, rng):
        x = leaf(rng, 3)
        inside, release = threading.Event(), threading.Event()

        def worker():
            with ad.no_grad():
                inside.set()
                release.wait(5)

        t = threading.Thread(target=worker)
        t.start()
        inside.wait(5)
        y = x * 2.0
        release.set()
        t.join()
        assert y.requires_grad and ad.is_grad_enabled()

    def test_two_layer_perceptron(self, rng):
        X = rng.normal(size=(6, 4))
        y = rng.normal(size=(6, 1))
        W1, b1, W2, b2 = leaf(rng, 4, 5), leaf(rng, 5), leaf(rng, 5, 1), leaf(rng, 1)

        def loss():
            h = ad.tanh(ad.linear(Tensor(X), W1, b1))
            r = ad.linear(h, W2, b2) - y
            return (r * r).mean()

        assert finite_diff_check(loss, [W1, b1, W2, b2], step=1e-5) < TOL


# ---------------------------------------------------------------------------
# finite-difference oracle


class TestFiniteDiffOracle:
    def test_linear_is_exact(self, rng):
        w = np.array([1.5, -2.0, 0.75, 3.0, -1.25])
        assert finite_diff_check(lambda x: (x * w).sum(), leaf(rng, 5)) < 1e-10

    def test_cubic(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        assert finite_diff_check(lambda t: (t * t * t).sum(), x) < 1e-8
        with ad.no_grad():
            h = 1e-5
            num = (((2 + h) ** 3) - ((2 - h) ** 3)) / (2 * h)
        assert abs(num - 12.0) < 1e-8

    def test_corrupted_adjoint_detected(self, rng):
        def bad_square(x):
            return Tensor._make(x.data**2, (x,), lambda g: (g * x.data,), "bad_square")

        assert finite_diff_check(lambda x: bad_square(x).sum(), leaf(rng, 4)) > 1e-2

    def test_five_point_stencil(self):
        # exp has no vanishing high derivatives, so the stencil order shows in the error
        x = Tensor(np.array([1.0]), requires_grad=True)
        three = finite_diff_check(lambda t: ad.exp(t).sum(), x, step=1e-2, points=3)
        five = finite_diff_check(lambda t: ad.exp(t).sum(), x, step=1e-2, points=5)
        assert three > 1e-6 and five < 1e-8

    def test_stencil_choice_validated(self, rng):
        with pytest.raises(ValueError):
            finite_diff_check(lambda x: x.sum(), leaf(rng, 2), points=4)

    def test_scalar_leaf_keeps_shape(self):
        lam = Tensor(np.array(0.5), requires_grad=True)
        w = np.array([1.0, -2.0])
        assert finite_diff_check(lambda: (lam * w).sum(), [lam]) < 1e-8
        assert lam.shape == ()


class TestOpCounting:
    def test_counts_and_shapes(self, rng):
        a, W = Tensor(rng.normal(size=(7, 3))), Tensor(rng.normal(size=(3, 2)))
        with ad.count_ops() as log:
            ad.softmax(ad.linear(a, W))
            ad.matmul(a, W)
        assert log.counts == {"linear": 1, "softmax": 1, "matmul": 1}
        assert log.touched_extent(7) and not log.touched_extent(5)

    def test_inactive_outside_block(self, rng):
        with ad.count_ops() as log:
            pass
        ad.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
        assert not log.counts


def _primitive_cases(rng):
    """(name, f, leaves) triples: one per primitive, each reduced to a scalar."""
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    pos = leaf(rng, 3, 4, low=0.5)
    away = Tensor(np.sign(rng.normal(size=(3, 4))) * (0.2 + np.abs(rng.normal(size=(3, 4)))), requires_grad=True)
    u, v = leaf(rng, 3, 4), leaf(rng, 3, 4)
    v.data = u.data + np.where(rng.random((3, 4)) < 0.5, 0.5, -0.5)  # no ties
    row = leaf(rng, 4)
    W, bias = leaf(rng, 4, 3), leaf(rng, 3)
    gain = leaf(rng, 4)
    rq = leaf(rng, 2, 3, 6)
    mask = rng.random((3, 4)) < 0.3
    mask[:, 0] = False
    c1, c2 = leaf(rng, 2, 3), leaf(rng, 1, 3)
    r = lambda t: weighted_sum(t, rng)  # noqa: E731
    return [
        ("add", lambda: r(a + row), [a, row]),
        ("sub", lambda: r(a - 2.0 * u), [a, u]),
        ("mul", lambda: r(a * u), [a, u]),
        ("div", lambda: r(a / pos), [a, pos]),
        ("rdiv", lambda: r(1.0 / pos), [pos]),
        ("neg", lambda: r(-a), [a]),
        ("pow", lambda: r(pos**1.7), [pos]),
        ("matmul", lambda: r(ad.matmul(a, b)), [a, b]),
        ("linear", lambda: r(ad.linear(a, W, bias)), [a, W, bias]),
        ("softmax", lambda: r(ad.softmax(a, axis=-1)), [a]),
        ("softmax_axis0", lambda: r(ad.softmax(a, axis=0)), [a]),
        ("log_softmax", lambda: r(ad.log_softmax(a)), [a]),
        ("rms_norm", lambda: r(ad.rms_norm(a, gain, 1e-6)), [a, gain]),
        ("rope_rotate", lambda: r(ad.rope_rotate(rq, np.array([0.0, 3.0, 11.0]), base=100.0)), [rq]),
        ("tanh", lambda: r(ad.tanh(a)), [a]),
        ("exp", lambda: r(ad.exp(a)), [a]),
        ("log", lambda: r(ad.log(pos)), [pos]),
        ("sin", lambda: r(ad.sin(a)), [a]),
        ("relu", lambda: r(ad.relu(away)), [away]),
        ("gelu", lambda: r(ad.gelu(a)), [a]),
        ("maximum", lambda: r(ad.maximum(u, v)), [u, v]),
        ("clip", lambda: r(ad.clip(away, -0.1, 0.1) + ad.clip(a, -5.0, 5.0)), [away, a]),
        ("gather", lambda: r(ad.gather(a, [2, 0, 2], axis=0)), [a]),
        ("gather_axis1", lambda: r(ad.gather(a, [3, 1], axis=1)), [a]),
        ("mask_fill", lambda: r(ad.softmax(ad.mask_fill(a, mask))), [a]),
        ("concat", lambda: r(ad.concat([c1, c2], axis=0)), [c1, c2]),
        ("stack", lambda: r(ad.stack([a, u], axis=1)), [a, u]),
        ("sum", lambda: r(a.sum(axis=0)), [a]),
        ("mean", lambda: r(a.mean(axis=-1, keepdims=True)), [a]),
        ("reshape", lambda: r(a.reshape(2, 6)), [a]),
        ("transpose", lambda: r(a.transpose(1, 0)), [a]),
        ("broadcast_to", lambda: r(row.broadcast_to((3, 4))), [row]),
        ("getitem_basic", lambda: r(a[1:, ::2]), [a]),
        ("getitem_advanced", lambda: r(a[np.array([0, 0, 2])]), [a]),
    ]


@pytest.mark.parametrize("case", range(34))
def test_primitive_gradients(case):
    name, f, leaves = _primitive_cases(np.random.default_rng(7))[case]
    err = finite_diff_check(f, leaves, step=1e-5)
    assert err < TOL, f"{name}: {err:.2e}"


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_random_shapes_matmul_softmax(r, c, seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, r, c), leaf(rng, c, 3)
    w = rng.normal(size=(r, 3))
    assert finite_diff_check(lambda: (ad.softmax(ad.matmul(a, b)) * w).sum(), [a, b]) < TOL
