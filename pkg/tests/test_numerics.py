import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aewin.numerics import (
    GradTape,
    NonFiniteError,
    Tensor,
    add,
    count_macs,
    cross_entropy,
    cyclic_roll,
    depthwise_conv3x3,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    reshape,
    softmax_rows,
    space_to_depth,
    sum_all,
)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv(x, k):
    h, w, c = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                for di in range(3):
                    for dj in range(3):
                        y, z = i + di - 1, j + dj - 1
                        if 0 <= y < h and 0 <= z < w:
                            out[i, j, ch] += k[di, dj, ch] * x[y, z, ch]
    return out


class TestTensor:
    def test_rejects_nonfinite(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])

    def test_data_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_copies_input(self):
        a = np.ones(3)
        t = Tensor(a)
        a[0] = 7.0
        assert t.data[0] == 1.0

    def test_rejects_zero_dimension(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((0, 3)))

    def test_overflow_raises(self):
        big = Tensor([[1e200]])
        with pytest.raises(NonFiniteError):
            matmul(big, big)


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_hand_product(self):
        assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    @pytest.mark.parametrize("seed", range(5))
    def test_triple_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12, rtol=0)

    def test_summation_order_is_left_to_right(self, rng):
        # the explicit k-loop reproduces the scalar loop bit for bit
        a, b = rng.standard_normal((4, 7)), rng.standard_normal((7, 3))
        np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b))

    def test_batched_matches_per_item(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))
        out = matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            np.testing.assert_array_equal(out[i], matmul(Tensor(a[i]), Tensor(b[i])).data)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_mac_counter(self, rng):
        with count_macs() as c:
            matmul(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 5))))
        assert c.total == 3 * 4 * 5


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_shift_invariant_large(self):
        np.testing.assert_allclose(softmax_rows(Tensor([[1000.0] * 3])).data, [[1 / 3] * 3], rtol=1e-15)

    def test_direct_formula(self):
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0], e / e.sum(), atol=1e-12)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        p = softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert (p >= 0).all()


class TestLayerNorm:
    def test_constant_row(self):
        out = layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_values(self):
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        # (x - 2) / sqrt(1 + eps)
        expected = np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5)
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-14)
        np.testing.assert_allclose(out.data[0], [-1.0, 1.0], atol=1e-4)

    def test_beta_only(self, rng):
        beta = rng.standard_normal(4)
        out = layer_norm(Tensor(rng.standard_normal((3, 4))), Tensor(np.zeros(4)), Tensor(beta))
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (3, 4)))

    def test_normalized_moments(self, rng):
        out = layer_norm(Tensor(5 + 3 * rng.standard_normal((6, 32))), Tensor(np.ones(32)), Tensor(np.zeros(32)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-5)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_positive(self):
        assert gelu(Tensor([30.0])).data[0] == pytest.approx(30.0, abs=1e-12)

    def test_one(self):
        # Phi(1) = (1 + erf(1/sqrt 2)) / 2
        expected = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
        assert gelu(Tensor([1.0])).data[0] == pytest.approx(expected, abs=1e-15)
        assert gelu(Tensor([1.0])).data[0] == pytest.approx(0.8413, abs=1e-3)


class TestDepthwiseConv:
    def test_center_tap_is_identity(self, rng):
        x = rng.standard_normal((4, 5, 3))
        k = np.zeros((3, 3, 3))
        k[1, 1] = 1.0
        np.testing.assert_array_equal(depthwise_conv3x3(Tensor(x), Tensor(k)).data, x)

    def test_counts_valid_taps(self):
        out = depthwise_conv3x3(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((3, 3, 1)))).data[..., 0]
        assert out[1, 1] == 9 and out[2, 2] == 9
        assert out[0, 0] == 4 and out[3, 3] == 4 and out[0, 3] == 4
        assert out[0, 1] == 6 and out[2, 0] == 6

    @pytest.mark.parametrize("shape", [(4, 4, 1), (5, 3, 2), (6, 6, 4)])
    def test_naive_oracle(self, rng, shape):
        x = rng.standard_normal(shape)
        k = rng.standard_normal((3, 3, shape[2]))
        np.testing.assert_allclose(depthwise_conv3x3(Tensor(x), Tensor(k)).data, naive_conv(x, k), atol=1e-12, rtol=0)

    def test_batched(self, rng):
        x = rng.standard_normal((2, 4, 4, 3))
        k = rng.standard_normal((3, 3, 3))
        out = depthwise_conv3x3(Tensor(x), Tensor(k)).data
        for b in range(2):
            np.testing.assert_array_equal(out[b], depthwise_conv3x3(Tensor(x[b]), Tensor(k)).data)


class TestCyclicRoll:
    def test_zero_shift(self, rng):
        x = rng.standard_normal((3, 4, 2))
        np.testing.assert_array_equal(cyclic_roll(Tensor(x), 0, 0).data, x)

    def test_hand_shift(self):
        x = Tensor(np.arange(4.0).reshape(1, 4, 1))
        assert cyclic_roll(x, 0, 1).data[0, :, 0].tolist() == [3.0, 0.0, 1.0, 2.0]

    @given(st.integers(-9, 9), st.integers(-9, 9))
    @settings(max_examples=40)
    def test_inverse(self, dy, dx):
        x = np.arange(60.0).reshape(3, 5, 4)
        back = cyclic_roll(cyclic_roll(Tensor(x), dy, dx), -dy, -dx)
        np.testing.assert_array_equal(back.data, x)


class TestSpaceToDepth:
    def test_row_major_neighbours(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
        assert space_to_depth(x, 2).data.reshape(-1).tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_shape(self):
        assert space_to_depth(Tensor(np.ones((8, 12, 3))), 4).shape == (2, 3, 48)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            space_to_depth(Tensor(np.ones((6, 8, 3))), 4)


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert cross_entropy(Tensor(np.zeros((4, 3))), np.array([0, 1, 2, 0])).item() == pytest.approx(math.log(3))

    def test_matches_direct(self, rng):
        z = rng.standard_normal((5, 4))
        y = rng.integers(0, 4, 5)
        lse = np.log(np.exp(z).sum(axis=1))
        expected = np.mean(lse - z[np.arange(5), y])
        assert cross_entropy(Tensor(z), y).item() == pytest.approx(expected, abs=1e-14)


class TestTape:
    def test_simple_chain(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            y = sum_all(mul(x, x))
        (g,) = tape.gradient(y, [x])
        np.testing.assert_array_equal(g.data, [2.0, 4.0])

    def test_unreached_source_gets_zeros(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        z = Tensor([3.0], requires_grad=True)
        with GradTape() as tape:
            y = sum_all(x)
        gx, gz = tape.gradient(y, [x, z])
        np.testing.assert_array_equal(gx.data, [1.0, 1.0])
        np.testing.assert_array_equal(gz.data, [0.0])

    def test_reused_input_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with GradTape() as tape:
            y = sum_all(add(x, mul(x, x)))
        (g,) = tape.gradient(y, [x])
        assert g.data[0] == 7.0

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = sum_all(x)
        with GradTape() as tape:
            pass
        (g,) = tape.gradient(y, [x])
        assert g.data[0] == 0.0

    def test_non_scalar_target(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            y = mul(x, x)
        with pytest.raises(ValueError):
            tape.gradient(y, [x])

    def test_thread_local(self):
        x = Tensor([2.0], requires_grad=True)
        seen = []
        with GradTape() as tape:
            t = threading.Thread(target=lambda: seen.append(sum_all(mul(x, x))))
            t.start()
            t.join()
            y = sum_all(mul(x, x))
        (g,) = tape.gradient(y, [x])
        assert g.data[0] == 4.0
        (g_other,) = tape.gradient(seen[0], [x])
        assert g_other.data[0] == 0.0

    def test_linear_and_mean(self, rng):
        w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        x = Tensor(rng.standard_normal((4, 3)))
        with GradTape() as tape:
            y = sum_all(mean(linear(x, w), (0,)))
        (g,) = tape.gradient(y, [w])
        np.testing.assert_allclose(g.data, np.broadcast_to(x.data.mean(axis=0)[:, None], (3, 2)), atol=1e-15)

    def test_reshape_round_trip(self, rng):
        x = rng.standard_normal((2, 6))
        np.testing.assert_array_equal(reshape(reshape(Tensor(x), (3, 4)), (2, 6)).data, x)


def test_ops_are_deterministic(rng):
    x = rng.standard_normal((4, 4, 8))
    k = rng.standard_normal((3, 3, 8))
    a = gelu(depthwise_conv3x3(Tensor(x), Tensor(k))).data
    b = gelu(depthwise_conv3x3(Tensor(x), Tensor(k))).data
    assert a.tobytes() == b.tobytes()
