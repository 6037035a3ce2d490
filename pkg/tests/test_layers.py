import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from moespnet import gradcheck
from moespnet import layers as L
from moespnet.tensor import ShapeError, Tensor, precision


class TestConv:
    def test_identity_1x1(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        spec = L.ConvSpec(3, 3, 1)
        w = np.eye(3).reshape(3, 3, 1, 1)
        with precision(64):
            y = L.conv2d(Tensor(x), spec, Tensor(w), Tensor(np.zeros((1, 3, 1, 1))))
        np.testing.assert_array_equal(y.data, x)

    def test_dilated_ones(self):
        spec = L.ConvSpec(1, 1, 3, dilation=2)
        y = L.conv2d(Tensor(np.ones((1, 1, 5, 5))), spec, Tensor(np.ones((1, 1, 3, 3))))
        assert y.shape == (1, 1, 1, 1) and y.item() == 9.0

    @given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 2), st.integers(0, 3))
    def test_matches_direct_summation(self, seed, dil, stride, pad):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 2, 7, 6))
        spec = L.ConvSpec(2, 3, 3, stride=stride, padding=pad, dilation=dil)
        ho, wo = spec.output_size(7, 6)
        if ho < 1 or wo < 1:
            return
        w = r.standard_normal(spec.weight_shape)
        b = r.standard_normal(3)
        with precision(64):
            y = L.conv2d(Tensor(x), spec, Tensor(w), Tensor(b.reshape(1, 3, 1, 1)))
        np.testing.assert_allclose(y.data, oracles.conv2d(x, w, b, stride, pad, dil), rtol=1e-12, atol=1e-12)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(0, 5))
    def test_dilation_equals_zero_inserted_kernel(self, seed, dil, pad):
        r = np.random.default_rng(seed)
        x = r.standard_normal((1, 3, 9, 9))
        w = r.standard_normal((2, 3, 3, 3))
        spec = L.ConvSpec(3, 2, 3, padding=pad, dilation=dil)
        if min(spec.output_size(9, 9)) < 1:
            return
        big = L.zero_insert_kernel(w, dil)
        spec_big = L.ConvSpec(3, 2, big.shape[-1], padding=pad)
        with precision(64):
            a = L.conv2d(Tensor(x), spec, Tensor(w)).data
            b = L.conv2d(Tensor(x), spec_big, Tensor(big)).data
        assert np.array_equal(a, b)

    def test_extent_and_padding_preserves_size(self):
        spec = L.ConvSpec(4, 4, 3, padding=6, dilation=6)
        assert spec.extent == 13
        assert spec.output_size(17, 17) == (17, 17)

    def test_shape_errors(self):
        spec = L.ConvSpec(2, 1, 3)
        with pytest.raises(ShapeError):
            L.conv2d(Tensor(np.zeros((1, 3, 5, 5))), spec, Tensor(np.zeros(spec.weight_shape)))
        with pytest.raises(ShapeError):
            L.conv2d(Tensor(np.zeros((1, 2, 2, 2))), spec, Tensor(np.zeros(spec.weight_shape)))


class TestUpsample:
    def test_constant(self):
        y = L.bilinear_upsample_2x(Tensor(np.full((1, 2, 3, 5), 3.0)))
        assert y.shape == (1, 2, 6, 10)
        np.testing.assert_array_equal(y.data, 3.0)

    def test_single_pixel(self):
        y = L.bilinear_upsample_2x(Tensor(np.full((1, 1, 1, 1), 7.0)))
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 7.0))

    def test_row(self):
        with precision(64):
            y = L.bilinear_upsample_2x(Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2)))
        np.testing.assert_allclose(y.data[0, 0], [[0, 0.25, 0.75, 1]] * 2)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6))
    def test_bounds_preserved(self, seed, h, w):
        x = np.random.default_rng(seed).standard_normal((1, 2, h, w))
        with precision(64):
            y = L.bilinear_upsample_2x(Tensor(x)).data
        assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12


class TestSoftmaxOverExperts:
    def test_equal_logits(self):
        ws = L.softmax_over_experts([Tensor(np.full((1, 1, 2, 2), 0.3)) for _ in range(4)])
        for w in ws:
            np.testing.assert_allclose(w.data, 0.25, rtol=1e-7)

    def test_closed_form(self):
        with precision(64):
            ws = L.softmax_over_experts([Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.full((1, 1, 1, 1), math.log(3)))])
        assert ws[0].item() == pytest.approx(0.25, abs=1e-12)
        assert ws[1].item() == pytest.approx(0.75, abs=1e-12)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.floats(-50, 50))
    def test_normalized_and_shift_invariant(self, seed, n, c):
        r = np.random.default_rng(seed)
        gs = [r.standard_normal((2, 1, 3, 3)) * 10 for _ in range(n)]
        with precision(64):
            ws = L.softmax_over_experts([Tensor(g) for g in gs])
            ws2 = L.softmax_over_experts([Tensor(g + c) for g in gs])
        total = sum(w.data for w in ws)
        assert np.all(np.abs(total - 1) <= 1e-6)
        for a, b in zip(ws, ws2):
            np.testing.assert_allclose(a.data, b.data, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            L.softmax_over_experts([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])


class TestPhi:
    def test_one_hot_correct(self):
        p = np.zeros((1, 3, 1, 2))
        p[0, 2, 0, 0] = 1
        p[0, 0, 0, 1] = 1
        with precision(64):
            loss = L.phi_loss(Tensor(p), np.array([[[[2, 0]]]]), form="prob")
        assert loss.item() == 0.0

    def test_uniform(self):
        with precision(64):
            loss = L.phi_loss(Tensor(np.full((2, 7, 3, 3), 1 / 7)), np.zeros((2, 1, 3, 3), int), form="prob")
            logit = L.phi_loss(Tensor(np.zeros((2, 7, 3, 3))), np.zeros((2, 1, 3, 3), int), form="logit")
        assert loss.item() == pytest.approx(math.log(7), abs=1e-12)
        assert logit.item() == pytest.approx(math.log(7), abs=1e-12)

    def test_hand_case(self):
        p = np.array([[0.5, 0.25], [0.5, 0.75]]).reshape(1, 2, 1, 2)
        with precision(64):
            loss = L.phi_loss(Tensor(p), np.array([0, 0]).reshape(1, 1, 1, 2), form="prob")
        assert loss.item() == pytest.approx((-math.log(0.5) - math.log(0.25)) / 2, abs=1e-12)
        assert loss.item() == pytest.approx(1.0397, abs=1e-4)

    def test_renormalizes_weighted_probabilities(self):
        p = np.array([0.1, 0.3]).reshape(1, 2, 1, 1)  # sums to 0.4
        with precision(64):
            norm = L.phi_loss(Tensor(p), np.array([[[[1]]]]), form="prob")
            raw = L.phi_loss(Tensor(p), np.array([[[[1]]]]), form="prob", normalize=False)
        assert norm.item() == pytest.approx(-math.log(0.75))
        assert raw.item() == pytest.approx(-math.log(0.3))

    def test_ignore_and_all_ignored(self):
        p = np.full((1, 2, 1, 2), 0.5)
        with precision(64):
            loss = L.phi_loss(Tensor(p), np.array([255, 0]).reshape(1, 1, 1, 2), form="prob")
        assert loss.item() == pytest.approx(math.log(2))
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            empty = L.phi_loss(Tensor(p), np.full((1, 1, 1, 2), 255), form="prob")
        assert empty.item() == 0.0
        assert any(issubclass(w.category, L.EmptyLossWarning) for w in rec)

    def test_clamps_zero_probability(self):
        p = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        loss = L.phi_loss(Tensor(p), np.array([[[[1]]]]), form="prob")
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(-math.log(1e-12), rel=1e-5)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            L.phi_loss(Tensor(np.zeros((1, 2, 1, 1))), np.array([[[[5]]]]))


class TestElementwise:
    def test_mul_by_ones_map(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        y = L.mul(Tensor(x), Tensor(np.ones((2, 1, 4, 4))))
        np.testing.assert_array_equal(y.data, x)

    def test_sigmoid_zero(self):
        assert L.sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).item() == 0.5

    def test_sigmoid_extremes_finite(self):
        y = L.sigmoid(Tensor(np.array([-1e4, 1e4]).reshape(1, 1, 1, 2))).data
        assert np.isfinite(y).all()

    def test_concat_order(self, rng):
        a = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        b = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        y = L.concat_channels([Tensor(a), Tensor(b)])
        assert y.shape == (1, 5, 4, 4)
        np.testing.assert_array_equal(y.data[:, :3], a)
        np.testing.assert_array_equal(y.data[:, 3:], b)

    def test_add_requires_identical_shapes(self):
        with pytest.raises(ShapeError):
            L.add(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 1, 2, 2))))


def test_max_pool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    L.sum_all(L.max_pool2x2(x))
    from moespnet.tensor import backward
    backward(L.sum_all(L.max_pool2x2(x)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


@pytest.mark.parametrize("op", gradcheck.op_names())
def test_gradcheck(op):
    (report,) = gradcheck.run([op], seed=0)
    assert report.frac_below_tol >= 0.99 and report.max_rel_error < 1e-2, report


@given(st.integers(0, 2**32 - 1))
def test_gradcheck_random_instances(seed):
    reports = gradcheck.run(["conv2d_dilated", "softmax_over_experts", "phi_prob", "upsample2x"], seed=seed)
    for r in reports:
        assert r.passed, r
