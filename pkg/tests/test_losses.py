import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_contrast, brute_tv, brute_unimodal
from stattn.autodiff import Tensor, UsageError, gradient_errors
from stattn.losses import (
    METRICS_HEADER,
    LossBreakdown,
    LossWeights,
    MetricsWriter,
    binarize,
    contrast_loss,
    cross_entropy,
    total_loss,
    tv_loss,
    unimodal_loss,
)

STEP = 1e-3
TOL = 1e-4


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert abs(cross_entropy(Tensor(np.zeros(4)), 0).item() - math.log(4)) < 1e-9

    def test_confident_logits(self):
        assert abs(cross_entropy(Tensor([10.0, -10.0]), 0).item() - math.log1p(math.exp(-20.0))) < 1e-12

    def test_gradient_is_softmax_minus_onehot(self, rng):
        z = Tensor(rng.normal(size=5), requires_grad=True)
        cross_entropy(z, 2).backward()
        p = np.exp(z.data - z.data.max())
        p /= p.sum()
        np.testing.assert_allclose(z.grad, p - np.eye(5)[2], atol=1e-12)
        z.grad = None
        assert gradient_errors(lambda: cross_entropy(z, 2), [z], STEP)[0] < TOL

    def test_batched_is_mean_of_single(self, rng):
        z = rng.normal(size=(3, 4))
        labels = np.array([0, 3, 1])
        single = [cross_entropy(Tensor(z[i]), labels[i]).item() for i in range(3)]
        assert abs(cross_entropy(Tensor(z), labels).item() - np.mean(single)) < 1e-12

    @pytest.mark.parametrize("label", [-1, 4, 1.5])
    def test_bad_label(self, label):
        with pytest.raises(UsageError):
            cross_entropy(Tensor(np.zeros(4)), label)


class TestTV:
    def test_constant_mask(self):
        assert tv_loss(Tensor(np.full((2, 1, 4, 4), 0.3))).item() == 0.0

    def test_two_by_two_example(self):
        assert abs(tv_loss(Tensor([[[[0.0, 1.0], [0.0, 1.0]]]])).item() - 2.0) < 1e-9

    def test_subgradient(self, rng):
        m = Tensor(rng.uniform(size=(2, 1, 4, 5)), requires_grad=True)
        assert gradient_errors(lambda: tv_loss(m), [m], STEP)[0] < TOL

    def test_batch_mean(self, rng):
        m = rng.uniform(size=(3, 2, 1, 4, 4))
        per = [tv_loss(Tensor(m[i])).item() for i in range(3)]
        assert abs(tv_loss(Tensor(m)).item() - np.mean(per)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (2, 1, 5, 5), elements=st.floats(0, 1)))
    def test_flip_and_transpose_invariance(self, m):
        base = tv_loss(Tensor(m)).item()
        assert base >= 0
        for variant in (m[..., ::-1, :], m[..., :, ::-1], np.swapaxes(m, -1, -2)):
            assert abs(tv_loss(Tensor(np.ascontiguousarray(variant))).item() - base) <= 1e-12 * max(1.0, base)


class TestContrast:
    def test_zeros(self):
        assert contrast_loss(Tensor(np.zeros((1, 1, 3, 3)))).item() == 0.0

    def test_ones(self):
        assert contrast_loss(Tensor(np.ones((2, 1, 3, 4)))).item() == -12.0

    def test_pair_example(self):
        assert abs(contrast_loss(Tensor([[[[0.8, 0.2]]]])).item() + 0.3) < 1e-9

    def test_half_is_not_foreground(self):
        assert contrast_loss(Tensor(np.full((1, 1, 2, 2), 0.5))).item() == 1.0
        assert binarize(np.array([0.5, 0.5000001])).tolist() == [0.0, 1.0]

    def test_indicator_carries_no_gradient(self, rng):
        m = Tensor(rng.uniform(size=(2, 1, 3, 3)), requires_grad=True)
        contrast_loss(m).backward()
        np.testing.assert_array_equal(m.grad, 0.5 - binarize(m.data))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (3, 1, 4, 4), elements=st.floats(0, 1)))
    def test_bounds(self, m):
        value = contrast_loss(Tensor(m)).item()
        assert -m.size / 2 <= value <= m.size / 2


class TestUnimodal:
    def test_log_concave_rows(self):
        row = [0.1, 0.2, 0.4, 0.2, 0.1]
        assert unimodal_loss(Tensor(np.tile(row, (5, 1)))).item() == 0.0

    def test_bimodal_row(self):
        w = Tensor(np.array([[0.3, 0.1, 0.3]]) / 0.7)
        assert abs(unimodal_loss(w).item() - 0.08 / 0.49) < 1e-9

    def test_uniform_rows(self):
        assert unimodal_loss(Tensor(np.full((6, 6), 1 / 6))).item() == 0.0

    def test_short_sequences(self):
        assert unimodal_loss(Tensor(np.full((2, 2), 0.5))).item() == 0.0

    def test_gradient(self, rng):
        w = Tensor(rng.uniform(0.05, 1.0, size=(4, 4)), requires_grad=True)
        assert gradient_errors(lambda: unimodal_loss(w), [w], STEP)[0] < TOL

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)))
    def test_nonnegative(self, w):
        assert unimodal_loss(Tensor(w)).item() >= 0.0


class TestBruteForceAgreement:
    def test_random_inputs(self, rng):
        for _ in range(50):
            masks = rng.uniform(size=(3, 1, 4, 5))
            w = rng.dirichlet(np.ones(5), size=5)
            for fast, slow, arg in ((tv_loss, brute_tv, masks), (contrast_loss, brute_contrast, masks),
                                    (unimodal_loss, brute_unimodal, w)):
                want = slow(arg)
                got = fast(Tensor(arg)).item()
                assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


class TestTotal:
    def parts(self, rng):
        return (
            Tensor(rng.normal(size=(2, 4))),
            np.array([1, 3]),
            Tensor(rng.uniform(size=(2, 3, 1, 4, 4))),
            Tensor(rng.dirichlet(np.ones(3), size=(2, 3))),
        )

    def test_zero_weights_leave_ce(self, rng):
        logits, labels, masks, w = self.parts(rng)
        out = total_loss(logits, labels, masks, w, LossWeights(0.0, 0.0, 0.0))
        assert out.total == out.ce

    def test_weighted_sum_identity(self, rng):
        logits, labels, masks, w = self.parts(rng)
        lam = LossWeights(0.3, 0.02, 1.7)
        out = total_loss(logits, labels, masks, w, lam)
        expect = out.ce + lam.tv * out.tv + lam.contrast * out.contrast + lam.unimodal * out.unimodal
        assert abs(out.total - expect) <= 1e-12 * max(1.0, abs(expect))

    def test_only_ce_nonzero(self):
        logits = Tensor(np.zeros((1, 4)))
        out = total_loss(logits, np.array([0]), Tensor(np.zeros((1, 3, 1, 2, 2))),
                         Tensor(np.full((1, 3, 3), 1 / 3)), LossWeights(5.0, 5.0, 5.0))
        assert out.total == out.ce

    def test_gradients_through_all_terms(self, rng):
        logits = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        masks = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 1, 3, 3)), requires_grad=True)
        w = Tensor(rng.uniform(0.1, 1.0, size=(2, 3, 3)), requires_grad=True)
        lam = LossWeights(0.1, 0.1, 1.0)
        errs = gradient_errors(lambda: total_loss(logits, np.array([0, 2]), masks, w, lam).graph,
                               [logits, masks, w], STEP)
        assert max(errs) < TOL

    def test_negative_weight_rejected(self):
        with pytest.raises(UsageError):
            LossWeights(tv=-1.0)

    def test_defaults(self):
        assert LossWeights() == LossWeights(1e-5, 1e-4, 1.0)


def test_metrics_csv_round_trips(tmp_path):
    path = tmp_path / "m.csv"
    writer = MetricsWriter(path)
    rows = [LossBreakdown(0.1 + i / 3, 2.0, -0.3, 1 / 7, math.pi) for i in range(3)]
    for i, r in enumerate(rows, start=1):
        writer.append(i, r)
    with open(path, newline="") as fh:
        table = list(csv.reader(fh))
    assert table[0] == METRICS_HEADER
    for line, r in zip(table[1:], rows):
        assert [float(x) for x in line[1:]] == r.row()
