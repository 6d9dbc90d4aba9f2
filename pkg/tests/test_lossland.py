import mpmath
import numpy as np
import pytest

from conftest import random_spec
from wnbias.datasets import LabeledSet
from wnbias.lossland import (
    compute_loss, exp_loss, logsumexp, normalized_margin, xent_loss,
)
from wnbias.netcore import NetworkSpec, forward_batch, gradient

mpmath.mp.dps = 50

IDENT = NetworkSpec((1, 1), ())


def margin_set(margins):
    """1-d points with label +1, so ``w = 1`` realizes the given margins."""
    X = np.asarray(margins, dtype=float)[:, None]
    return LabeledSet(X, np.ones(len(margins), dtype=int))


def oracle_log_total(margins):
    return mpmath.log(mpmath.fsum(mpmath.exp(-mpmath.mpf(repr(float(m)))) for m in margins))


def direct_exp_grad(spec, w, data):
    g = np.zeros(spec.n_params)
    for x, y in zip(data.X, data.y):
        phi = forward_batch(spec, w, x[None, :]).output[0, 0]
        g += -y * np.exp(-y * phi) * gradient(spec, w, x)[0]
    return g


class TestExpLoss:
    def test_zero_output_single_example(self):
        data = LabeledSet(np.array([[0.0]]), np.array([-1]))
        rep = exp_loss(IDENT, np.array([1.0]), data)
        assert rep.log_total == 0.0
        np.testing.assert_array_equal(rep.softmax_weights, [1.0])
        # G = -y grad phi = -(-1)(0) = 0 here; use a nonzero input for the sign
        data = LabeledSet(np.array([[3.0]]), np.array([-1]))
        rep = exp_loss(IDENT, np.array([0.0]), data)
        assert rep.log_total == 0.0
        np.testing.assert_array_equal(rep.grad_core, [3.0])

    def test_two_margins_ten_twelve(self):
        rep = exp_loss(IDENT, np.array([1.0]), margin_set([10.0, 12.0]))
        assert rep.log_total == pytest.approx(-10 + np.log1p(np.exp(-2)), rel=1e-15)
        q = np.exp(-2)
        np.testing.assert_allclose(rep.softmax_weights, [1 / (1 + q), q / (1 + q)], rtol=1e-15)

    @pytest.mark.parametrize("margins", [(300.0, 305.0), (400.0, 400.0), (0.5, 400.0), (-3.0, 250.0)])
    def test_extreme_margins_match_extended_precision(self, margins):
        rep = exp_loss(IDENT, np.array([1.0]), margin_set(margins))
        ref = oracle_log_total(margins)
        assert abs(rep.log_total - float(ref)) <= 1e-12 * abs(float(ref))

    def test_direct_sum_agreement(self, rng):
        for _ in range(50):
            spec = random_spec(rng, out_dim=1)
            w = rng.normal(size=spec.n_params)
            X = rng.normal(size=(5, spec.layer_dims[0]))
            data = LabeledSet(X, rng.choice([-1, 1], size=5))
            rep = exp_loss(spec, w, data)
            phi = forward_batch(spec, w, X).output[:, 0]
            direct = np.sum(np.exp(-data.y * phi))
            assert abs(np.exp(rep.log_total) - direct) <= 1e-12 * direct
            np.testing.assert_allclose(rep.gradient(), direct_exp_grad(spec, w, data),
                                       rtol=1e-9, atol=1e-12 * direct)
            assert rep.softmax_weights.sum() == pytest.approx(1.0, abs=1e-14)

    def test_shift_invariance_of_weights(self):
        base = exp_loss(IDENT, np.array([1.0]), margin_set([1.0, 2.0, 4.0]))
        shifted = exp_loss(IDENT, np.array([1.0]), margin_set([101.0, 102.0, 104.0]))
        assert shifted.log_total == pytest.approx(base.log_total - 100.0, rel=1e-14)
        np.testing.assert_allclose(shifted.softmax_weights, base.softmax_weights, rtol=1e-12)

    def test_raising_a_margin_lowers_loss(self):
        a = exp_loss(IDENT, np.array([1.0]), margin_set([5.0, 7.0]))
        b = exp_loss(IDENT, np.array([1.0]), margin_set([5.0, 7.5]))
        assert b.log_total < a.log_total

    def test_rejects_multiclass_labels(self):
        with pytest.raises(ValueError):
            exp_loss(IDENT, np.array([1.0]), LabeledSet(np.ones((2, 1)), np.array([0, 2])))


def xent_direct(out, y):
    true = out[np.arange(len(y)), y]
    return np.sum(np.log1p(np.exp(out - true[:, None]).sum(axis=1) - 1.0))


class TestCrossEntropy:
    def test_matches_direct_and_finite_differences(self, rng):
        for _ in range(30):
            spec = random_spec(rng, out_dim=int(rng.integers(2, 4)), acts=("linear", "relu_squared"))
            k = spec.layer_dims[-1]
            w = rng.normal(size=spec.n_params)
            X = rng.normal(size=(6, spec.layer_dims[0]))
            data = LabeledSet(X, rng.integers(0, k, size=6))
            rep = xent_loss(spec, w, data)
            direct = xent_direct(forward_batch(spec, w, X).output, data.y)
            assert np.exp(rep.log_total) == pytest.approx(direct, rel=1e-12)
            h = 1e-6
            fd = np.zeros(spec.n_params)
            for i in range(spec.n_params):
                e = np.zeros_like(w)
                e[i] = h
                fd[i] = (xent_direct(forward_batch(spec, w + e, X).output, data.y)
                         - xent_direct(forward_batch(spec, w - e, X).output, data.y)) / (2 * h)
            np.testing.assert_allclose(rep.gradient(), fd, rtol=1e-6, atol=1e-8)

    def test_two_class_tends_to_exp_loss(self):
        spec = NetworkSpec((1, 2), ())
        ratios = []
        for m in (1.0, 5.0, 20.0, 40.0):
            # outputs (m/2, -m/2) on class 0 give pairwise margin m
            w = np.array([0.5, -0.5])
            data = LabeledSet(np.array([[m]]), np.array([0]))
            ratios.append(np.exp(xent_loss(spec, w, data).log_total - (-m)))
        assert np.all(np.diff(np.abs(np.array(ratios) - 1)) < 0)
        assert ratios[-1] == pytest.approx(1.0, abs=1e-15)

    def test_large_margin_per_example_agreement(self, rng):
        spec = NetworkSpec((3, 3), ())
        W = np.diag([40.0, 45.0, 50.0]).ravel()
        X = np.eye(3) + 0.01 * rng.normal(size=(3, 3))
        data = LabeledSet(X, np.array([0, 1, 2]))
        rep = xent_loss(spec, W, data)
        out = forward_batch(spec, W, X).output
        true = out[np.arange(3), data.y]
        diff = true[:, None] - out
        s = np.array([sum(np.exp(-diff[i, j]) for j in range(3) if j != data.y[i]) for i in range(3)])
        assert np.all(np.abs(np.exp(rep.per_example_log) - s) <= 1e-12 * s)

    def test_weights_matrix_has_zero_true_class(self):
        spec = NetworkSpec((1, 3), ())
        data = LabeledSet(np.array([[1.0], [2.0]]), np.array([0, 2]))
        _, M = xent_loss(spec, np.array([1.0, 0.0, -1.0]), data, return_weights=True)
        assert M.M[0, 0] == 0.0 and M.M[1, 2] == 0.0
        assert M.M[0, 1] == pytest.approx(np.exp(-1.0))

    def test_label_out_of_range(self):
        spec = NetworkSpec((1, 2), ())
        with pytest.raises(ValueError, match="labels"):
            xent_loss(spec, np.zeros(2), LabeledSet(np.ones((1, 1)), np.array([2])))

    def test_compute_loss_dispatch(self):
        with pytest.raises(ValueError):
            compute_loss("hinge", IDENT, np.ones(1), margin_set([1.0]))


class TestMargins:
    def test_normalized_margin_is_scale_free(self, rng):
        spec = NetworkSpec((2, 4, 1), ("relu_squared",))
        w = rng.normal(size=spec.n_params)
        data = LabeledSet(rng.normal(size=(5, 2)), np.array([1, -1, 1, 1, -1]))
        a = normalized_margin(spec, w, data)
        assert normalized_margin(spec, 7.0 * w, data) == pytest.approx(a, rel=1e-12)

    def test_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            normalized_margin(IDENT, np.zeros(1), margin_set([1.0]))

    def test_logsumexp_all_neg_inf(self):
        assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf
