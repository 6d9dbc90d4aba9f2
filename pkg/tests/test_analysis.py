import numpy as np
import pytest

from conftest import make_record
from wnbias.analysis import (
    InsufficientTailError, corollary1_check, direction_convergence, fit_rate, kkt_residual,
    linear_predictor, predict, predicted_exponent, prop2_alignment, prune_eval,
    sparsity_profile, tail_rows, theorem2_checkpoints, theorem2_spread, trend_is,
)
from wnbias.datasets import LabeledSet, gen_linsep
from wnbias.dynamics import ParamState
from wnbias.maxmargin import max_margin_oracle
from wnbias.netcore import NetworkSpec


class TestRateFit:
    @pytest.mark.parametrize("b", [2.0, 1.0, 1.5])
    def test_exact_model_recovered(self, b):
        d = np.linspace(3.0, 5000.0, 400)
        rec = make_record(-(np.log(d) + b * np.log(np.log(d))), d=d)
        fit = fit_rate(rec)
        assert fit.b == pytest.approx(b, abs=1e-6)
        assert fit.a_free == pytest.approx(1.0, abs=1e-6)
        assert fit.residual < 1e-9

    def test_too_few_tail_points(self):
        d = np.linspace(3.0, 50.0, 30)
        with pytest.raises(InsufficientTailError):
            fit_rate(make_record(-np.log(d), d=d))

    def test_rows_with_d_at_most_one_are_dropped(self):
        d = np.concatenate([np.linspace(0.0, 1.0, 100), np.linspace(1.5, 900, 100)])
        rec = make_record(-(np.log(np.maximum(d, 1e-9)) + 2 * np.log(np.abs(np.log(np.maximum(d, 1e-9))) + 1e-300)), d=d)
        fit = fit_rate(rec, min_points=20)
        assert fit.n_points <= 100
        assert fit.b == pytest.approx(2.0, abs=1e-6)

    def test_predicted_exponents(self):
        assert predicted_exponent("ewn", 4) == 2.0
        assert predicted_exponent("unnorm", 2) == 1.0
        assert predicted_exponent("swn", 4) == 1.5


class TestDirections:
    def test_fixed_direction_has_zero_change(self):
        params = np.outer(np.linspace(1.0, 50.0, 64), [0.6, 0.8])
        change = direction_convergence(make_record(-np.arange(64.0), params=params))
        assert change.tail == pytest.approx(0.0, abs=1e-7)

    def test_rotation_in_last_window(self):
        n = 64
        theta = np.zeros(n)
        theta[32:] = np.linspace(0.0, 0.3, 32)  # steps 32..63 form the last window
        params = np.column_stack([np.cos(theta), np.sin(theta)])
        change = direction_convergence(make_record(-np.arange(n, dtype=float), params=params))
        assert change.first_step[-1] == 32
        assert change.tail == pytest.approx(0.3, rel=1e-9)

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            direction_convergence(make_record([0.0, -1.0], params=np.eye(2)), ratio=1.0)


class TestTails:
    def test_tail_is_last_fifth_of_decrease(self):
        rec = make_record(np.linspace(0.0, -100.0, 101))
        rows = tail_rows(rec)
        assert rec.log_total[rows].max() == pytest.approx(-80.0)
        assert rows[-1] == 100

    def test_trends(self):
        assert trend_is(np.linspace(5, 1, 50), "decreasing")
        assert not trend_is(np.linspace(1, 5, 50), "decreasing")
        assert trend_is(np.ones(50), "nondecreasing")
        noisy = np.linspace(0, 1, 50) + 0.01 * np.tile([1, -1], 25)
        assert trend_is(noisy, "nondecreasing")
        with pytest.raises(ValueError):
            trend_is(np.ones(3), "decreasing")


class TestSparsity:
    def test_growth_threshold(self):
        norms = np.array([[1.0, 1.0, 1.0, 1.0], [11.0, 1.5, 4.0, 2.05]])
        prof = sparsity_profile(make_record([0.0, -5.0], norms=norms))
        np.testing.assert_array_equal(prof.surviving, [0, 2, 3])
        np.testing.assert_allclose(prof.relative_growth, [1.0, 0.05, 0.3, 0.105])

    def test_static_record_has_no_survivors(self):
        prof = sparsity_profile(make_record([0.0, -1.0], norms=np.ones((2, 3))))
        assert prof.surviving.size == 0

    def test_layers_are_judged_separately(self):
        norms = np.array([[1.0, 1.0, 1.0], [3.0, 1.1, 100.0]])
        prof = sparsity_profile(make_record([0.0, -1.0], norms=norms, meta={"group_layers": [1, 1, 2]}))
        np.testing.assert_array_equal(prof.surviving, [0, 2])
        assert prof.counts == {1: 1, 2: 1}


class TestTheorem2:
    def test_product_and_ratio_spreads(self):
        norms = np.array([[1.0, 1.0, 1.0], [np.e, np.e ** 2, 1.0]])
        lg = np.array([[0.0, 0.0, 0.0], [-1.0, -2.2, 0.0]])
        rec = make_record([0.0, -1.0], norms=norms, log_grad_norms=lg)
        # node 2 never grew so it is not a survivor
        assert theorem2_spread(rec, "ewn") == pytest.approx(0.2)
        assert theorem2_spread(rec, "swn") == pytest.approx(2.2)
        with pytest.raises(ValueError):
            theorem2_spread(rec, "plain")

    def test_checkpoints_use_first_row_below_level(self):
        lt = np.array([0.0, -150.0, -210.0, -260.0, -310.0])
        norms = np.column_stack([np.linspace(1, 9, 5), np.linspace(1, 5, 5)])
        lg = np.column_stack([np.zeros(5), [0, 0, 0.5, 0.25, 0.1]])
        rec = make_record(lt, norms=norms, log_grad_norms=lg)
        out = theorem2_checkpoints(rec, "ewn")
        expected = [abs(np.log(norms[r, 0]) - np.log(norms[r, 1]) - lg[r, 1]) for r in (2, 3, 4)]
        np.testing.assert_allclose(out, expected)


def test_prop2_alignment_on_aligned_weights():
    spec = NetworkSpec((2, 2, 1), ("relu",))
    w = np.array([1.0, 2.0, 0.0, 0.0, 3.0, 0.0])
    rec = make_record([0.0], norms=np.ones((1, 3)), params=w[None, :])
    out = prop2_alignment(rec, -2.0 * w, spec)
    assert set(out) == {0, 2}  # node 1 is zero
    assert all(v == pytest.approx(1.0) for v in out.values())


class TestCorollary1:
    def test_exact_optimum_has_zero_residual(self):
        data = gen_linsep(20, 2, 0.1, seed=5)
        sol = max_margin_oracle(data)
        assert kkt_residual(sol.w_star, data) < 1e-10
        assert kkt_residual(3.7 * sol.w_star, data) < 1e-10

    def test_off_optimum_residual_is_positive(self):
        data = gen_linsep(20, 2, 0.1, seed=5)
        sol = max_margin_oracle(data)
        rot = np.array([[np.cos(0.05), -np.sin(0.05)], [np.sin(0.05), np.cos(0.05)]])
        assert kkt_residual(rot @ sol.w_star, data) > 1e-3

    def test_misclassifying_predictor(self):
        data = gen_linsep(20, 2, 0.1, seed=5)
        assert kkt_residual(-max_margin_oracle(data).w_star, data) == np.inf

    def test_linear_predictor_is_matrix_product(self, rng):
        spec = NetworkSpec((3, 4, 2, 1), ("linear", "linear"))
        w = rng.normal(size=spec.n_params)
        W1, W2, W3 = spec.unflatten(w)
        np.testing.assert_allclose(linear_predictor(spec, w), (W3 @ W2 @ W1)[0])
        with pytest.raises(ValueError):
            linear_predictor(NetworkSpec((3, 4, 1), ("relu",)), np.ones(16))

    def test_check_on_exact_solution(self):
        data = gen_linsep(20, 2, 0.1, seed=6)
        sol = max_margin_oracle(data)
        spec = NetworkSpec((2, 1, 1), ("linear",))
        res = corollary1_check(np.concatenate([2 * sol.w_star, [0.5]]), spec, data)
        assert res.cosine == pytest.approx(1.0, abs=1e-12)
        assert res.kkt_residual < 1e-10


class TestPruning:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.spec = NetworkSpec((4, 6, 3), ("relu",))
        self.init = ParamState.from_weights(self.spec, 0.1 * rng.normal(size=self.spec.n_params), "unnorm")
        self.trained = ParamState.from_weights(self.spec, rng.normal(size=self.spec.n_params), "unnorm")
        self.test = LabeledSet(rng.normal(size=(50, 4)), rng.integers(0, 3, size=50))

    def test_fraction_zero_is_unpruned_accuracy(self):
        curve = prune_eval(self.spec, self.trained, self.init, self.test, [0.0])
        pred = predict(self.spec, self.trained.materialize(), self.test.X)
        assert curve.accuracy[0] == np.mean(pred == self.test.y)

    def test_pruning_everything_predicts_lowest_class(self):
        curve = prune_eval(self.spec, self.trained, self.init, self.test, [1.0])
        assert curve.accuracy[0] == np.mean(self.test.y == 0)

    def test_order_is_by_growth(self):
        curve = prune_eval(self.spec, self.trained, self.init, self.test, [0.5])
        w1, w0 = self.trained.materialize(), self.init.materialize()
        growth = [np.linalg.norm(w1[g.start:g.stop]) - np.linalg.norm(w0[g.start:g.stop])
                  for g in self.spec.groups if g.layer == 1]
        assert np.all(np.diff(np.asarray(growth)[curve.order]) >= 0)

    def test_scalar_output_ties_go_positive(self):
        spec = NetworkSpec((2, 1), ())
        np.testing.assert_array_equal(predict(spec, np.zeros(2), np.ones((3, 2))), [1, 1, 1])
