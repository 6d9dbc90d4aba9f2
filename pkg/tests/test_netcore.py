import numpy as np
import pytest

from conftest import random_spec
from wnbias.netcore import (
    Activation, NetworkSpec, ShapeError, forward, forward_batch, gradient,
    homogeneity_order, init_uniform_fan_in,
)


def central_diff(spec, w, x, h=1e-5):
    k = spec.layer_dims[-1]
    J = np.zeros((k, w.size))
    for i in np.flatnonzero(spec.trainable()):
        e = np.zeros_like(w)
        e[i] = h
        J[:, i] = (forward(spec, w + e, x) - forward(spec, w - e, x)) / (2 * h)
    return J


def near_kink(spec, w, x, tol=1e-3):
    cache = forward_batch(spec, w, x[None, :])
    for act, z in zip(spec.activations, cache.preacts):
        if act is not Activation.LINEAR and np.any(np.abs(z) < tol):
            return True
    return False


class TestForward:
    def test_single_linear_layer_is_dot_product(self):
        spec = NetworkSpec((2, 1), ())
        assert forward(spec, np.array([1.0, 0.0]), [2.0, 1.0])[0] == 2.0

    def test_zero_params_give_zero_output(self, rng):
        spec = NetworkSpec((2, 8, 1), ("relu_squared",))
        for _ in range(5):
            assert forward(spec, np.zeros(spec.n_params), rng.normal(size=2))[0] == 0.0

    def test_simple_traj_wiring_closed_form(self):
        # diagonal first layer, second layer frozen at ones: phi = 2 w1 + w2 at (2, 1)
        frozen = np.zeros(6, dtype=bool)
        frozen[[1, 2, 4, 5]] = True
        spec = NetworkSpec((2, 2, 1), ("linear",), frozen)
        for w1, w2 in [(0.3, 0.7), (1.5, -2.0), (0.0, 4.0)]:
            w = np.array([w1, 0.0, 0.0, w2, 1.0, 1.0])
            assert forward(spec, w, [2.0, 1.0])[0] == pytest.approx(2 * w1 + w2, abs=1e-15)

    def test_wrong_input_width_names_layer(self):
        spec = NetworkSpec((3, 2, 1), ("relu",))
        with pytest.raises(ShapeError) as err:
            forward(spec, np.zeros(spec.n_params), [1.0, 2.0])
        assert err.value.layer == 1
        assert "layer 1" in str(err.value)

    def test_wrong_param_length(self):
        spec = NetworkSpec((3, 2, 1), ("relu",))
        with pytest.raises(ShapeError):
            forward(spec, np.zeros(spec.n_params + 1), [1.0, 2.0, 3.0])

    def test_batch_matches_single(self, rng):
        spec = NetworkSpec((3, 4, 2), ("relu",))
        w = rng.normal(size=spec.n_params)
        X = rng.normal(size=(6, 3))
        out = forward_batch(spec, w, X).output
        for i in range(6):
            np.testing.assert_allclose(out[i], forward(spec, w, X[i]), rtol=1e-13, atol=1e-15)


class TestGradient:
    def test_linear_model_gradient_is_input(self):
        spec = NetworkSpec((2, 1), ())
        np.testing.assert_array_equal(gradient(spec, np.array([1.0, 0.0]), [2.0, 1.0]), [[2.0, 1.0]])

    def test_matches_finite_differences(self, rng):
        checked = 0
        while checked < 60:
            spec = random_spec(rng)
            w = rng.normal(size=spec.n_params)
            x = rng.normal(size=spec.layer_dims[0])
            if near_kink(spec, w, x):
                continue
            J = gradient(spec, w, x)
            fd = central_diff(spec, w, x)
            assert np.linalg.norm(J - fd) <= 1e-6 * max(np.linalg.norm(J), 1e-8)
            checked += 1

    def test_relu_derivative_at_zero_is_zero(self):
        spec = NetworkSpec((1, 1, 1), ("relu",))
        # hidden pre-activation exactly 0
        g = gradient(spec, np.array([1.0, 3.0]), [0.0])
        np.testing.assert_array_equal(g, [[0.0, 0.0]])

    def test_frozen_entries_report_zero(self, rng):
        frozen = np.zeros(6, dtype=bool)
        frozen[[1, 4]] = True
        spec = NetworkSpec((2, 2, 1), ("relu",), frozen)
        g = gradient(spec, np.abs(rng.normal(size=6)), [1.0, 1.0])
        assert g[0, 1] == 0.0 and g[0, 4] == 0.0

    def test_euler_identity_smooth_activations(self, rng):
        for _ in range(50):
            spec = random_spec(rng, acts=("linear", "relu_squared"))
            w = rng.normal(size=spec.n_params)
            x = rng.normal(size=spec.layer_dims[0])
            L = homogeneity_order(spec)
            lhs = gradient(spec, w, x) @ w
            rhs = L * forward(spec, w, x)
            assert np.all(np.abs(lhs - rhs) <= 1e-8 * (1 + np.abs(rhs)))


class TestHomogeneity:
    @pytest.mark.parametrize("n", [1, 2, 3, 5])
    def test_linear_depth(self, n):
        spec = NetworkSpec((2,) + (3,) * (n - 1) + (1,), ("linear",) * (n - 1))
        assert homogeneity_order(spec) == n

    def test_two_layer_relu(self):
        assert homogeneity_order(NetworkSpec((2, 4, 1), ("relu",))) == 2

    def test_relu_squared_scale_test(self, rng):
        spec = NetworkSpec((2, 8, 1), ("relu_squared",))
        assert homogeneity_order(spec) == 3
        w = np.abs(rng.normal(size=spec.n_params))
        x = np.array([0.5, 0.8])
        ratio = forward(spec, 2 * w, x)[0] / forward(spec, w, x)[0]
        assert ratio == pytest.approx(8.0, rel=1e-12)

    def test_scaling_law_random_nets(self, rng):
        for _ in range(100):
            spec = random_spec(rng)
            w = rng.normal(size=spec.n_params)
            x = rng.normal(size=spec.layer_dims[0])
            L = homogeneity_order(spec)
            base = forward(spec, w, x)
            for lam in (0.5, 2.0, 3.0):
                scaled = lam ** L * base
                np.testing.assert_array_less(
                    np.abs(forward(spec, lam * w, x) - scaled), 1e-9 * np.abs(scaled) + 1e-300
                )


class TestSpec:
    def test_groups_cover_parameters(self, rng):
        for _ in range(20):
            spec = random_spec(rng)
            covered = np.concatenate([np.arange(g.start, g.stop) for g in spec.groups])
            np.testing.assert_array_equal(covered, np.arange(spec.n_params))

    def test_group_is_one_row(self):
        spec = NetworkSpec((3, 2, 1), ("relu",))
        assert [(g.start, g.stop, g.layer) for g in spec.groups] == [(0, 3, 1), (3, 6, 1), (6, 8, 2)]

    def test_dict_round_trip(self):
        frozen = np.zeros(6, dtype=bool)
        frozen[[1, 2]] = True
        spec = NetworkSpec((2, 2, 1), ("relu",), frozen)
        back = NetworkSpec.from_dict(spec.to_dict())
        assert back.layer_dims == spec.layer_dims and back.activations == spec.activations
        np.testing.assert_array_equal(back.frozen_mask, frozen)

    def test_bias_rejected(self):
        with pytest.raises(ValueError, match="bias"):
            NetworkSpec.from_dict({"layer_dims": [2, 1], "bias": True})

    def test_activation_count_checked(self):
        with pytest.raises(ValueError):
            NetworkSpec((2, 3, 1), ())

    def test_fan_in_init_bounds(self, rng):
        spec = NetworkSpec((4, 9, 1), ("relu",))
        w = init_uniform_fan_in(spec, rng)
        W1, W2 = spec.unflatten(w)
        assert np.abs(W1).max() <= 0.5 and np.abs(W2).max() <= 1 / 3
