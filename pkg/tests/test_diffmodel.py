import numpy as np
import pytest

from tiltseg import losses as L
from tiltseg.diffmodel import (
    LossKind,
    ModelParams,
    central_difference,
    finite_diff_grad,
    forward,
    init_params,
    loss_and_grad,
    predict,
    sgd_step,
)
from tiltseg.errors import DivergenceError, ShapeError
from tiltseg.tilt import tilt_weights

LOSS_KINDS = [
    LossKind.mcce(),
    LossKind.tce_image(1.5),
    LossKind.tce_image(-0.7),
    LossKind.tce_class(2.0),
    LossKind.tce_class(-1.0),
    LossKind.focal(2.0, [0.5, 1.0, 1.5]),
    LossKind.focal(0.5),
]


def small_instance(rng, arch="linear", ignore=None):
    """Batch of 2 images, 4x4 pixels, d=2, K=3, with larger-than-init weights."""
    params = init_params(2, 3, rng, arch=arch, hidden=5)
    params = params.with_flat(rng.normal(scale=1.0, size=params.size))
    x = rng.normal(size=(2, 4, 4, 2))
    y = rng.integers(0, 3, size=(2, 4, 4))
    if ignore is not None:
        y[0, 0, :2] = ignore
    return params, x, y


def relative_error(g, fd):
    return np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(g)))


class TestForward:
    def test_zero_params_uniform(self):
        params = ModelParams("linear", [np.zeros((4, 3)), np.zeros(4)])
        np.testing.assert_array_equal(forward(params, np.ones((2, 2, 3))), np.full((2, 2, 4), 0.25))

    def test_saturated_logit(self):
        params = ModelParams("linear", [np.array([[10.0], [-10.0]]), np.zeros(2)])
        assert forward(params, np.array([[[1.0]]]))[0, 0, 0] > 0.999

    @pytest.mark.parametrize("arch", ["linear", "one-hidden"])
    def test_rows_are_distributions(self, rng, arch):
        params, x, _ = small_instance(rng, arch)
        p = forward(params, x)
        assert p.shape == (2, 4, 4, 3)
        assert np.all((p > 0) & (p < 1))
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)

    def test_dimension_mismatch(self, rng):
        params = init_params(3, 2, rng)
        with pytest.raises(ShapeError, match="shape"):
            forward(params, np.zeros((2, 2, 4)))

    def test_predict_is_argmax(self, rng):
        params, x, _ = small_instance(rng)
        np.testing.assert_array_equal(predict(params, x), forward(params, x).argmax(-1))


class TestParams:
    def test_init_ranges(self, rng):
        p = init_params(6, 4, rng, arch="one-hidden", hidden=7)
        w1, b1, w2, b2 = p.arrays
        assert w1.shape == (7, 6) and w2.shape == (4, 7)
        assert np.all(np.abs(w1) <= 0.1) and np.all(np.abs(w2) <= 0.1)
        assert not b1.any() and not b2.any()
        assert p.size == 7 * 6 + 7 + 4 * 7 + 4

    def test_flat_round_trip(self, rng):
        p = init_params(3, 5, rng)
        q = p.with_flat(p.flat())
        for a, b in zip(p.arrays, q.arrays):
            np.testing.assert_array_equal(a, b)

    def test_wrong_flat_length(self, rng):
        with pytest.raises(ShapeError):
            init_params(3, 5, rng).with_flat(np.zeros(3))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            ModelParams("linear", [np.array([[np.nan]]), np.zeros(1)])


class TestLossAndGrad:
    @pytest.mark.parametrize("arch", ["linear", "one-hidden"])
    @pytest.mark.parametrize("loss", LOSS_KINDS, ids=str)
    def test_matches_finite_differences(self, rng, arch, loss):
        for _ in range(20):
            params, x, y = small_instance(rng, arch)
            _, g = loss_and_grad(params, x, y, loss)
            fd = finite_diff_grad(params, x, y, loss, step=1e-5)
            assert relative_error(g, fd) < 1e-5

    @pytest.mark.parametrize("loss", LOSS_KINDS, ids=str)
    def test_with_ignored_pixels(self, rng, loss):
        params, x, y = small_instance(rng, ignore=255)
        _, g = loss_and_grad(params, x, y, loss, ignore_value=255)
        fd = finite_diff_grad(params, x, y, loss, ignore_value=255)
        assert relative_error(g, fd) < 1e-5

    @pytest.mark.parametrize("loss", LOSS_KINDS, ids=str)
    def test_value_matches_loss_functions(self, rng, loss):
        params, x, y = small_instance(rng)
        probs = forward(params, x)
        expected = {
            "mcce": lambda: L.mcce_loss(probs, y),
            "tce_image": lambda: L.tce_image_loss(probs, y, loss.t),
            "tce_class": lambda: L.tce_class_loss(probs, y, loss.t),
            "focal": lambda: L.focal_loss(probs, y, loss.gamma, loss.alpha),
        }[loss.name]()
        value, _ = loss_and_grad(params, x, y, loss)
        assert value == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("t", [-2.0, 0.3, 1.0, 5.0])
    def test_weighted_gradient_identity(self, rng, t):
        params, x, y = small_instance(rng)
        x = np.concatenate([x, rng.normal(size=(1, 4, 4, 2))])
        y = np.concatenate([y, rng.integers(0, 3, size=(1, 4, 4))])
        per_image = [loss_and_grad(params, x[m : m + 1], y[m : m + 1]) for m in range(3)]
        w = tilt_weights([v for v, _ in per_image], t)
        expected = sum(wm * g for wm, (_, g) in zip(w, per_image))
        _, g = loss_and_grad(params, x, y, LossKind.tce_image(t))
        np.testing.assert_allclose(g, expected, atol=1e-8)

    def test_zero_tilt_is_mean_of_image_gradients(self, rng):
        params, x, y = small_instance(rng)
        y[1, :2] = 9  # unequal pixel counts: still a mean over images
        grads = [loss_and_grad(params, x[m : m + 1], y[m : m + 1], ignore_value=9)[1] for m in range(2)]
        _, g = loss_and_grad(params, x, y, LossKind.tce_image(0.0), ignore_value=9)
        np.testing.assert_allclose(g, np.mean(grads, axis=0), atol=1e-10)

    def test_saturated_minimum(self):
        params = ModelParams("linear", [np.array([[20.0], [-20.0]]), np.zeros(2)])
        x = np.array([[[[1.0]], [[1.0]]]]).reshape(1, 1, 2, 1)
        y = np.zeros((1, 1, 2), dtype=int)
        _, g = loss_and_grad(params, x, y)
        assert np.linalg.norm(g) < 1e-6

    @pytest.mark.parametrize("loss", LOSS_KINDS, ids=str)
    def test_deterministic(self, rng, loss):
        params, x, y = small_instance(rng, "one-hidden")
        v1, g1 = loss_and_grad(params, x, y, loss)
        v2, g2 = loss_and_grad(params, x, y, loss)
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)

    @pytest.mark.parametrize("loss", LOSS_KINDS, ids=str)
    def test_small_step_does_not_increase_loss(self, rng, loss):
        for _ in range(5):
            params, x, y = small_instance(rng)
            v0, g = loss_and_grad(params, x, y, loss)
            new, _ = sgd_step(params, g, lr=1e-4, momentum=0.0)
            v1, _ = loss_and_grad(new, x, y, loss)
            assert v1 <= v0


class TestCentralDifference:
    def test_quadratic(self, rng):
        theta = rng.normal(size=6)
        g = central_difference(lambda v: float(np.sum(v**2)), theta, 1e-3)
        np.testing.assert_allclose(g, 2 * theta, atol=1e-9)

    def test_step_halving_is_second_order(self):
        theta = np.array([0.3, -0.8, 1.1])
        f = lambda v: float(np.sum(np.sin(v) + v**3))  # noqa: E731
        exact = np.cos(theta) + 3 * theta**2
        e1 = np.abs(central_difference(f, theta, 1e-2) - exact)
        e2 = np.abs(central_difference(f, theta, 5e-3) - exact)
        np.testing.assert_allclose(e1 / e2, 4.0, rtol=0.02)

    @pytest.mark.parametrize("step", [0.0, -1e-5])
    def test_non_positive_step(self, step):
        with pytest.raises(ValueError, match="step"):
            central_difference(lambda v: 0.0, np.zeros(2), step)


class TestSgdStep:
    def params(self):
        return ModelParams("linear", [np.array([[1.0, -2.0]]), np.array([0.5])])

    def test_zero_gradient(self):
        p = self.params()
        new, _ = sgd_step(p, np.zeros(3))
        np.testing.assert_array_equal(new.flat(), p.flat())

    def test_plain_step(self):
        p = self.params()
        g = np.array([0.25, 1.0, -3.0])
        new, _ = sgd_step(p, g, lr=1.0, momentum=0.0)
        np.testing.assert_array_equal(new.flat(), p.flat() - g)

    def test_two_momentum_steps(self):
        p = self.params()
        g = np.array([0.25, 1.0, -3.0])
        p1, v = sgd_step(p, g, lr=0.1, momentum=0.9)
        p2, v = sgd_step(p1, g, lr=0.1, momentum=0.9, velocity=v)
        np.testing.assert_allclose(p.flat() - p2.flat(), 0.1 * (g + 1.9 * g), atol=1e-15)
        np.testing.assert_allclose(v, 1.9 * g)

    def test_non_finite_gradient(self):
        with pytest.raises(DivergenceError, match="divergence"):
            sgd_step(self.params(), np.array([0.0, np.inf, 0.0]))

    def test_overflowing_update(self):
        with pytest.raises(DivergenceError, match="divergence"):
            sgd_step(self.params(), np.array([1e308, 0.0, 0.0]), lr=1e10)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step(self.params(), np.zeros(2))

    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"momentum": 1.0}, {"momentum": -0.1}])
    def test_hyperparameter_ranges(self, kwargs):
        with pytest.raises(ValueError):
            sgd_step(self.params(), np.zeros(3), **kwargs)
