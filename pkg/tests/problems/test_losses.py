"""
Tests for loss families and certified constants.
"""
import numpy as np
import pytest

from proxfed.problems.losses import (
    Batch,
    Example,
    LossConstants,
    LossKind,
    LossModel,
    batch_risk_and_grad,
    certify_constants,
    curvature_coefficient,
    loss_subgrad,
    loss_value,
    per_example_grads,
)
from proxfed.utils.errors import ConfigError


def example(a, y):
    return Example(np.array(a, dtype=float), float(y))


class TestLossValues:
    """Test cases for per-example values and subgradients."""

    def test_quadratic(self):
        """Test the quadratic loss and gradient."""
        model = LossModel('quadratic')
        z = example([1.0, 0.0], 0.0)
        w = np.array([2.0, 0.0])
        assert loss_value(model, w, z) == pytest.approx(2.0)
        assert np.allclose(loss_subgrad(model, w, z), [2.0, 0.0])

    def test_absolute_zero_residual(self):
        """Test the absolute loss at a zero residual."""
        model = LossModel('absolute')
        z = example([1.0], 3.0)
        w = np.array([3.0])
        assert loss_value(model, w, z) == 0.0
        assert np.array_equal(loss_subgrad(model, w, z), [0.0])

    def test_absolute_subgradient(self):
        """Test the absolute loss subgradient sign(r) a."""
        model = LossModel('absolute')
        assert np.allclose(loss_subgrad(model, np.array([1.0]), example([2.0], 0.0)), [2.0])

    def test_logistic_at_zero(self):
        """Test the logistic loss at w = 0."""
        model = LossModel('logistic')
        assert loss_value(model, np.array([0.0]), example([1.0], 1.0)) == pytest.approx(np.log(2.0))

    def test_sigmoid_squared_gradient(self):
        """Test the sigmoid squared gradient against a finite difference."""
        model = LossModel('sigmoid_squared')
        z = example([1.0], 0.0)
        g = loss_subgrad(model, np.array([0.0]), z)
        assert g[0] == pytest.approx(0.25)
        h = 1e-6
        fd = (loss_value(model, np.array([h]), z) - loss_value(model, np.array([-h]), z)) / (2 * h)
        assert abs(fd - g[0]) < 1e-7

    def test_phase_retrieval_kink(self):
        """Test the +1 selection at u^2 = y."""
        model = LossModel('phase_retrieval')
        z = example([1.0], 4.0)
        assert loss_value(model, np.array([2.0]), z) == 0.0
        assert np.allclose(loss_subgrad(model, np.array([2.0]), z), [4.0])

    def test_values_nonnegative(self):
        """Test that every kind gives nonnegative losses."""
        rng = np.random.default_rng(3)
        for kind in LossKind:
            model = LossModel(kind)
            for _ in range(20):
                z = example(rng.normal(size=3), rng.choice([-1.0, 0.0, 1.0]))
                assert loss_value(model, rng.normal(size=3), z) >= 0.0

    def test_dimension_mismatch(self):
        """Test that mismatched dimensions raise."""
        with pytest.raises(ConfigError):
            loss_value(LossModel('quadratic'), np.zeros(3), example([1.0, 2.0], 0.0))


class TestLossKind:
    """Test cases for loss kind names."""

    def test_from_name(self):
        """Test name normalisation."""
        assert LossKind.from_name('Sigmoid-Squared') is LossKind.SIGMOID_SQUARED
        assert LossKind.from_name('logistic') is LossKind.LOGISTIC
        assert LossKind.from_name(LossKind.ABSOLUTE) is LossKind.ABSOLUTE

    def test_unknown(self):
        """Test that unknown names raise."""
        with pytest.raises(ConfigError, match='instance.loss'):
            LossKind.from_name('hinge')

    def test_model_flags(self):
        """Test smoothness and convexity flags."""
        assert LossModel('logistic').is_smooth
        assert not LossModel('absolute').is_smooth
        assert LossModel('absolute').is_convex
        assert not LossModel('phase_retrieval').is_convex

    def test_bad_radius(self):
        """Test that a non-positive radius raises."""
        with pytest.raises(ConfigError):
            LossModel('quadratic', domain_radius=0.0)


class TestBatch:
    """Test cases for batches and batch risk."""

    def test_cancellation(self):
        """Test two quadratic examples with residuals 1 and -1."""
        model = LossModel('quadratic')
        risk, grad = batch_risk_and_grad(model, [example([1.0], -1.0), example([1.0], 1.0)],
                                         np.array([0.0]))
        assert risk == pytest.approx(0.5)
        assert np.allclose(grad, [0.0])

    def test_singleton(self):
        """Test that a singleton batch equals the per-example values."""
        model = LossModel('logistic')
        z = example([0.5, -1.0], 1.0)
        w = np.array([0.3, 0.7])
        risk, grad = batch_risk_and_grad(model, [z], w)
        assert risk == pytest.approx(loss_value(model, w, z))
        assert np.allclose(grad, loss_subgrad(model, w, z))

    def test_quadratic_normal_equations(self):
        """Test the quadratic batch risk against direct evaluation."""
        rng = np.random.default_rng(1)
        A = rng.normal(size=(5, 3))
        y = rng.normal(size=5)
        w = rng.normal(size=3)
        risk, grad = batch_risk_and_grad(LossModel('quadratic'), Batch(A, y), w)
        r = A @ w - y
        assert abs(risk - 0.5 * np.mean(r ** 2)) < 1e-12
        assert np.allclose(grad, A.T @ r / 5, atol=1e-12)

    def test_empty_batch(self):
        """Test that an empty batch raises."""
        with pytest.raises(ConfigError, match='empty batch'):
            batch_risk_and_grad(LossModel('quadratic'), [], np.zeros(2))

    def test_pooled_weights(self):
        """Test that pooling splits weight evenly between batches."""
        a = Batch(np.ones((1, 2)), np.zeros(1))
        b = Batch(np.ones((3, 2)), np.zeros(3))
        pooled = Batch.pooled([a, b])
        assert np.allclose(pooled.weights, [0.5, 1 / 6, 1 / 6, 1 / 6])
        assert pooled.weights.sum() == pytest.approx(1.0)

    def test_pooled_risk_is_mean_of_risks(self):
        """Test that the pooled risk is the unweighted mean of batch risks."""
        rng = np.random.default_rng(2)
        model = LossModel('quadratic')
        batches = [Batch(rng.normal(size=(n, 2)), rng.normal(size=n)) for n in (2, 5, 9)]
        w = rng.normal(size=2)
        expected = np.mean([batch_risk_and_grad(model, b, w)[0] for b in batches])
        assert batch_risk_and_grad(model, Batch.pooled(batches), w)[0] == pytest.approx(expected)

    def test_replaced(self):
        """Test replacing one example."""
        batch = Batch(np.zeros((3, 2)), np.zeros(3))
        other = batch.replaced(1, example([1.0, 2.0], 5.0))
        assert np.array_equal(other.features[1], [1.0, 2.0])
        assert other.labels[1] == 5.0
        assert batch.labels[1] == 0.0
        with pytest.raises(ConfigError):
            batch.replaced(3, example([1.0, 2.0], 5.0))

    def test_feature_label_mismatch(self):
        """Test that mismatched row counts raise."""
        with pytest.raises(ConfigError):
            Batch(np.zeros((3, 2)), np.zeros(2))


class TestCertifyConstants:
    """Test cases for certified constants."""

    def test_logistic_unit_features(self):
        """Test logistic constants with unit-norm features."""
        rng = np.random.default_rng(0)
        A = rng.normal(size=(20, 3))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        constants = certify_constants(LossModel('logistic'), Batch(A, np.sign(rng.normal(size=20))))
        assert constants.G == pytest.approx(1.0)
        assert constants.L == pytest.approx(0.25)

    def test_logistic_sampled_gradients(self):
        """Test that sampled gradient norms never exceed G."""
        rng = np.random.default_rng(4)
        model = LossModel('logistic')
        batch = Batch(rng.normal(size=(30, 3)), np.sign(rng.normal(size=30)))
        G = certify_constants(model, batch).G
        for _ in range(200):
            w = rng.normal(size=3) * 5
            assert np.max(np.linalg.norm(per_example_grads(model, batch, w), axis=1)) <= G

    def test_sigmoid_squared_curvature_bound(self):
        """Test that |phi''| on a fine margin grid stays below L and within a factor 2.5 of it."""
        A = np.array([[2.0, 0.0], [0.0, 1.0]])
        u = np.linspace(-20.0, 20.0, 40001)
        for y in (0.0, 0.5, 1.0):
            batch = Batch(A, np.array([y, y]))
            constants = certify_constants(LossModel('sigmoid_squared'), batch)
            c = max(abs(y), abs(1.0 - y))
            assert constants.L == pytest.approx(4.0 * (0.125 + c / (3.0 * np.sqrt(3.0))))
            assert constants.nu == constants.L
            assert constants.G == pytest.approx(c)
            sup = float(np.max(np.abs(curvature_coefficient(LossKind.SIGMOID_SQUARED, u,
                                                            np.full_like(u, y)))))
            assert sup <= constants.L / 4.0
            assert constants.L / 4.0 <= 2.5 * sup

    def test_absolute(self):
        """Test absolute constants."""
        batch = Batch(np.array([[2.0, 0.0], [0.0, 1.0]]), np.array([1.0, -1.0]))
        constants = certify_constants(LossModel('absolute'), batch)
        assert constants.G == pytest.approx(2.0)
        assert constants.nu == 0.0
        assert constants.L is None

    def test_phase_retrieval(self):
        """Test phase retrieval constants on a radius-5 ball."""
        batch = Batch(np.array([[1.0, 0.0], [0.0, 0.5]]), np.array([1.0, 0.0]))
        constants = certify_constants(LossModel('phase_retrieval'), batch, radius=5.0)
        assert constants.nu == pytest.approx(2.0)
        assert constants.G == pytest.approx(10.0)

    def test_quadratic(self):
        """Test quadratic constants."""
        batch = Batch(np.array([[3.0, 4.0]]), np.array([-2.0]))
        constants = certify_constants(LossModel('quadratic'), batch, radius=1.0)
        assert constants.L == pytest.approx(25.0)
        assert constants.G == pytest.approx(5.0 * (5.0 + 2.0))

    def test_curvature(self):
        """Test the curvature and strong convexity helpers."""
        assert LossConstants(1.0, 2.0, 0.0).curvature == 2.0
        assert LossConstants(1.0, None, 3.0).curvature == 3.0
        assert LossConstants(1.0, None, 0.0).strong_convexity(0.5) == 2.0
