"""
Tests for the velocity-field network and its hand-written gradients.
"""

import numpy as np
import pytest

from darkpix.rectflow import FlowSample, loss_and_grad
from darkpix.utils import DimensionMismatchError, ValidationError
from darkpix.velocity import FieldArchitecture, VelocityField, grad_check, time_embedding

SMALL = FieldArchitecture(dim=2, hidden=(6, 6), embed=2)


class TestFieldArchitecture:
    """Test layer layout and validation."""

    def test_weight_count(self):
        assert SMALL.n_weights == 98

    def test_dict_roundtrip(self):
        arch = FieldArchitecture(dim=64, hidden=(32, 16), embed=8)
        assert FieldArchitecture.from_dict(arch.to_dict()) == arch

    @pytest.mark.parametrize("kwargs", [
        {'dim': 0},
        {'dim': 2, 'hidden': (4,)},
        {'dim': 2, 'embed': 3},
        {'dim': 2, 'activation': 'relu'},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            FieldArchitecture(**kwargs)


class TestTimeEmbedding:
    """Test the sinusoidal time embedding."""

    def test_zero_time(self):
        emb = time_embedding(np.array([0.0]), 4)
        np.testing.assert_array_equal(emb, [[0.0, 0.0, 1.0, 1.0]])

    def test_first_frequency_uses_scaled_time(self):
        emb = time_embedding(np.array([0.25]), 2)
        np.testing.assert_allclose(emb, [[np.sin(250.0), np.cos(250.0)]])


class TestVelocityField:
    """Test evaluation and weight handling."""

    def test_zero_head_outputs_zero(self):
        field = VelocityField.initialized(SMALL, seed=1)
        x = np.random.default_rng(0).standard_normal((5, 2))
        np.testing.assert_array_equal(field.evaluate(x, x, 0.3), np.zeros((5, 2)))

    def test_single_vector_keeps_shape(self):
        field = VelocityField.initialized(SMALL, seed=1, zero_head=False)
        assert field.evaluate(np.ones(2), np.zeros(2), 0.5).shape == (2,)

    def test_params_are_views(self):
        field = VelocityField(SMALL)
        field.params()['b3'][...] = 2.0
        np.testing.assert_array_equal(field.evaluate(np.ones(2), np.ones(2), 0.0), [2.0, 2.0])

    def test_copy_is_independent(self):
        field = VelocityField.initialized(SMALL, seed=2)
        clone = field.copy()
        clone.weights[0] += 1.0
        assert field.weights[0] != clone.weights[0]

    def test_wrong_weight_count(self):
        with pytest.raises(DimensionMismatchError):
            VelocityField(SMALL, np.zeros(97))

    def test_wrong_input_width(self):
        with pytest.raises(DimensionMismatchError):
            VelocityField(SMALL).evaluate(np.ones((3, 3)), np.ones((3, 3)), 0.1)

    def test_condition_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            VelocityField(SMALL).evaluate(np.ones((3, 2)), np.ones((2, 2)), 0.1)


class TestGradients:
    """Check back-propagation against central differences."""

    @pytest.mark.parametrize("seed", range(50))
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        field = VelocityField.initialized(SMALL, seed=seed, zero_head=False)
        field.params()['W3'][...] = rng.standard_normal((6, 2))
        field.params()['b1'][...] = 0.1 * rng.standard_normal(6)
        batch = FlowSample(
            x0=rng.standard_normal((4, 2)),
            x1=rng.random((4, 2)),
            t=rng.random(4),
            T=rng.random((4, 2)),
        )
        assert grad_check(field, lambda f: loss_and_grad(f, batch)) < 1e-4

    def test_grad_check_restores_weights(self):
        field = VelocityField.initialized(SMALL, seed=3, zero_head=False)
        before = field.weights.copy()
        batch = FlowSample(x0=np.zeros(2), x1=np.ones(2), t=0.5, T=np.ones(2))
        grad_check(field, lambda f: loss_and_grad(f, batch))
        np.testing.assert_array_equal(field.weights, before)

    def test_zero_head_gradient_only_reaches_head(self):
        field = VelocityField.initialized(SMALL, seed=4)
        batch = FlowSample(x0=np.zeros((3, 2)), x1=np.ones((3, 2)), t=np.full(3, 0.2),
                           T=np.ones((3, 2)))
        _, grad = loss_and_grad(field, batch)
        head = 12 + 2
        assert np.all(grad[:-head] == 0)
        assert np.any(grad[-head:] != 0)
