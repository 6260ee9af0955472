import math

import numpy as np
import pytest

from gcmr.nn_core import (OptimizerState, cosine_lr, cross_entropy,
                          l2_normalize, layer_normalize, sgd_momentum_step,
                          softmax)

from oracles import cross_entropy_scalar, softmax_scalar


class TestSoftmax:
    def test_uniform_logits(self):
        np.testing.assert_allclose(softmax([0, 0, 0, 0]), 0.25, atol=1e-12)

    def test_large_logits_no_overflow(self):
        out = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(out))
        assert out[0] > 1 - 1e-12 and out[1] < 1e-12

    def test_matches_scalar_recomputation(self):
        logits = [0.3, -1.2, 2.0]
        expected = softmax_scalar(logits)
        np.testing.assert_allclose(softmax(logits), expected, rtol=1e-12)

    def test_sums_to_one_across_magnitudes(self):
        gen = np.random.default_rng(0)
        for _ in range(200):
            scale = 10.0 ** gen.uniform(-2, 4)
            logits = gen.uniform(-1, 1, size=gen.integers(2, 12)) * scale
            out = softmax(logits)
            assert abs(out.sum() - 1.0) < 1e-9
            assert np.argmax(out) == np.argmax(logits)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            softmax([])
        with pytest.raises(ValueError):
            softmax([1.0, np.nan])

    def test_argmax_invariant_under_constant_shift(self):
        gen = np.random.default_rng(8)
        for _ in range(100):
            logits = gen.normal(size=5) * 4
            shift = gen.normal() * 100
            np.testing.assert_allclose(softmax(logits), softmax(logits + shift),
                                       atol=1e-12)
            assert np.argmax(softmax(logits)) == np.argmax(softmax(logits + shift))


class TestCrossEntropy:
    def test_uniform_four_classes(self):
        assert cross_entropy([1.0, 1.0, 1.0, 1.0], 2) == pytest.approx(math.log(4), rel=1e-12)

    def test_saturated_correct_class(self):
        assert cross_entropy([50.0, 0.0, 0.0], 0) < 1e-9

    def test_matches_scalar_recomputation(self):
        gen = np.random.default_rng(1)
        logits = gen.normal(size=5)
        expected = cross_entropy_scalar(logits.tolist(), 2)
        assert cross_entropy(logits, 2) == pytest.approx(expected, rel=1e-12)

    def test_nonnegative(self):
        gen = np.random.default_rng(2)
        for _ in range(200):
            logits = gen.normal(size=6) * 3
            assert cross_entropy(logits, int(gen.integers(6))) >= 0.0

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy([0.0, 1.0], 2)
        with pytest.raises(ValueError):
            cross_entropy([0.0, 1.0], -1)


class TestLayerNormalize:
    def test_constant_vector_maps_to_zero(self):
        np.testing.assert_array_equal(layer_normalize([3.0, 3.0, 3.0, 3.0]), 0.0)

    def test_standardized_vector_is_near_fixed_point(self):
        gen = np.random.default_rng(3)
        v = gen.normal(size=64)
        v = (v - v.mean()) / v.std()
        np.testing.assert_allclose(layer_normalize(v), v, atol=1e-4)

    def test_postconditions_on_random_768d(self):
        gen = np.random.default_rng(4)
        v = gen.normal(scale=10.0, size=768)
        out = layer_normalize(v)
        assert abs(out.mean()) < 1e-9
        assert abs(out.var() - 1.0) < 1e-6

    def test_postconditions_hold_over_1000_vectors(self):
        gen = np.random.default_rng(5)
        for _ in range(1000):
            v = gen.normal(scale=10.0, size=int(gen.integers(8, 128)))
            out = layer_normalize(v)
            assert abs(out.mean()) < 1e-9
            assert abs(out.var() - 1.0) < 1e-6

    def test_rejects_degenerate_input(self):
        with pytest.raises(ValueError):
            layer_normalize([1.0])


class TestL2Normalize:
    def test_unit_norm(self):
        out = l2_normalize([3.0, 4.0])
        np.testing.assert_allclose(np.linalg.norm(out), 1.0, rtol=1e-12)

    def test_zero_vector_passes_through(self):
        np.testing.assert_array_equal(l2_normalize([0.0, 0.0, 0.0]), 0.0)


class TestCosineSchedule:
    def make_state(self, base=0.1, minimum=0.001, epochs=100):
        return OptimizerState(np.zeros(1), 0.9, base, minimum, epochs)

    def test_endpoints_and_midpoint(self):
        state = self.make_state()
        assert cosine_lr(0, state) == pytest.approx(0.1, rel=1e-12)
        assert cosine_lr(100, state) == pytest.approx(0.001, rel=1e-12)
        assert cosine_lr(50, state) == pytest.approx((0.1 + 0.001) / 2, rel=1e-12)

    def test_monotone_non_increasing(self):
        state = self.make_state(epochs=73)
        values = [cosine_lr(e, state) for e in range(74)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_epoch_out_of_range(self):
        state = self.make_state(epochs=10)
        with pytest.raises(ValueError):
            cosine_lr(11, state)
        with pytest.raises(ValueError):
            cosine_lr(-1, state)


class TestSgdMomentum:
    def test_momentum_zero_is_vanilla_descent(self):
        gen = np.random.default_rng(6)
        params = gen.normal(size=(4, 3))
        grads = gen.normal(size=(4, 3))
        state = OptimizerState(np.zeros((4, 3)), momentum=0.0)
        updated, _ = sgd_momentum_step(params, grads, state, lr=0.1)
        expected = params - 0.1 * grads
        assert updated.tobytes() == expected.tobytes()

    def test_zero_gradients_zero_velocity_fixed_point(self):
        params = np.ones((2, 2))
        state = OptimizerState(np.zeros((2, 2)), momentum=0.9)
        updated, new_state = sgd_momentum_step(params, np.zeros((2, 2)), state, lr=0.5)
        np.testing.assert_array_equal(updated, params)
        np.testing.assert_array_equal(new_state.velocity, 0.0)

    def test_two_identical_steps_with_momentum(self):
        # second displacement is lr * (1 + momentum) * grad
        gen = np.random.default_rng(7)
        params = gen.normal(size=5)
        grads = gen.normal(size=5)
        state = OptimizerState(np.zeros(5), momentum=0.9)
        after_one, state = sgd_momentum_step(params, grads, state, lr=0.2)
        after_two, _ = sgd_momentum_step(after_one, grads, state, lr=0.2)
        np.testing.assert_allclose(after_one - after_two, 0.2 * 1.9 * grads, rtol=1e-12)

    def test_purity_and_shape_check(self):
        params = np.ones(3)
        before = params.copy()
        state = OptimizerState(np.zeros(3))
        sgd_momentum_step(params, np.ones(3), state, lr=0.1)
        np.testing.assert_array_equal(params, before)
        np.testing.assert_array_equal(state.velocity, 0.0)
        with pytest.raises(ValueError):
            sgd_momentum_step(params, np.ones(4), state, lr=0.1)

    def test_state_validation(self):
        with pytest.raises(ValueError):
            OptimizerState(np.zeros(1), momentum=1.0)
        with pytest.raises(ValueError):
            OptimizerState(np.zeros(1), base_lr=-1.0)
        with pytest.raises(ValueError):
            OptimizerState(np.zeros(1), total_epochs=0)
