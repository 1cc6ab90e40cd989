"""Model construction, forward semantics, and activation capture."""

import numpy as np
import pytest

from qfault.nn import build_lenet5, build_mlp, forward
from qfault.quant import calibrate
from qfault.tensor import ShapeError, Tensor


def lenet_input(rng, n=2):
    return Tensor(rng.uniform(0.0, 1.0, size=(n, 1, 28, 28)))


class TestBuilders:
    def test_lenet5_parameter_count(self):
        # conv(1->6,5x5)+6 + conv(6->16,5x5)+16 + 400*120+120
        # + 120*84+84 + 84*10+10 = 61,706
        model = build_lenet5(4)
        assert sum(p.size for p in model.params) == 61_706

    def test_mlp_parameter_count(self):
        model = build_mlp([784, 32, 10], 4)
        assert sum(p.size for p in model.params) == 784 * 32 + 32 + 32 * 10 + 10

    def test_same_seed_bitwise_identical(self):
        a = build_lenet5(4, seed=11)
        b = build_lenet5(4, seed=11)
        for pa, pb in zip(a.params, b.params):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a = build_lenet5(4, seed=1)
        b = build_lenet5(4, seed=2)
        assert any(not np.array_equal(pa.data, pb.data)
                   for pa, pb in zip(a.params, b.params))

    def test_bits_validated(self):
        with pytest.raises(ValueError):
            build_lenet5(1)
        with pytest.raises(ValueError):
            build_mlp([4, 2], 9)


class TestForward:
    def test_zero_weights_give_uniform_logits(self, rng):
        model = build_lenet5(4, seed=0)
        for p in model.params:
            p.data[...] = 0.0
        logits, _ = forward(model, lenet_input(rng, 3))
        assert logits.shape == (3, 10)
        np.testing.assert_array_equal(logits.data, np.zeros((3, 10)))

    def test_batch_independence(self, rng):
        model = build_lenet5(4, seed=3)
        x8 = lenet_input(rng, 8)
        single = Tensor(x8.data[4:5])
        full, _ = forward(model, x8)
        one, _ = forward(model, single)
        np.testing.assert_allclose(one.data[0], full.data[4], rtol=1e-10, atol=1e-12)

    def test_capture_count_is_four_relus(self, rng):
        model = build_lenet5(4, seed=0)
        _, acts = forward(model, lenet_input(rng), capture_activations=True)
        assert len(acts) == 4

    def test_capture_off_returns_empty(self, rng):
        model = build_lenet5(4, seed=0)
        _, acts = forward(model, lenet_input(rng))
        assert acts == []

    def test_forward_is_pure(self, rng):
        model = build_lenet5(4, seed=5)
        x = lenet_input(rng)
        a, _ = forward(model, x)
        b, _ = forward(model, x)
        np.testing.assert_array_equal(a.data, b.data)

    def test_activations_non_negative(self, rng):
        model = build_lenet5(4, seed=5)
        _, acts = forward(model, lenet_input(rng), capture_activations=True)
        for act in acts:
            assert act.data.min() >= 0.0

    def test_input_shape_mismatch(self, rng):
        model = build_lenet5(4, seed=0)
        with pytest.raises(ShapeError):
            forward(model, Tensor(np.zeros((1, 1, 14, 14))))
        mlp = build_mlp([9, 4, 2], 4)
        with pytest.raises(ShapeError):
            forward(mlp, Tensor(np.zeros((1, 1, 2, 2))))

    def test_mlp_accepts_any_layout_of_right_size(self):
        mlp = build_mlp([12, 5, 3], 4)
        logits, _ = forward(mlp, Tensor(np.ones((2, 3, 2, 2))))
        assert logits.shape == (2, 3)


class TestQuantizedForward:
    def _calibrated_lenet(self, rng):
        model = build_lenet5(4, seed=2)
        for j in range(len(model.weight_specs)):
            model.weight_specs[j] = calibrate(model.params[2 * j].data, 4, signed=True)
        # run once unquantized to pick activation scales
        _, acts = forward(model, lenet_input(rng), capture_activations=True)
        model.act_specs = [calibrate(np.array([a.data.max()]), 4, signed=False)
                           for a in acts]
        return model

    def test_activations_lie_on_quant_grid(self, rng):
        model = self._calibrated_lenet(rng)
        _, acts = forward(model, lenet_input(rng), capture_activations=True)
        for act, spec in zip(acts, model.act_specs):
            k = act.data / spec.scale
            np.testing.assert_allclose(k, np.round(k), atol=1e-9)
            assert k.max() <= spec.qmax + 1e-9
            assert k.min() >= 0.0

    def test_logits_not_quantized(self, rng):
        model = self._calibrated_lenet(rng)
        logits, _ = forward(model, lenet_input(rng))
        # logits skip relu and the unsigned activation grid entirely
        assert logits.data.min() < 0.0

    def test_copy_is_independent(self, rng):
        model = self._calibrated_lenet(rng)
        clone = model.copy()
        before = [p.data.copy() for p in model.params]
        for p in clone.params:
            p.data[...] = -1.0
        for p, b in zip(model.params, before):
            np.testing.assert_array_equal(p.data, b)
