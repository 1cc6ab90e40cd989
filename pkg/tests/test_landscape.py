"""Direction construction, landscape scans, and the sharpness probe."""

import numpy as np
import pytest

import qfault.tensor as T
from qfault.data import synthetic_blobs
from qfault.landscape import (LOSS_CLAMP, Direction, LandscapeGrid,
                              filter_normalized_direction, scan,
                              sharpness_estimate)
from qfault.nn import build_lenet5, build_mlp, forward
from qfault.tensor import Tensor
from qfault.train import TrainConfig, epsilon_hat, train


def blob_model_and_batch(seed=1, train_epochs=0):
    ds = synthetic_blobs(2, 100, 2, 0.08, seed=7)
    model = build_mlp([2, 16, 2], 4, seed=seed)
    if train_epochs:
        train(model, ds, TrainConfig(epochs=train_epochs, seed=seed))
    else:
        from qfault.train import _calibrate_weight_specs
        _calibrate_weight_specs(model)
    batch = (Tensor(ds.images.data[:64]), ds.labels[:64])
    return model, batch


class TestFilterNormalizedDirection:
    def test_filter_norms_match_model(self):
        model = build_lenet5(4, seed=3)
        d = filter_normalized_direction(model, seed=1)
        for pi, p in enumerate(model.params):
            if pi % 2 == 1:
                np.testing.assert_array_equal(d.arrays[pi], np.zeros_like(p.data))
                continue
            wn = np.linalg.norm(p.data.reshape(p.shape[0], -1), axis=1)
            dn = np.linalg.norm(d.arrays[pi].reshape(p.shape[0], -1), axis=1)
            np.testing.assert_allclose(dn, wn, atol=1e-10)

    def test_zero_norm_filter_forces_zero_direction(self):
        model = build_mlp([3, 4, 2], 4, seed=0)
        model.params[0].data[1, :] = 0.0   # kill one output row
        d = filter_normalized_direction(model, seed=5)
        np.testing.assert_array_equal(d.arrays[0][1], np.zeros(3))
        assert np.linalg.norm(d.arrays[0][0]) > 0

    def test_deterministic_in_seed(self):
        model = build_lenet5(4, seed=0)
        a = filter_normalized_direction(model, seed=9)
        b = filter_normalized_direction(model, seed=9)
        for x, y in zip(a.arrays, b.arrays):
            np.testing.assert_array_equal(x, y)

    def test_distinct_seeds_nearly_orthogonal(self):
        """|cos| < 0.2 across 100 seed pairs at this parameter count."""
        model = build_lenet5(4, seed=2)
        flat = {}
        for seed in range(20):
            d = filter_normalized_direction(model, seed=seed)
            flat[seed] = np.concatenate([a.reshape(-1) for a in d.arrays])
        worst = 0.0
        pairs = 0
        for i in range(20):
            for j in range(i + 1, 20):
                a, b = flat[i], flat[j]
                cos = abs(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))
                worst = max(worst, cos)
                pairs += 1
        assert pairs >= 100
        assert worst < 0.2


class TestScan:
    def test_center_equals_baseline(self):
        model, batch = blob_model_and_batch(train_epochs=2)
        grid = scan(model, batch, extent=0.5, steps=5, seed_pair=(1, 2))
        with T.no_grad():
            logits, _ = forward(model, batch[0])
            baseline = float(T.softmax_cross_entropy(logits, batch[1]).data)
        assert abs(grid.center_loss - baseline) <= 1e-12

    def test_negated_directions_rotate_grid(self):
        model, batch = blob_model_and_batch(train_epochs=1)
        d1 = filter_normalized_direction(model, seed=4)
        d2 = filter_normalized_direction(model, seed=5)
        neg = tuple(Direction(arrays=tuple(-a for a in d.arrays), seed=-d.seed)
                    for d in (d1, d2))
        g = scan(model, batch, 0.4, 5, (4, 5), directions=(d1, d2))
        r = scan(model, batch, 0.4, 5, (4, 5), directions=neg)
        np.testing.assert_allclose(r.loss, g.loss[::-1, ::-1], rtol=1e-12)

    def test_deterministic(self):
        model, batch = blob_model_and_batch(train_epochs=1)
        a = scan(model, batch, 1.0, 5, (7, 8))
        b = scan(model, batch, 1.0, 5, (7, 8))
        np.testing.assert_array_equal(a.loss, b.loss)
        assert a.to_csv() == b.to_csv()

    def test_even_or_tiny_steps_rejected(self):
        model, batch = blob_model_and_batch()
        with pytest.raises(ValueError):
            scan(model, batch, 1.0, 4, (0, 1))
        with pytest.raises(ValueError):
            scan(model, batch, 1.0, 1, (0, 1))

    def test_non_finite_cells_clamped(self):
        model, batch = blob_model_and_batch()
        model.params[-1].data[0] = np.inf   # poisoned final bias
        with pytest.warns(UserWarning, match="clamped"), np.errstate(invalid="ignore"):
            grid = scan(model, batch, 0.1, 3, (0, 1))
        assert np.all(np.isfinite(grid.loss))
        assert grid.loss.max() == LOSS_CLAMP

    def test_grid_does_not_mutate_model(self):
        model, batch = blob_model_and_batch(train_epochs=1)
        before = [p.data.copy() for p in model.params]
        scan(model, batch, 1.0, 3, (0, 1))
        for p, b in zip(model.params, before):
            np.testing.assert_array_equal(p.data, b)

    def test_csv_layout(self):
        model, batch = blob_model_and_batch()
        grid = scan(model, batch, 1.0, 3, (0, 1))
        lines = grid.to_csv().strip().split("\n")
        assert len(lines) == 4                       # header + 3 rows
        assert lines[0].startswith(",")              # ys header
        assert float(lines[1].split(",")[0]) == -1.0  # xs first column
        assert grid.sidecar()["steps"] == 3
        assert grid.sidecar()["center_loss"] == grid.center_loss


class TestSharpnessEstimate:
    def test_goes_to_zero_with_rho(self):
        model, batch = blob_model_and_batch(train_epochs=2)
        values = [sharpness_estimate(model, batch, rho)
                  for rho in (0.1, 0.01, 0.001)]
        assert abs(values[1]) < abs(values[0])
        assert abs(values[2]) < abs(values[1])

    def test_first_order_expansion(self):
        """estimate = rho*||g|| + O(rho^2) on a smooth model.

        Activation quantization staircases the loss in the offset, so the
        expansion only holds with the activation grid disabled.
        """
        model, batch = blob_model_and_batch(train_epochs=2)
        model.act_specs = [None] * model.relu_count()
        rho = 1e-4
        grad_norm = epsilon_hat(model, batch, rho).grad_norm
        est = sharpness_estimate(model, batch, rho)
        assert est == pytest.approx(rho * grad_norm, rel=0.05)

    def test_zero_gradient_point_gives_zero(self):
        model = build_mlp([2, 4, 2], 4, seed=0)
        for p in model.params:
            p.data[...] = 0.0
        x = Tensor(np.array([[0.2, 0.4], [0.9, 0.3]]).reshape(2, 1, 1, 2))
        y = np.array([0, 1])
        assert sharpness_estimate(model, (x, y), rho=0.05) == 0.0
