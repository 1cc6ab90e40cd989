"""Acceptance suite: property gates plus the desk-scale four-arm reproduction.

Part 1 (fast): compact property suites over autodiff, the quantizer, the
adversarial perturbation, the fault injector, the landscape scanner, and
the small-instance Monte Carlo oracle.

Part 2 (minutes): the quick-preset four-arm comparison with fault sweeps,
run on FashionMNIST when IDX files are available (QFAULT_DATA_ROOT or
./data), otherwise on the bundled synthetic image benchmark. One PASS/FAIL
line is printed per criterion.
"""

import math
import os
from pathlib import Path

import numpy as np
import pytest

import qfault.tensor as T
from qfault.data import load_idx, synthetic_blobs, synthetic_images
from qfault.experiments import PRESETS, run_reproduce
from qfault.fault import (BITFLIP, FaultSite, FaultSpec, apply_faults,
                          monte_carlo_eval, sample_fault_sites, weight_stores)
from qfault.landscape import filter_normalized_direction, scan
from qfault.nn import build_lenet5, build_mlp, forward
from qfault.quant import (QuantSpec, decode_bits, dequantize, encode_bits,
                          fake_quant_ste, quantize)
from qfault.tensor import Tensor
from qfault.train import (SaqConfig, TrainConfig, epsilon_hat, evaluate,
                          train, _calibrate_weight_specs)

from conftest import fd_gradient


def _report(name: str, passed: bool, detail: str) -> None:
    print(f"\n[acceptance] {'PASS' if passed else 'FAIL'} {name}: {detail}")
    assert passed, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Property gates
# ---------------------------------------------------------------------------


class TestPropertyGates:
    def test_autodiff_matches_finite_differences(self, rng):
        """Every differentiable op, 20 random instances, rel err <= 1e-4."""
        worst = 0.0

        def check(build, params):
            nonlocal worst
            loss = build()
            for p in params:
                p.zero_grad()
            T.backward(loss)
            for p in params:
                fd = fd_gradient(lambda: float(build().data), p.data)
                denom = np.maximum(np.abs(fd), 1e-6)
                worst = max(worst, float(np.max(np.abs(p.grad - fd) / denom)))

        for _ in range(20):
            a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
            check(lambda: T.matmul(a, b).sum(), [a, b])
            x = Tensor(rng.standard_normal((2, 2, 6, 5)), requires_grad=True)
            k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
            check(lambda: T.l2_norm_sq(T.conv2d(x, k, stride=2, padding=1)), [x, k])
            z = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
            y = rng.integers(0, 5, size=4)
            check(lambda: T.softmax_cross_entropy(z, y), [z])
            v = Tensor(rng.uniform(0.2, 1.0, size=7)
                       * rng.choice([-1.0, 1.0], size=7), requires_grad=True)
            check(lambda: T.add(T.l1_norm(v), T.relu(v).sum()), [v])
            w = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
            check(lambda: T.maxpool2d(w, 2).sum(), [w])
            check(lambda: T.avgpool2d(w, 2).sum(), [w])
        _report("autodiff finite-difference gate", worst <= 1e-4,
                f"worst relative error {worst:.2e} (limit 1e-4)")

    def test_quantizer_gate(self, rng):
        ok = True
        details = []
        for bits in (2, 4, 8):
            spec = QuantSpec(bits=bits, scale=0.31, zero_point=0, signed=True,
                             qmin=-(1 << (bits - 1)), qmax=(1 << (bits - 1)) - 1)
            ok &= all(decode_bits(encode_bits(c, spec), spec) == c
                      for c in range(spec.qmin, spec.qmax + 1))
            w = np.linspace(spec.range_lo, spec.range_hi, 4001)
            err = np.abs(dequantize(quantize(w, spec)).data - w).max()
            ok &= err <= spec.scale / 2 + 1e-12
            srt = np.sort(rng.uniform(spec.range_lo * 2, spec.range_hi * 2, 500))
            ok &= bool(np.all(np.diff(quantize(srt, spec).codes) >= 0))
            details.append(f"bits={bits} max_err={err:.4f}")
        _report("quantizer gate", ok, "; ".join(details))

    def test_perturbation_norm_gate(self, rng):
        worst = 0.0
        for seed in range(6):
            model = build_mlp([3, 5, 3], 4, seed=seed)
            x = Tensor(rng.uniform(0, 1, size=(5, 1, 1, 3)))
            y = rng.integers(0, 3, size=5)
            pert = epsilon_hat(model, (x, y), rho=0.05)
            total = math.sqrt(sum(float((a ** 2).sum())
                                  for a in pert.weights + pert.biases if a is not None))
            worst = max(worst, abs(total - 0.05))
        w = Tensor(rng.standard_normal(8), requires_grad=True)
        T.backward(T.scale(T.l2_norm_sq(w), 0.5))
        eps = 0.1 * w.grad / np.linalg.norm(w.grad)
        analytic = 0.1 * w.data / np.linalg.norm(w.data)
        quad_err = float(np.abs(eps - analytic).max())
        _report("perturbation gate", worst <= 1e-10 and quad_err <= 1e-12,
                f"norm error {worst:.2e} (limit 1e-10), quadratic match {quad_err:.2e}")

    def test_fault_injector_gate(self):
        spec = QuantSpec(bits=4, scale=0.2, zero_point=0, signed=True,
                         qmin=-8, qmax=7)
        codes = np.arange(-8, 8)
        store = quantize(codes * 0.2, spec)
        sites = sample_fault_sites([store], 0.25, seed=1)
        count_ok = len(sites) == 16 and len(set(sites)) == 16
        masked = apply_faults([store], [FaultSite(0, 8, 2)], "sa0")  # code 0
        mask_ok = bool(np.array_equal(masked[0].codes, store.codes))
        flip2 = apply_faults(apply_faults([store], sites, BITFLIP), sites, BITFLIP)
        invol_ok = bool(np.array_equal(flip2[0].codes, store.codes))
        ds = synthetic_blobs(2, 60, 2, 0.08, seed=7)
        model = build_mlp([2, 8, 2], 4, seed=0)
        train(model, ds, TrainConfig(epochs=2, seed=0))
        before = [p.data.copy() for p in model.params]
        fs = FaultSpec(BITFLIP, 0.05, trials=5, base_seed=3)
        serial = monte_carlo_eval(model, ds, fs, workers=1)
        parallel = monte_carlo_eval(model, ds, fs, workers=4)
        rerun = monte_carlo_eval(model, ds, fs, workers=1)
        pure_ok = all(np.array_equal(p.data, b) for p, b in zip(model.params, before))
        same_ok = serial == parallel == rerun
        _report("fault injector gate",
                count_ok and mask_ok and invol_ok and pure_ok and same_ok,
                f"count={count_ok} masking={mask_ok} involution={invol_ok} "
                f"purity={pure_ok} serial==parallel==rerun={same_ok}")

    def test_landscape_gate(self, rng):
        ds = synthetic_blobs(2, 80, 2, 0.08, seed=7)
        model = build_mlp([2, 12, 2], 4, seed=3)
        train(model, ds, TrainConfig(epochs=2, seed=3))
        batch = (Tensor(ds.images.data[:64]), ds.labels[:64])
        grid = scan(model, batch, 0.5, 5, (1, 2))
        with T.no_grad():
            logits, _ = forward(model, batch[0])
            base = float(T.softmax_cross_entropy(logits, batch[1]).data)
        center_ok = abs(grid.center_loss - base) <= 1e-12
        d = filter_normalized_direction(model, seed=4)
        norm_ok = True
        for pi, p in enumerate(model.params):
            if pi % 2 == 0:
                wn = np.linalg.norm(p.data.reshape(p.shape[0], -1), axis=1)
                dn = np.linalg.norm(d.arrays[pi].reshape(p.shape[0], -1), axis=1)
                norm_ok &= bool(np.all(np.abs(wn - dn) <= 1e-10))
        _report("landscape gate", center_ok and norm_ok,
                f"|center-baseline|={abs(grid.center_loss - base):.2e} (limit 1e-12), "
                f"filter norms match={norm_ok}")

    def test_small_instance_monte_carlo_oracle(self):
        model = build_mlp([1, 2], 4, seed=0)
        model.params[0].data = np.array([[0.7], [-0.4]])
        model.params[1].data = np.array([0.05, -0.05])
        _calibrate_weight_specs(model)
        x = np.linspace(-1.0, 1.0, 8).reshape(8, 1, 1, 1)
        from qfault.data import Dataset
        ds = Dataset(images=Tensor(x), labels=(x.reshape(-1) > 0).astype(int))
        stores = weight_stores(model)
        site_accs = []
        for e in range(2):
            for b in range(4):
                faulted = apply_faults(stores, [FaultSite(0, e, b)], BITFLIP)
                replica = model.copy()
                replica.params[0].data = dequantize(faulted[0]).data.reshape(2, 1)
                site_accs.append(evaluate(replica, ds))
        enum_mean = float(np.mean(site_accs))
        rep = monte_carlo_eval(model, ds, FaultSpec(BITFLIP, 1 / 8, trials=2000,
                                                    base_seed=0))
        se = float(np.std(site_accs) / np.sqrt(2000))
        diff = abs(rep.mean_acc - enum_mean)
        _report("small-instance oracle", diff <= max(5 * se, 1e-9),
                f"|mc - enum| = {diff:.5f} (enumeration mean {enum_mean:.4f}, "
                f"limit {max(5 * se, 1e-9):.5f})")


# ---------------------------------------------------------------------------
# Desk-scale four-arm reproduction (quick preset)
# ---------------------------------------------------------------------------


def _fmnist_root():
    root = Path(os.environ.get("QFAULT_DATA_ROOT", "data"))
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    if all((root / n).exists() or (root / f"{n}.gz").exists() for n in names):
        return root
    return None


def _pick(root, name):
    p = root / name
    return p if p.exists() else root / f"{name}.gz"


@pytest.fixture(scope="session")
def reproduction(tmp_path_factory):
    """Quick-preset four-arm run; FashionMNIST when available, otherwise the
    synthetic image benchmark (reported in the output header)."""
    preset = PRESETS["quick"]
    root = _fmnist_root()
    if root is not None:
        train_set = load_idx(_pick(root, "train-images-idx3-ubyte"),
                             _pick(root, "train-labels-idx1-ubyte"), split="train")
        eval_set = load_idx(_pick(root, "t10k-images-idx3-ubyte"),
                            _pick(root, "t10k-labels-idx1-ubyte"), split="test")
        source = "fmnist"
    else:
        train_set = synthetic_images(10, preset.train_samples // 10 + 200,
                                     seed=0, split="train")
        eval_set = synthetic_images(10, 200, seed=0, split="test")
        source = "synthetic-images (FashionMNIST IDX files not found)"
    print(f"\n[acceptance] desk-scale arm comparison backed by: {source}")
    out_dir = tmp_path_factory.mktemp("reproduce")
    result = run_reproduce(preset, train_set, eval_set, out_dir,
                           log=lambda s: print(f"[reproduce] {s}"))
    return result


def _check(result, name):
    matches = [c for c in result.checks if c.name == name]
    assert matches, f"no directional check named {name!r}"
    c = matches[0]
    _report(name, c.passed, c.detail)


class TestDeskScaleReproduction:
    def test_fault_free_pairing(self, reproduction):
        _check(reproduction, "fault-free pairing")

    def test_sparsity_gain(self, reproduction):
        _check(reproduction, "sparsity gain")

    def test_sparsity_persistence_under_faults(self, reproduction):
        _check(reproduction, "sparsity persistence under faults")

    def test_sparsity_costs_fault_tolerance(self, reproduction):
        _check(reproduction, "activation sparsity costs fault tolerance")

    def test_bitflip_severity_ordering(self, reproduction):
        _check(reproduction, "bit-flip severity ordering")

    def test_sharpness_aware_benefit_standard(self, reproduction):
        _check(reproduction, "sharpness-aware benefit (standard)")

    def test_sharpness_aware_benefit_sparse(self, reproduction):
        _check(reproduction, "sharpness-aware benefit (activation-sparse)")

    def test_sharpness_aware_sparse_beats_conventional_standard(self, reproduction):
        _check(reproduction, "sharpness-aware sparse beats conventional standard")

    def test_sharpness_ordering(self, reproduction):
        _check(reproduction, "sharpness ordering")

    def test_artifacts_written(self, reproduction):
        # landscape grids exported for visual confirmation, plus summaries
        assert len(reproduction.reports) == 3 * len(reproduction.preset.rates) * 4
        assert reproduction.arms.keys() == {"std-conv", "as-conv",
                                            "std-saq", "as-saq"}
