"""Bit-cell fault models and the Monte Carlo accuracy-degradation harness.

Faults hit the stored weight bits of quantized layers only (biases are
left untouched). Each trial draws an exact number of distinct bit cells
uniformly at random, applies bit-flip or stuck-at corruption to a copy of
the weight codes, and evaluates the corrupted model; the master model is
never mutated. Trial seeds are derived up front, so serial and parallel
execution produce identical reports.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import io
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .nn import Model
from .quant import QuantizedStore, _code_to_raw, _raw_to_code, dequantize, quantize
from .train import SparsityReport, _eval_stats

__all__ = [
    "BITFLIP",
    "SA0",
    "SA1",
    "FAULT_KINDS",
    "FaultSpec",
    "FaultSite",
    "TrialResult",
    "FaultReport",
    "weight_stores",
    "sample_fault_sites",
    "apply_faults",
    "monte_carlo_eval",
    "sweep",
    "sweep_csv",
]

BITFLIP = "bitflip"
SA0 = "sa0"
SA1 = "sa1"
FAULT_KINDS = (BITFLIP, SA0, SA1)


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    rate: float
    trials: int = 20
    base_seed: int = 0

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"fault rate must lie in [0, 1], got {self.rate}")
        if self.trials < 1:
            raise ValueError("trials must be positive")


@dataclass(frozen=True, order=True)
class FaultSite:
    tensor_index: int
    element_index: int
    bit_position: int


@dataclass(frozen=True)
class TrialResult:
    trial: int
    accuracy: float
    sparsity: float


@dataclass(frozen=True)
class FaultReport:
    kind: str
    rate: float
    trials: tuple[TrialResult, ...]
    mean_acc: float
    std_acc: float
    min_acc: float
    max_acc: float
    mean_sparsity: float

    @classmethod
    def from_trials(cls, kind: str, rate: float,
                    trials: Sequence[TrialResult]) -> "FaultReport":
        accs = np.array([t.accuracy for t in trials])
        sps = np.array([t.sparsity for t in trials])
        std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
        return cls(kind=kind, rate=rate, trials=tuple(trials),
                   mean_acc=float(accs.mean()), std_acc=std,
                   min_acc=float(accs.min()), max_acc=float(accs.max()),
                   mean_sparsity=float(sps.mean()))


def weight_stores(model: Model) -> list[QuantizedStore]:
    """Quantized codes of every quantized conv/linear weight, layer order."""
    stores = []
    for j, i in enumerate(model.param_layer_indices()):
        if model.descriptors[i].quantized:
            spec = model.weight_specs[j]
            if spec is None:
                raise ValueError("model has uncalibrated weight specs")
            stores.append(quantize(model.params[2 * j].data, spec))
    return stores


def sample_fault_sites(stores: Sequence[QuantizedStore], rate: float,
                       seed) -> list[FaultSite]:
    """Uniform sample of round(rate * total_bits) distinct bit cells.

    ``seed`` may be an int or a numpy SeedSequence. Sites come back sorted
    for a canonical order.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"fault rate must lie in [0, 1], got {rate}")
    sizes = [s.bit_count for s in stores]
    total = int(sum(sizes))
    count = int(rate * total + 0.5)   # round half up; rate is non-negative
    if count == 0:
        return []
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=count, replace=False))
    bounds = np.cumsum([0] + sizes)
    sites = []
    for f in flat:
        t = int(np.searchsorted(bounds, f, side="right")) - 1
        offset = int(f - bounds[t])
        bits = stores[t].spec.bits
        sites.append(FaultSite(tensor_index=t, element_index=offset // bits,
                               bit_position=offset % bits))
    return sites


def apply_faults(stores: Sequence[QuantizedStore], sites: Sequence[FaultSite],
                 kind: str) -> list[QuantizedStore]:
    """Corrupt the addressed bits; returns new stores, originals untouched.

    Bit-flip toggles the bit, sa0 clears it, sa1 sets it. Codes are
    re-decoded from the modified two's-complement patterns.
    """
    if kind not in FAULT_KINDS:
        raise ValueError(f"unknown fault kind {kind!r}")
    raws = [_code_to_raw(s.codes, s.spec).copy() for s in stores]
    for t in range(len(stores)):
        idx = np.array([s.element_index for s in sites if s.tensor_index == t],
                       dtype=np.int64)
        if idx.size == 0:
            continue
        bitpos = np.array([s.bit_position for s in sites if s.tensor_index == t],
                          dtype=np.int64)
        bits = stores[t].spec.bits
        if idx.min() < 0 or idx.max() >= raws[t].size:
            raise IndexError("fault site element index out of range")
        if bitpos.min() < 0 or bitpos.max() >= bits:
            raise IndexError("fault site bit position out of range")
        mask = np.int64(1) << bitpos
        if kind == BITFLIP:
            np.bitwise_xor.at(raws[t], idx, mask)
        elif kind == SA0:
            np.bitwise_and.at(raws[t], idx, ~mask)
        else:
            np.bitwise_or.at(raws[t], idx, mask)
    return [QuantizedStore(codes=_raw_to_code(raw, s.spec), spec=s.spec,
                           shape=s.shape)
            for raw, s in zip(raws, stores)]


def _faulted_model(model: Model, stores: Sequence[QuantizedStore],
                   sites: Sequence[FaultSite], kind: str) -> Model:
    faulted = apply_faults(stores, sites, kind)
    replica = model.copy()
    k = 0
    for j, i in enumerate(replica.param_layer_indices()):
        if replica.descriptors[i].quantized:
            w = replica.params[2 * j]
            w.data = dequantize(faulted[k]).data.reshape(w.shape)
            k += 1
    return replica


def monte_carlo_eval(model: Model, dataset: Dataset, spec: FaultSpec,
                     workers: int = 1, batch_size: int = 256) -> FaultReport:
    """Repeated fault injection trials; aggregates accuracy and sparsity.

    Trial t draws its sites from a seed derived from (base_seed, t), so the
    report is identical however trials are scheduled.
    """
    stores = weight_stores(model)
    seeds = np.random.SeedSequence(spec.base_seed).spawn(spec.trials)

    def run_trial(t: int) -> TrialResult:
        sites = sample_fault_sites(stores, spec.rate, seeds[t])
        replica = _faulted_model(model, stores, sites, spec.kind)
        acc, sp = _eval_stats(replica, dataset, batch_size, want_sparsity=True)
        return TrialResult(trial=t, accuracy=acc, sparsity=sp.overall)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(run_trial, range(spec.trials)))
    else:
        trials = [run_trial(t) for t in range(spec.trials)]
    return FaultReport.from_trials(spec.kind, spec.rate, trials)


def sweep(model: Model, dataset: Dataset, kinds: Sequence[str],
          rates: Sequence[float], trials: int, base_seed: int,
          workers: int = 1, batch_size: int = 256) -> list[FaultReport]:
    """Cross-product of kinds and rates, one report per combination."""
    reports = []
    for ki, kind in enumerate(kinds):
        for ri, rate in enumerate(rates):
            seed = int(np.random.SeedSequence(
                (base_seed, ki, ri)).generate_state(1)[0])
            spec = FaultSpec(kind=kind, rate=rate, trials=trials, base_seed=seed)
            reports.append(monte_carlo_eval(model, dataset, spec,
                                            workers=workers, batch_size=batch_size))
    return reports


def sweep_csv(reports: Sequence[FaultReport]) -> str:
    out = io.StringIO()
    out.write("kind,rate,trials,mean_acc,std_acc,min_acc,max_acc,mean_sparsity\n")
    for r in reports:
        out.write(f"{r.kind},{r.rate!r},{len(r.trials)},{r.mean_acc!r},"
                  f"{r.std_acc!r},{r.min_acc!r},{r.max_acc!r},{r.mean_sparsity!r}\n")
    return out.getvalue()
