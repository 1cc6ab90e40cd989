"""Experiment presets and the four-arm comparison runner.

The four arms cross {standard, activation-sparse} training with
{conventional, sharpness-aware} optimization. Sharpness-aware arms get
exactly half the epochs of the conventional arms (each of their steps
costs two passes), and the two arms of a pair differ only in the L1
activation coefficients, so comparisons are fair by construction.
"""

from __future__ import annotations

import dataclasses
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import save_checkpoint
from .data import Dataset, take
from .fault import BITFLIP, FAULT_KINDS, FaultReport, sweep, sweep_csv
from .landscape import scan, sharpness_estimate
from .nn import Model, build_lenet5
from .train import (SaqConfig, SparsityReport, TrainConfig, TrainReport,
                    activation_sparsity, evaluate, train)

__all__ = [
    "ExperimentPreset",
    "PRESETS",
    "ARMS",
    "ArmResult",
    "ReproduceResult",
    "CheckResult",
    "arm_settings",
    "select_rho",
    "run_reproduce",
    "directional_checks",
]

ARMS = ("std-conv", "as-conv", "std-saq", "as-saq")


@dataclass(frozen=True)
class ExperimentPreset:
    """Everything one four-arm run needs; all arms share the seed."""

    name: str
    train_samples: int           # 0 = whole training set
    eval_samples: int            # 0 = whole evaluation set
    epochs: int                  # conventional arms; sharpness-aware get half
    alpha: float                 # uniform per-layer L1 coefficient, AS arms
    rho: float
    rho_candidates: tuple[float, ...] = (0.01, 0.05, 0.1)
    trials: int = 20
    rates: tuple[float, ...] = (0.01, 0.02, 0.03, 0.04, 0.05)
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    bits: int = 4
    seed: int = 7
    landscape_steps: int = 51
    landscape_extent: float = 1.0
    landscape_batch: int = 1024

    def __post_init__(self):
        if self.epochs % 2 or self.epochs < 2:
            raise ValueError("epochs must be even so the half-epoch rule is exact")

    @property
    def saq_epochs(self) -> int:
        return self.epochs // 2


PRESETS = {
    # Subset mode: directional checks in well under half an hour on one core.
    "quick": ExperimentPreset(
        name="quick", train_samples=10_000, eval_samples=1_000, epochs=6,
        alpha=4e-5, rho=0.05, trials=20, landscape_steps=21,
        landscape_batch=256),
    # Full-set run; a few CPU-hours.
    "desk": ExperimentPreset(
        name="desk", train_samples=0, eval_samples=0, epochs=12,
        alpha=4e-5, rho=0.05, trials=20, landscape_steps=51,
        landscape_batch=1024),
}


def arm_settings(preset: ExperimentPreset, arm: str) -> tuple[TrainConfig, Optional[SaqConfig]]:
    """Training and sharpness configs for one arm of the comparison."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    sparse = arm.startswith("as-")
    saq = arm.endswith("-saq")
    cfg = TrainConfig(
        learning_rate=preset.learning_rate,
        momentum=preset.momentum,
        epochs=preset.saq_epochs if saq else preset.epochs,
        batch_size=preset.batch_size,
        alpha=preset.alpha if sparse else 0.0,
        weight_decay=preset.weight_decay,
        seed=preset.seed,
        bits=preset.bits,
    )
    return cfg, SaqConfig(rho=preset.rho, enabled=True) if saq else None


@dataclass
class ArmResult:
    arm: str
    model: Model
    report: TrainReport
    accuracy: float              # fault-free, evaluation set
    sparsity: SparsityReport     # fault-free, evaluation set
    sharpness: float


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class ReproduceResult:
    preset: ExperimentPreset
    arms: dict[str, ArmResult]
    reports: dict[tuple[str, str, float], FaultReport]
    checks: list[CheckResult] = field(default_factory=list)

    def report(self, arm: str, kind: str, rate: float) -> FaultReport:
        return self.reports[(arm, kind, rate)]


def select_rho(preset: ExperimentPreset, train_set: Dataset, val_set: Dataset,
               alpha: float, log: Callable[[str], None] = print) -> float:
    """Pick the perturbation radius maximizing fault-free validation accuracy."""
    best_rho, best_acc = preset.rho, -1.0
    for rho in preset.rho_candidates:
        cfg = TrainConfig(
            learning_rate=preset.learning_rate, momentum=preset.momentum,
            epochs=preset.saq_epochs, batch_size=preset.batch_size,
            alpha=alpha, weight_decay=preset.weight_decay,
            seed=preset.seed, bits=preset.bits)
        model = build_lenet5(preset.bits, seed=preset.seed)
        train(model, train_set, cfg, SaqConfig(rho=rho))
        acc = evaluate(model, val_set)
        log(f"rho={rho}: fault-free validation accuracy {acc:.4f}")
        if acc > best_acc:
            best_rho, best_acc = rho, acc
    return best_rho


def run_reproduce(preset: ExperimentPreset, train_set: Dataset,
                  eval_set: Dataset, out_dir, workers: int = 1,
                  log: Callable[[str], None] = print) -> ReproduceResult:
    """Train all four arms, run fault sweeps, landscapes, and checks.

    Writes per-arm checkpoints, training CSVs, sweep CSVs, landscape grids
    with sidecars, a summary CSV, and a checks CSV into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if preset.train_samples:
        train_set = take(train_set, preset.train_samples, seed=preset.seed)
    if preset.eval_samples:
        eval_set = take(eval_set, preset.eval_samples, seed=preset.seed)
    probe_n = min(preset.landscape_batch, len(eval_set))
    probe_set = take(eval_set, probe_n, seed=preset.seed)
    probe = (probe_set.images, probe_set.labels)
    probe_id = f"{eval_set.split}[:{probe_n}]"

    arms: dict[str, ArmResult] = {}
    reports: dict[tuple[str, str, float], FaultReport] = {}
    t0 = time.monotonic()
    for arm in ARMS:
        cfg, saq = arm_settings(preset, arm)
        log(f"[{time.monotonic() - t0:7.1f}s] training {arm} "
            f"({cfg.epochs} epochs, alpha={cfg.alpha}, saq={saq is not None})")
        model = build_lenet5(preset.bits, seed=preset.seed)
        report = train(model, train_set, cfg, saq, val=eval_set)
        acc = evaluate(model, eval_set)
        sp = activation_sparsity(model, eval_set)
        sharp = sharpness_estimate(model, probe, preset.rho)
        arms[arm] = ArmResult(arm=arm, model=model, report=report,
                              accuracy=acc, sparsity=sp, sharpness=sharp)
        save_checkpoint(out / f"{arm}.ckpt.json", model,
                        train_config=_cfg_dict(cfg),
                        saq_config=None if saq is None else
                        {"rho": saq.rho, "enabled": saq.enabled},
                        seed_provenance={"preset": preset.name, "seed": preset.seed})
        (out / f"{arm}.train.csv").write_text(report.to_csv())
        log(f"[{time.monotonic() - t0:7.1f}s] {arm}: acc={acc:.4f} "
            f"sparsity={sp.overall:.4f} sharpness={sharp:.5f}")

        arm_reports = sweep(model, eval_set, FAULT_KINDS, preset.rates,
                            preset.trials, preset.seed, workers=workers)
        (out / f"{arm}.sweep.csv").write_text(sweep_csv(arm_reports))
        for r in arm_reports:
            reports[(arm, r.kind, r.rate)] = r
        log(f"[{time.monotonic() - t0:7.1f}s] {arm}: fault sweep done")

        grid = scan(model, probe, preset.landscape_extent,
                    preset.landscape_steps,
                    (preset.seed + 1, preset.seed + 2), batch_id=probe_id)
        (out / f"{arm}.landscape.csv").write_text(grid.to_csv())
        (out / f"{arm}.landscape.json").write_text(json.dumps(grid.sidecar(), indent=1))
        log(f"[{time.monotonic() - t0:7.1f}s] {arm}: landscape done")

    result = ReproduceResult(preset=preset, arms=arms, reports=reports)
    result.checks = directional_checks(result)
    (out / "summary.csv").write_text(_summary_csv(result))
    (out / "checks.csv").write_text(_checks_csv(result.checks))
    for c in result.checks:
        log(c.line())
    return result


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    if not isinstance(d["alpha"], (int, float)):
        d["alpha"] = list(d["alpha"])
    return d


def _summary_csv(res: ReproduceResult) -> str:
    max_rate = max(res.preset.rates)
    out = io.StringIO()
    out.write("arm,fault_free_acc,sparsity,sharpness,mean_acc_bitflip_maxrate\n")
    for arm in ARMS:
        a = res.arms[arm]
        bf = res.report(arm, BITFLIP, max_rate)
        out.write(f"{arm},{a.accuracy!r},{a.sparsity.overall!r},"
                  f"{a.sharpness!r},{bf.mean_acc!r}\n")
    gap_sp = res.arms["as-conv"].sparsity.overall - res.arms["std-conv"].sparsity.overall
    gap_acc = res.arms["as-conv"].accuracy - res.arms["std-conv"].accuracy
    out.write(f"as-minus-std,{gap_acc!r},{gap_sp!r},,\n")
    return out.getvalue()


def _checks_csv(checks: list[CheckResult]) -> str:
    out = io.StringIO()
    out.write("check,passed,detail\n")
    for c in checks:
        detail = c.detail.replace(",", ";")
        out.write(f"{c.name},{c.passed},{detail}\n")
    return out.getvalue()


def directional_checks(res: ReproduceResult) -> list[CheckResult]:
    """The qualitative claims the four-arm comparison is expected to show."""
    acc0 = {arm: res.arms[arm].accuracy for arm in ARMS}
    sp0 = {arm: res.arms[arm].sparsity.overall for arm in ARMS}
    sharp = {arm: res.arms[arm].sharpness for arm in ARMS}
    rates = res.preset.rates
    max_rate = max(rates)
    checks: list[CheckResult] = []

    gap = abs(acc0["std-conv"] - acc0["as-conv"])
    checks.append(CheckResult(
        "fault-free pairing", gap <= 0.005,
        f"|acc(std-conv) - acc(as-conv)| = {gap:.4f} (limit 0.005)"))

    gain = sp0["as-conv"] - sp0["std-conv"]
    checks.append(CheckResult(
        "sparsity gain", gain >= 0.25 and sp0["as-conv"] >= 0.70,
        f"std {sp0['std-conv']:.3f} -> as {sp0['as-conv']:.3f} "
        f"(gain {gain:.3f}, need >= 0.25 and as >= 0.70)"))

    sp_faulted = res.report("as-conv", BITFLIP, max_rate).mean_sparsity
    drift = abs(sp_faulted - sp0["as-conv"])
    checks.append(CheckResult(
        "sparsity persistence under faults", drift <= 0.06,
        f"as-conv sparsity {sp0['as-conv']:.3f} -> {sp_faulted:.3f} at "
        f"{max_rate:.0%} bit-flip (drift {drift:.3f}, limit 0.06)"))

    r_as = res.report("as-conv", BITFLIP, max_rate)
    r_std = res.report("std-conv", BITFLIP, max_rate)
    pooled = float(np.sqrt((r_as.std_acc ** 2 + r_std.std_acc ** 2) / 2.0))
    diff = r_std.mean_acc - r_as.mean_acc
    checks.append(CheckResult(
        "activation sparsity costs fault tolerance", diff >= pooled,
        f"mean acc at {max_rate:.0%} bit-flip: std {r_std.mean_acc:.4f} vs "
        f"as {r_as.mean_acc:.4f} (gap {diff:.4f} >= pooled std {pooled:.4f})"))

    worst = None
    ok = True
    for arm in ("std-conv", "as-conv"):
        for rate in rates:
            deg_bf = acc0[arm] - res.report(arm, BITFLIP, rate).mean_acc
            for kind in ("sa0", "sa1"):
                deg_sa = acc0[arm] - res.report(arm, kind, rate).mean_acc
                margin = deg_bf - deg_sa
                if worst is None or margin < worst[0]:
                    worst = (margin, arm, kind, rate)
                ok &= margin >= 0.0
    checks.append(CheckResult(
        "bit-flip severity ordering", ok,
        f"min(deg_bitflip - deg_stuckat) = {worst[0]:.4f} at "
        f"{worst[1]}/{worst[2]}/rate {worst[3]:.0%} (need >= 0)"))

    for pair, label in ((("std-saq", "std-conv"), "standard"),
                        (("as-saq", "as-conv"), "activation-sparse")):
        saq_arm, conv_arm = pair
        ok = acc0[saq_arm] >= acc0[conv_arm] - 0.005
        worst_m, worst_r = None, None
        for kind in FAULT_KINDS:
            for rate in rates:
                m = (res.report(saq_arm, kind, rate).mean_acc
                     - res.report(conv_arm, kind, rate).mean_acc)
                if worst_m is None or m < worst_m:
                    worst_m, worst_r = m, (kind, rate)
                ok &= m >= 0.0
        checks.append(CheckResult(
            f"sharpness-aware benefit ({label})", ok,
            f"fault-free {acc0[saq_arm]:.4f} vs {acc0[conv_arm]:.4f}; min "
            f"faulty-mean margin {worst_m:.4f} at {worst_r[0]}/rate "
            f"{worst_r[1]:.0%} (need >= 0)"))

    r_x = res.report("as-saq", BITFLIP, max_rate)
    checks.append(CheckResult(
        "sharpness-aware sparse beats conventional standard",
        r_x.mean_acc >= r_std.mean_acc,
        f"at {max_rate:.0%} bit-flip: as-saq {r_x.mean_acc:.4f} vs "
        f"std-conv {r_std.mean_acc:.4f}"))

    ok = (sharp["as-conv"] > sharp["std-conv"]
          and sharp["std-saq"] < sharp["std-conv"]
          and sharp["as-saq"] < sharp["as-conv"])
    checks.append(CheckResult(
        "sharpness ordering", ok,
        "sharpness " + " ".join(f"{a}={sharp[a]:.5f}" for a in ARMS)))
    return checks
