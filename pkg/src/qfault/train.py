"""Training loops: quantization-aware SGD, L1 activation regularization,
the two-pass sharpness-aware step, and evaluation metrics.

The sharpness-aware step computes an adversarial perturbation of the
quantized weights from one forward/backward pass, re-evaluates the loss at
the perturbed point, and updates the latent weights with that second
gradient; one such step therefore costs exactly two forward and two
backward passes.
"""

from __future__ import annotations

import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, batches, take
from .nn import Model, _run
from .quant import calibrate
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "SaqConfig",
    "ConfigError",
    "DivergenceError",
    "Perturbation",
    "SgdState",
    "EpochStats",
    "TrainReport",
    "SparsityReport",
    "regularized_loss",
    "epsilon_hat",
    "saq_step",
    "sgd_step",
    "train",
    "evaluate",
    "activation_sparsity",
]


class ConfigError(ValueError):
    """Inconsistent training configuration."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 1
    batch_size: int = 64
    alpha: tuple[float, ...] | float = 0.0   # per-relu L1 coefficients
    weight_decay: float = 5e-4               # L2 coefficient on latent params
    seed: int = 0
    bits: int = 4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def resolve_alpha(self, n_relu: int) -> tuple[float, ...]:
        """Broadcast a scalar alpha, or validate a per-layer sequence."""
        if isinstance(self.alpha, (int, float)):
            return (float(self.alpha),) * n_relu
        alpha = tuple(float(a) for a in self.alpha)
        if len(alpha) != n_relu:
            raise ConfigError(
                f"alpha has {len(alpha)} entries, model has {n_relu} relu layers")
        if any(a < 0 for a in alpha):
            raise ConfigError("alpha entries must be non-negative")
        return alpha


@dataclass(frozen=True)
class SaqConfig:
    rho: float = 0.05
    enabled: bool = True

    def __post_init__(self):
        # rho == 0 is allowed and makes the step collapse to plain SGD.
        if self.enabled and self.rho < 0:
            raise ConfigError("rho must be non-negative")


@dataclass
class Perturbation:
    """Adversarial offsets per parameter layer, plus pass-1 diagnostics."""

    weights: list[Optional[np.ndarray]]
    biases: list[Optional[np.ndarray]]
    grad_norm: float
    loss: float
    logits: np.ndarray


@dataclass
class SgdState:
    velocity: list[np.ndarray]

    @classmethod
    def for_model(cls, model: Model) -> "SgdState":
        return cls(velocity=[np.zeros_like(p.data) for p in model.params])


@dataclass
class SparsityReport:
    overall: float
    per_layer: list[float]


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    val_acc: Optional[float]
    sparsity: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("epoch,loss,train_acc,val_acc,sparsity\n")
        for e in self.epochs:
            val = "" if e.val_acc is None else repr(e.val_acc)
            out.write(f"{e.epoch},{e.loss!r},{e.train_acc!r},{val},{e.sparsity!r}\n")
        return out.getvalue()

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]


def regularized_loss(logits: Tensor, labels, activations: Sequence[Tensor],
                     alpha: Sequence[float]) -> Tensor:
    """Mean cross-entropy plus per-layer L1 activation penalties.

    The L1 sum is divided by the batch size so the coefficients transfer
    across batch sizes.
    """
    if len(activations) != len(alpha):
        raise ConfigError(
            f"{len(alpha)} alpha entries for {len(activations)} activation tensors")
    loss = T.softmax_cross_entropy(logits, labels)
    n = logits.shape[0]
    for a, act in zip(alpha, activations):
        if a != 0.0:
            loss = T.add(loss, T.scale(T.l1_norm(act), a / n))
    return loss


def _training_loss(model: Model, x: Tensor, labels, alpha) -> tuple[Tensor, "object"]:
    state = _run(model, x, capture_activations=True)
    return regularized_loss(state.logits, labels, state.activations, alpha), state


def epsilon_hat(model: Model, batch: tuple[Tensor, np.ndarray], rho: float,
                alpha: Optional[Sequence[float]] = None) -> Perturbation:
    """Adversarial weight perturbation of norm rho.

    One forward/backward pass evaluates the batch loss at the quantized
    weights; the returned offsets are rho * g / ||g||_2 with the L2 norm
    taken jointly over all parameters (quantized weights and biases). A
    zero gradient yields a zero perturbation. Model gradients are cleared
    on exit; the perturbation is returned, never applied.
    """
    x, labels = batch
    if alpha is None:
        alpha = (0.0,) * model.relu_count()
    model.zero_grad()
    loss, state = _training_loss(model, x, labels, alpha)
    T.backward(loss)
    n_layers = len(state.qweights)
    wgrads: list[Optional[np.ndarray]] = []
    bgrads: list[Optional[np.ndarray]] = []
    sq = 0.0
    for j in range(n_layers):
        wg = state.qweights[j].grad
        bg = model.params[2 * j + 1].grad
        wgrads.append(wg)
        bgrads.append(bg)
        if wg is not None:
            sq += float((wg ** 2).sum())
        if bg is not None:
            sq += float((bg ** 2).sum())
    norm = math.sqrt(sq)
    if norm == 0.0 or rho == 0.0:
        weights: list[Optional[np.ndarray]] = [None] * n_layers
        biases: list[Optional[np.ndarray]] = [None] * n_layers
    else:
        s = rho / norm
        weights = [None if g is None else s * g for g in wgrads]
        biases = [None if g is None else s * g for g in bgrads]
    model.zero_grad()
    return Perturbation(weights=weights, biases=biases, grad_norm=norm,
                        loss=float(loss.data), logits=state.logits.data)


def _apply_update(model: Model, cfg: TrainConfig, state: SgdState) -> None:
    for p, v in zip(model.params, state.velocity):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        v *= cfg.momentum
        v += g
        p.data -= cfg.learning_rate * v


def sgd_step(model: Model, batch: tuple[Tensor, np.ndarray], cfg: TrainConfig,
             state: Optional[SgdState] = None) -> tuple[float, np.ndarray]:
    """One plain quantization-aware SGD step; returns (loss, logits)."""
    if state is None:
        state = SgdState.for_model(model)
    x, labels = batch
    alpha = cfg.resolve_alpha(model.relu_count())
    model.zero_grad()
    loss, st = _training_loss(model, x, labels, alpha)
    T.backward(loss)
    _apply_update(model, cfg, state)
    return float(loss.data), st.logits.data


def saq_step(model: Model, batch: tuple[Tensor, np.ndarray], cfg: TrainConfig,
             saq: SaqConfig, state: Optional[SgdState] = None) -> tuple[float, np.ndarray]:
    """One sharpness-aware step: perturb, re-evaluate, update.

    Exactly two forward and two backward passes. The update uses the
    gradient at the perturbed point plus weight decay on the latent
    parameters; the perturbation itself is discarded afterwards.
    Returns the unperturbed (pass-1) loss and logits for statistics.
    """
    if state is None:
        state = SgdState.for_model(model)
    x, labels = batch
    alpha = cfg.resolve_alpha(model.relu_count())
    pert = epsilon_hat(model, batch, saq.rho, alpha)
    st2 = _run(model, x, capture_activations=True,
               weight_offsets=pert.weights, bias_offsets=pert.biases)
    loss2 = regularized_loss(st2.logits, labels, st2.activations, alpha)
    T.backward(loss2)
    _apply_update(model, cfg, state)
    return pert.loss, pert.logits


def _calibrate_weight_specs(model: Model) -> None:
    j = 0
    for i in model.param_layer_indices():
        if model.descriptors[i].quantized:
            model.weight_specs[j] = calibrate(model.params[2 * j].data,
                                              model.bits, signed=True)
        j += 1


def _calibrate_act_specs(model: Model, batch_iter, n_batches: int = 10) -> None:
    """Observe raw post-relu maxima and freeze unsigned specs from them."""
    n_relu = model.relu_count()
    peaks = np.zeros(n_relu)
    with T.no_grad():
        for x, _ in itertools.islice(batch_iter, n_batches):
            st = _run(model, x, capture_activations=True, act_quant=False)
            for i, act in enumerate(st.activations):
                peaks[i] = max(peaks[i], float(act.data.max()))
    model.act_specs = [calibrate(np.array([p]), model.bits, signed=False)
                       for p in peaks]


def _eval_stats(model: Model, dataset: Dataset, batch_size: int = 256,
                want_sparsity: bool = False):
    """Single evaluation pass; optionally counts exact zeros per relu layer."""
    correct = 0
    zeros = np.zeros(model.relu_count(), dtype=np.int64)
    totals = np.zeros(model.relu_count(), dtype=np.int64)
    with T.no_grad():
        for x, y in batches(dataset, batch_size):
            st = _run(model, x, capture_activations=want_sparsity)
            pred = np.argmax(st.logits.data, axis=1)
            correct += int((pred == y).sum())
            if want_sparsity:
                for i, act in enumerate(st.activations):
                    zeros[i] += int((act.data == 0.0).sum())
                    totals[i] += act.data.size
    acc = correct / len(dataset)
    if not want_sparsity:
        return acc, None
    per_layer = [z / t if t else 0.0 for z, t in zip(zeros, totals)]
    overall = float(zeros.sum() / totals.sum()) if totals.sum() else 0.0
    return acc, SparsityReport(overall=overall, per_layer=per_layer)


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    acc, _ = _eval_stats(model, dataset, batch_size)
    return acc


def activation_sparsity(model: Model, dataset: Dataset,
                        batch_size: int = 256) -> SparsityReport:
    """Fraction of exactly-zero entries among captured post-relu activations.

    ``overall`` pools every element across layers and inputs; the
    per-layer list supports an unweighted layer mean if preferred.
    """
    _, rep = _eval_stats(model, dataset, batch_size, want_sparsity=True)
    return rep


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          saq: Optional[SaqConfig] = None, val: Optional[Dataset] = None,
          sparsity_samples: int = 2000) -> TrainReport:
    """Train in place; deterministic in cfg.seed.

    Each epoch recalibrates the weight quantization grid from the latent
    weights, freezes activation grids from a 10-batch calibration pass,
    then steps over a seeded shuffle of the data. Weight specs are
    recalibrated once more after the final epoch so the stored codes match
    the final weights.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    alpha = cfg.resolve_alpha(model.relu_count())
    use_saq = saq is not None and saq.enabled
    state = SgdState.for_model(model)
    sparsity_set = val if val is not None else take(
        dataset, min(sparsity_samples, len(dataset)), seed=cfg.seed)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        shuffle_seed = int(np.random.SeedSequence((cfg.seed, epoch)).generate_state(1)[0])
        _calibrate_weight_specs(model)
        _calibrate_act_specs(model, batches(dataset, cfg.batch_size, shuffle_seed))
        loss_sum = 0.0
        seen = 0
        correct = 0
        for bi, (x, y) in enumerate(batches(dataset, cfg.batch_size, shuffle_seed)):
            if use_saq:
                loss, logits = saq_step(model, (x, y), cfg, saq, state)
            else:
                loss, logits = sgd_step(model, (x, y), cfg, state)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {bi}")
            loss_sum += loss * len(y)
            seen += len(y)
            correct += int((np.argmax(logits, axis=1) == y).sum())
        _calibrate_weight_specs(model)   # deployment grid for this epoch's weights
        val_acc = evaluate(model, val, cfg.batch_size) if val is not None else None
        sp = activation_sparsity(model, sparsity_set, cfg.batch_size)
        report.epochs.append(EpochStats(
            epoch=epoch, loss=loss_sum / seen, train_acc=correct / seen,
            val_acc=val_acc, sparsity=sp.overall))
    return report
