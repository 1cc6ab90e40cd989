"""Filter-normalized 2D loss-landscape scans and a scalar sharpness probe.

Directions are standard-normal per weight tensor, rescaled so every filter
(output-channel slice of a conv kernel, output row of a linear weight)
matches the L2 norm of the model's corresponding filter; bias entries stay
zero. The scan perturbs the latent weights, quantizes, and evaluates plain
cross-entropy on one fixed batch.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Model, _run
from .tensor import Tensor
from .train import epsilon_hat

__all__ = [
    "Direction",
    "LandscapeGrid",
    "LOSS_CLAMP",
    "filter_normalized_direction",
    "scan",
    "sharpness_estimate",
]

LOSS_CLAMP = 1e6


@dataclass(frozen=True)
class Direction:
    """One random direction, aligned entry-for-entry with model.params."""

    arrays: tuple[np.ndarray, ...]
    seed: int


def filter_normalized_direction(model: Model, seed: int) -> Direction:
    """Random direction whose per-filter norms equal the model's."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    arrays: list[np.ndarray] = []
    for pi, p in enumerate(model.params):
        if pi % 2 == 1:   # bias
            arrays.append(np.zeros_like(p.data))
            continue
        d = rng.standard_normal(p.shape)
        w2 = p.data.reshape(p.shape[0], -1)
        d2 = d.reshape(p.shape[0], -1)
        wn = np.linalg.norm(w2, axis=1)
        dn = np.linalg.norm(d2, axis=1)
        factor = np.where(dn > 0, np.divide(wn, dn, out=np.ones_like(dn),
                                            where=dn > 0), 0.0)
        # zero-norm model filters force the direction filter to zero
        d2 *= factor[:, None]
        arrays.append(d)
    return Direction(arrays=tuple(arrays), seed=seed)


@dataclass(frozen=True)
class LandscapeGrid:
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray            # [len(xs), len(ys)]
    seeds: tuple[int, int]
    batch_id: str

    def __post_init__(self):
        if self.loss.shape != (len(self.xs), len(self.ys)):
            raise ValueError("loss matrix does not match coordinate grids")
        if not np.all(np.isfinite(self.loss)):
            raise ValueError("landscape grid contains non-finite entries")

    @property
    def center_loss(self) -> float:
        i = int(np.argmin(np.abs(self.xs)))
        j = int(np.argmin(np.abs(self.ys)))
        return float(self.loss[i, j])

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("," + ",".join(repr(float(y)) for y in self.ys) + "\n")
        for i, x in enumerate(self.xs):
            row = ",".join(repr(float(v)) for v in self.loss[i])
            out.write(f"{float(x)!r},{row}\n")
        return out.getvalue()

    def sidecar(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "extent": float(self.xs[-1]),
            "steps": len(self.xs),
            "batch_id": self.batch_id,
            "center_loss": self.center_loss,
        }


def _batch_loss(model: Model, x: Tensor, labels) -> float:
    with T.no_grad():
        st = _run(model, x)
        return float(T.softmax_cross_entropy(st.logits, labels).data)


def scan(model: Model, batch: tuple[Tensor, np.ndarray], extent: float,
         steps: int, seed_pair: tuple[int, int], batch_id: str = "batch",
         directions: Optional[tuple[Direction, Direction]] = None) -> LandscapeGrid:
    """Loss over [-extent, extent]^2 along two filter-normalized directions.

    ``steps`` must be odd and >= 3 so (0, 0) lands on the grid; the centre
    cell then equals the unperturbed quantized-model loss. Non-finite
    losses are clamped to LOSS_CLAMP with a warning. Explicit
    ``directions`` override the seed-derived ones.
    """
    if steps < 3 or steps % 2 == 0:
        raise ValueError(f"steps must be odd and >= 3, got {steps}")
    x_eval, labels = batch
    if directions is None:
        d1 = filter_normalized_direction(model, seed_pair[0])
        d2 = filter_normalized_direction(model, seed_pair[1])
    else:
        d1, d2 = directions
    xs = np.linspace(-extent, extent, steps)
    ys = np.linspace(-extent, extent, steps)
    replica = model.copy()
    base = [p.data.copy() for p in model.params]
    loss = np.empty((steps, steps))
    clamped = 0
    for i, cx in enumerate(xs):
        for j, cy in enumerate(ys):
            for p, b, a1, a2 in zip(replica.params, base, d1.arrays, d2.arrays):
                p.data = b + cx * a1 + cy * a2
            val = _batch_loss(replica, x_eval, labels)
            if not np.isfinite(val):
                val = LOSS_CLAMP
                clamped += 1
            loss[i, j] = val
    if clamped:
        warnings.warn(f"{clamped} landscape cells clamped to {LOSS_CLAMP:g}")
    return LandscapeGrid(xs=xs, ys=ys, loss=loss,
                         seeds=(seed_pair[0], seed_pair[1]), batch_id=batch_id)


def sharpness_estimate(model: Model, batch: tuple[Tensor, np.ndarray],
                       rho: float) -> float:
    """Loss increase under the adversarial perturbation of norm rho.

    Plain cross-entropy on the given batch (no regularization terms), so
    estimates are comparable across differently regularized models. May be
    negative in non-convex corners; reported as-is.
    """
    x, labels = batch
    pert = epsilon_hat(model, batch, rho)
    with T.no_grad():
        st = _run(model, x, weight_offsets=pert.weights,
                  bias_offsets=pert.biases)
        perturbed = float(T.softmax_cross_entropy(st.logits, labels).data)
    return perturbed - pert.loss
