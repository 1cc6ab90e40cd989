"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: each operation attaches a record (inputs plus
a backward rule) to its output tensor, and ``backward`` materialises the
tape for one scalar output and replays it in reverse. Everything is 64-bit
and CPU-only; the design goal is gradient-check fidelity on small
convolutional and fully connected networks, not speed.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeEntry",
    "ShapeError",
    "no_grad",
    "add",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "softmax_cross_entropy",
    "l1_norm",
    "l2_norm_sq",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables recording (inference mode)."""

    def __enter__(self) -> "no_grad":
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc) -> bool:
        _state.grad_enabled = self._prev
        return False


# A backward rule maps the output adjoint to one adjoint per input
# (None for inputs that do not need a gradient).
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(frozen=True)
class TapeEntry:
    """One recorded operation: input/output identities plus backward rule."""

    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward_rule: BackwardRule


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_entry")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._entry: Optional[TapeEntry] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the value with no recorded history."""
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return _sum(self)

    def __add__(self, other) -> "Tensor":
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, c) -> "Tensor":
        return scale(self, float(c))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Topologically ordered list of the operations behind one tensor.

    Rebuilt on demand from the records hanging off the tensors (the
    engine is define-by-run, so each forward pass produces a fresh graph).
    Every entry's inputs are produced by earlier entries or are leaves.
    """

    def __init__(self, entries: list[TapeEntry]):
        self.entries = entries

    @staticmethod
    def trace(output: "Tensor") -> "Tape":
        entries: list[TapeEntry] = []
        visited: set[int] = set()
        # Iterative post-order DFS; recorded inputs come out before users.
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            entry = node._entry
            if entry is None or id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                entries.append(entry)
            else:
                stack.append((node, True))
                for parent in entry.inputs:
                    if parent._entry is not None and id(parent) not in visited:
                        stack.append((parent, False))
        return Tape(entries)

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    ``loss`` must be a scalar. Repeated calls without ``zero_grad``
    accumulate. The walk is deterministic: identical tape and inputs give
    bitwise-identical gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape.entries):
        out_adj = adjoints.get(id(entry.output))
        if out_adj is None:
            continue
        for parent, g in zip(entry.inputs, entry.backward_rule(out_adj)):
            if g is None:
                continue
            pid = id(parent)
            if pid in adjoints:
                adjoints[pid] = adjoints[pid] + g
            else:
                adjoints[pid] = g
                tensors[pid] = parent
    for tid, t in tensors.items():
        if t.requires_grad:
            t.grad = adjoints[tid] if t.grad is None else t.grad + adjoints[tid]


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            rule: BackwardRule) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._entry = TapeEntry(op, inputs, out, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e

    def rule(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, rule)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)

    def rule(g: np.ndarray):
        return (g * c,)

    return _record("scale", (x,), x.data * c, rule)


def _sum(x: Tensor) -> Tensor:
    def rule(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), np.asarray(x.data.sum()), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m,k] by b [k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def rule(g: np.ndarray):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), out, rule)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.shape}")

    def rule(g: np.ndarray):
        return (g.T.copy(),)

    return _record("transpose", (x,), x.data.T.copy(), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def rule(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), out, rule)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient is zero at and below zero."""
    mask = x.data > 0.0

    def rule(g: np.ndarray):
        return (g * mask,)

    return _record("relu", (x,), np.where(mask, x.data, 0.0), rule)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                  j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols: np.ndarray, xp_shape: tuple[int, ...], kh: int, kw: int,
            stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp_shape[:2]
    gxp = np.zeros(xp_shape, dtype=np.float64)
    gc = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gc[:, :, i, j]
    return gxp


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with kernels k [F,C,kh,kw].

    Zero padding; output spatial extent floor((H + 2*padding - kh)/stride) + 1.
    """
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D operands, got {x.shape} and {k.shape}")
    n, c, h, w = x.shape
    f, c2, kh, kw = k.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)          # (N, C*kh*kw, OH*OW)
    kmat = k.data.reshape(f, c * kh * kw)
    out = np.matmul(kmat, cols).reshape(n, f, oh, ow)

    def rule(g: np.ndarray):
        gm = g.reshape(n, f, oh * ow)
        gk = gx = None
        if k.requires_grad:
            gk = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(k.shape)
        if x.requires_grad:
            gcols = np.matmul(kmat.T, gm)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, oh, ow)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _record("conv2d", (x, k), out, rule)


def _pool_windows(x: Tensor, size: int):
    """Crop H,W down to multiples of ``size`` and expose pooling windows."""
    if x.data.ndim != 4:
        raise ShapeError(f"pooling expects a 4-D tensor, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh == 0 or ow == 0:
        raise ShapeError(f"pool window {size} larger than input {h}x{w}")
    xc = x.data[:, :, :oh * size, :ow * size]
    win = (xc.reshape(n, c, oh, size, ow, size)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(n, c, oh, ow, size * size))
    return win, (n, c, h, w, oh, ow)


def maxpool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first max."""
    win, (n, c, h, w, oh, ow) = _pool_windows(x, size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g: np.ndarray):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w), dtype=np.float64)
        gx[:, :, :oh * size, :ow * size] = (
            gwin.reshape(n, c, oh, ow, size, size)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, oh * size, ow * size))
        return (gx,)

    return _record("maxpool2d", (x,), out, rule)


def avgpool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping average pooling."""
    win, (n, c, h, w, oh, ow) = _pool_windows(x, size)
    out = win.mean(axis=-1)

    def rule(g: np.ndarray):
        gwin = np.repeat(g[..., None], size * size, axis=-1) / (size * size)
        gx = np.zeros((n, c, h, w), dtype=np.float64)
        gx[:, :, :oh * size, :ow * size] = (
            gwin.reshape(n, c, oh, ow, size, size)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, oh * size, ow * size))
        return (gx,)

    return _record("avgpool2d", (x,), out, rule)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of logits [N,K] against integer labels [N].

    Uses max-subtraction for stability. Raises ValueError when a label
    falls outside [0, K).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"labels shape {y.shape} does not match logits {logits.shape}")
    n, k = logits.shape
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label index out of range [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(se[:, 0])
    loss = np.asarray((lse - z[np.arange(n), y]).mean())

    def rule(g: np.ndarray):
        p = e / se
        p[np.arange(n), y] -= 1.0
        return (g * p / n,)

    return _record("softmax_cross_entropy", (logits,), loss, rule)


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute values; subgradient at 0 defined as 0."""

    def rule(g: np.ndarray):
        return (g * np.sign(x.data),)

    return _record("l1_norm", (x,), np.asarray(np.abs(x.data).sum()), rule)


def l2_norm_sq(x: Tensor) -> Tensor:
    """Sum of squares."""

    def rule(g: np.ndarray):
        return (g * 2.0 * x.data,)

    return _record("l2_norm_sq", (x,), np.asarray((x.data ** 2).sum()), rule)
