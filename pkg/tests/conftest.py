"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's own kernels: matrix
products and convolutions are naive loops, gradients come from central
finite differences, and cross-entropy is evaluated in extended precision.
"""

import numpy as np
import pytest

from qfault.tensor import Tensor


def fd_gradient(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. ``arr``.

    ``arr`` is mutated in place around each coordinate and restored.
    """
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rtol: float = 1e-4, atol: float = 1e-7) -> None:
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def naive_conv2d(x: np.ndarray, k: np.ndarray, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (xp[ni, ci, oi * stride + ki, oj * stride + kj]
                                        * k[fi, ci, ki, kj])
                    out[ni, fi, oi, oj] = acc
    return out


def longdouble_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Direct -log(softmax) in extended precision."""
    z = logits.astype(np.longdouble)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    picked = p[np.arange(len(labels)), labels]
    return float(-np.log(picked).mean())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, shape, requires_grad=True, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad)
