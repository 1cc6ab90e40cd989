"""Uniform per-tensor quantization and the bit-level codec faults act on.

Weights use symmetric signed quantization (zero_point 0), activations use
unsigned affine with zero_point 0 (post-relu values are non-negative).
Stored codes encode to two's complement for signed specs and plain binary
for unsigned ones; bit 0 is the LSB.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _record

__all__ = [
    "QuantSpec",
    "QuantizedStore",
    "EncodingError",
    "calibrate",
    "quantize",
    "dequantize",
    "fake_quant_ste",
    "encode_bits",
    "decode_bits",
]


class EncodingError(ValueError):
    """Code outside the representable range of a spec."""


@dataclass(frozen=True)
class QuantSpec:
    """Per-tensor uniform quantization parameters.

    Signed specs are symmetric: qmin = -2^(bits-1), qmax = 2^(bits-1) - 1,
    zero_point = 0. Unsigned specs span [0, 2^bits - 1].
    """

    bits: int
    scale: float
    zero_point: int
    signed: bool
    qmin: int
    qmax: int

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must lie in [2, 8], got {self.bits}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.signed:
            if (self.qmin, self.qmax) != (-(1 << (self.bits - 1)),
                                          (1 << (self.bits - 1)) - 1):
                raise ValueError("signed spec must span the two's-complement range")
            if self.zero_point != 0:
                raise ValueError("signed spec requires zero_point 0")
        else:
            if (self.qmin, self.qmax) != (0, (1 << self.bits) - 1):
                raise ValueError("unsigned spec must span [0, 2^bits - 1]")
            if not self.qmin <= self.zero_point <= self.qmax:
                raise ValueError("zero_point outside [qmin, qmax]")

    @property
    def range_lo(self) -> float:
        """Smallest representable real value."""
        return self.scale * (self.qmin - self.zero_point)

    @property
    def range_hi(self) -> float:
        """Largest representable real value."""
        return self.scale * (self.qmax - self.zero_point)


@dataclass(frozen=True)
class QuantizedStore:
    """Integer codes for one tensor plus the spec that produced them."""

    codes: np.ndarray
    spec: QuantSpec
    shape: tuple[int, ...]

    def __post_init__(self):
        # Flat row-major copy; element_index in fault sites addresses it.
        codes = np.array(self.codes, dtype=np.int64).reshape(-1)
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "shape", tuple(self.shape))
        if codes.size != int(np.prod(self.shape)):
            raise ValueError("codes length does not match shape")
        if codes.size and (codes.min() < self.spec.qmin or codes.max() > self.spec.qmax):
            raise EncodingError("codes outside [qmin, qmax]")

    @property
    def bit_count(self) -> int:
        return self.codes.size * self.spec.bits


def calibrate(x, bits: int, signed: bool) -> QuantSpec:
    """Derive a per-tensor spec from observed values.

    Signed (weights): symmetric, scale = max|x| / qmax. Unsigned
    (post-relu activations): affine with zero_point 0, scale = max(x) / qmax.
    An all-zero tensor gets the sentinel scale 1.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    if signed:
        qmin, qmax = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
        peak = float(np.abs(data).max())
    else:
        qmin, qmax = 0, (1 << bits) - 1
        peak = float(max(data.max(), 0.0))
    scale = peak / qmax if peak > 0 else 1.0
    return QuantSpec(bits=bits, scale=scale, zero_point=0, signed=signed,
                     qmin=qmin, qmax=qmax)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round is round-half-to-even; the codec wants half away from zero.
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(w, spec: QuantSpec) -> QuantizedStore:
    """clamp(round(w / scale) + zero_point, qmin, qmax), half away from zero."""
    data = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    codes = _round_half_away(data / spec.scale) + spec.zero_point
    codes = np.clip(codes, spec.qmin, spec.qmax).astype(np.int64)
    return QuantizedStore(codes=codes, spec=spec, shape=data.shape)


def dequantize(qs: QuantizedStore) -> Tensor:
    """scale * (code - zero_point), reshaped to the source extents."""
    vals = qs.spec.scale * (qs.codes.astype(np.float64) - qs.spec.zero_point)
    return Tensor(vals.reshape(qs.shape))


def fake_quant_values(data: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """dequantize(quantize(data)) as a plain array, no recording."""
    codes = np.clip(_round_half_away(data / spec.scale) + spec.zero_point,
                    spec.qmin, spec.qmax)
    return spec.scale * (codes - spec.zero_point)


def fake_quant_ste(w: Tensor, spec: QuantSpec) -> Tensor:
    """Quantize-dequantize with a clipped straight-through gradient.

    Forward equals dequantize(quantize(w)); the backward rule passes the
    gradient unchanged where w lies inside the representable range and
    zeroes it outside (clipped STE).
    """
    out = fake_quant_values(w.data, spec)
    mask = (w.data >= spec.range_lo) & (w.data <= spec.range_hi)

    def rule(g: np.ndarray):
        return (g * mask,)

    return _record("fake_quant_ste", (w,), out, rule)


def encode_bits(code: int, spec: QuantSpec) -> np.ndarray:
    """Bit pattern of one code, LSB first.

    Two's complement for signed specs, plain binary for unsigned.
    """
    code = int(code)
    if not spec.qmin <= code <= spec.qmax:
        raise EncodingError(
            f"code {code} outside [{spec.qmin}, {spec.qmax}]")
    raw = code & ((1 << spec.bits) - 1)
    return np.array([(raw >> b) & 1 for b in range(spec.bits)], dtype=np.uint8)


def decode_bits(bitvec, spec: QuantSpec) -> int:
    """Inverse of encode_bits."""
    bits = np.asarray(bitvec, dtype=np.uint8)
    if bits.shape != (spec.bits,):
        raise EncodingError(f"expected {spec.bits} bits, got shape {bits.shape}")
    raw = int(sum(int(b) << i for i, b in enumerate(bits)))
    return _raw_to_code(raw, spec)


def _code_to_raw(codes: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Vectorized unsigned bit patterns of signed or unsigned codes."""
    return codes.astype(np.int64) & ((1 << spec.bits) - 1)


def _raw_to_code(raw, spec: QuantSpec):
    """Vectorized inverse of _code_to_raw (sign extension for signed specs)."""
    raw = np.asarray(raw, dtype=np.int64)
    if spec.signed:
        sign = 1 << (spec.bits - 1)
        code = np.where(raw & sign, raw - (1 << spec.bits), raw)
    else:
        code = raw
    return int(code) if code.ndim == 0 else code
