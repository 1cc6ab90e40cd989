"""Network definitions assembled from tensor ops.

Models are flat lists of layer descriptors plus parameter tensors. Weights
of quantized conv/linear layers pass through a fake-quant STE, and the
output of every quantized relu is fake-quantized on the activation grid;
those quantized post-relu tensors are what activation capture returns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .quant import QuantSpec, fake_quant_ste
from .tensor import ShapeError, Tensor

__all__ = [
    "LayerDescriptor",
    "Model",
    "ForwardState",
    "forward",
    "build_lenet5",
    "build_mlp",
]

PARAM_KINDS = ("conv", "linear")


@dataclass(frozen=True)
class LayerDescriptor:
    """One layer of a model; extents are kind-specific.

    conv:    in_channels, out_channels, kernel, stride, padding
    linear:  in_features, out_features
    maxpool/avgpool: size
    relu, flatten: no extents
    ``quantized`` marks fake-quantized weights (conv/linear) or a
    quantized output grid (relu).
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0
    size: int = 0
    quantized: bool = False


class ForwardState(NamedTuple):
    logits: Tensor
    activations: list[Tensor]
    qweights: list[Optional[Tensor]]   # per param layer, as used in this pass


@dataclass
class Model:
    """Layer descriptors plus latent (real-valued) parameters.

    ``params`` holds weight and bias tensors in layer order
    (w0, b0, w1, b1, ...). ``weight_specs`` aligns with the conv/linear
    layers, ``act_specs`` with the relu layers.
    """

    arch: str
    descriptors: list[LayerDescriptor]
    params: list[Tensor]
    bits: int
    weight_specs: list[Optional[QuantSpec]] = field(default_factory=list)
    act_specs: list[Optional[QuantSpec]] = field(default_factory=list)
    input_shape: Optional[tuple[int, int, int]] = None
    forward_calls: int = 0

    def __post_init__(self):
        n_param_layers = len(self.param_layer_indices())
        if len(self.params) != 2 * n_param_layers:
            raise ValueError("parameter count does not match descriptors")
        if not self.weight_specs:
            self.weight_specs = [None] * n_param_layers
        if not self.act_specs:
            self.act_specs = [None] * self.relu_count()

    def param_layer_indices(self) -> list[int]:
        return [i for i, d in enumerate(self.descriptors) if d.kind in PARAM_KINDS]

    def relu_count(self) -> int:
        return sum(1 for d in self.descriptors if d.kind == "relu")

    def parameters(self) -> list[Tensor]:
        return self.params

    def weight_params(self) -> list[Tensor]:
        """Weight tensors of the quantized conv/linear layers, layer order."""
        out = []
        for j, i in enumerate(self.param_layer_indices()):
            if self.descriptors[i].quantized:
                out.append(self.params[2 * j])
        return out

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def copy(self) -> "Model":
        """Deep copy of parameters; descriptors and specs are immutable."""
        return Model(
            arch=self.arch,
            descriptors=list(self.descriptors),
            params=[Tensor(p.data.copy(), requires_grad=True) for p in self.params],
            bits=self.bits,
            weight_specs=list(self.weight_specs),
            act_specs=list(self.act_specs),
            input_shape=self.input_shape,
        )


def _check_input(model: Model, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"model input must be 4-D [N,C,H,W], got {x.shape}")
    first = model.descriptors[0]
    if first.kind == "flatten":
        want = model.descriptors[
            model.param_layer_indices()[0]].in_features
        got = int(np.prod(x.shape[1:]))
        if got != want:
            raise ShapeError(f"flattened input size {got}, model expects {want}")
    elif model.input_shape is not None and tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(
            f"input shape {tuple(x.shape[1:])}, model expects {model.input_shape}")


def _run(model: Model, x: Tensor, *, capture_activations: bool = False,
         weight_offsets: Optional[Sequence[Optional[np.ndarray]]] = None,
         bias_offsets: Optional[Sequence[Optional[np.ndarray]]] = None,
         act_quant: bool = True) -> ForwardState:
    """Full forward pass; offsets perturb the weights as used (not latent)."""
    _check_input(model, x)
    model.forward_calls += 1
    activations: list[Tensor] = []
    qweights: list[Optional[Tensor]] = []
    h = x
    pidx = 0   # param-layer cursor
    ridx = 0   # relu cursor
    for d in model.descriptors:
        if d.kind in PARAM_KINDS:
            w, b = model.params[2 * pidx], model.params[2 * pidx + 1]
            spec = model.weight_specs[pidx]
            wq = fake_quant_ste(w, spec) if (d.quantized and spec is not None) else w
            if weight_offsets is not None and weight_offsets[pidx] is not None:
                wq = T.add(wq, Tensor(weight_offsets[pidx]))
            bq = b
            if bias_offsets is not None and bias_offsets[pidx] is not None:
                bq = T.add(b, Tensor(bias_offsets[pidx]))
            qweights.append(wq)
            if d.kind == "conv":
                h = T.conv2d(h, wq, stride=d.stride, padding=d.padding)
                h = T.add(h, T.reshape(bq, (1, d.out_channels, 1, 1)))
            else:
                if h.data.ndim != 2:
                    raise ShapeError(
                        f"linear layer expects 2-D input, got {h.shape}")
                h = T.add(T.matmul(h, T.transpose(wq)), bq)
            pidx += 1
        elif d.kind == "relu":
            h = T.relu(h)
            spec = model.act_specs[ridx]
            if act_quant and d.quantized and spec is not None:
                h = fake_quant_ste(h, spec)
            if capture_activations:
                activations.append(h)
            ridx += 1
        elif d.kind == "maxpool":
            h = T.maxpool2d(h, d.size)
        elif d.kind == "avgpool":
            h = T.avgpool2d(h, d.size)
        elif d.kind == "flatten":
            h = T.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        else:
            raise ValueError(f"unknown layer kind {d.kind!r}")
    return ForwardState(logits=h, activations=activations, qweights=qweights)


def forward(model: Model, x: Tensor,
            capture_activations: bool = False) -> tuple[Tensor, list[Tensor]]:
    """Run the model; optionally return the quantized post-relu activations."""
    state = _run(model, x, capture_activations=capture_activations)
    return state.logits, state.activations


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_lenet5(bits: int, seed: int = 0) -> Model:
    """LeNet-5 variant for 1x28x28 inputs, relu + maxpool, 10 classes."""
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must lie in [2, 8], got {bits}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    descriptors = [
        LayerDescriptor("conv", in_channels=1, out_channels=6, kernel=5,
                        stride=1, padding=2, quantized=True),
        LayerDescriptor("relu", quantized=True),
        LayerDescriptor("maxpool", size=2),
        LayerDescriptor("conv", in_channels=6, out_channels=16, kernel=5,
                        stride=1, padding=0, quantized=True),
        LayerDescriptor("relu", quantized=True),
        LayerDescriptor("maxpool", size=2),
        LayerDescriptor("flatten"),
        LayerDescriptor("linear", in_features=400, out_features=120, quantized=True),
        LayerDescriptor("relu", quantized=True),
        LayerDescriptor("linear", in_features=120, out_features=84, quantized=True),
        LayerDescriptor("relu", quantized=True),
        LayerDescriptor("linear", in_features=84, out_features=10, quantized=True),
    ]
    params: list[Tensor] = []
    for d in descriptors:
        if d.kind == "conv":
            fan_in = d.in_channels * d.kernel * d.kernel
            w = _he_uniform(rng, (d.out_channels, d.in_channels, d.kernel, d.kernel), fan_in)
            params.append(Tensor(w, requires_grad=True))
            params.append(Tensor(np.zeros(d.out_channels), requires_grad=True))
        elif d.kind == "linear":
            w = _he_uniform(rng, (d.out_features, d.in_features), d.in_features)
            params.append(Tensor(w, requires_grad=True))
            params.append(Tensor(np.zeros(d.out_features), requires_grad=True))
    return Model(arch="lenet5", descriptors=descriptors, params=params,
                 bits=bits, input_shape=(1, 28, 28))


def build_mlp(layer_sizes: Sequence[int], bits: int, seed: int = 0) -> Model:
    """Fully connected relu net; input is flattened, last layer is linear."""
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must lie in [2, 8], got {bits}")
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ValueError("layer_sizes needs at least input and output sizes")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    descriptors = [LayerDescriptor("flatten")]
    params: list[Tensor] = []
    for li, (fin, fout) in enumerate(zip(sizes, sizes[1:])):
        descriptors.append(LayerDescriptor("linear", in_features=fin,
                                           out_features=fout, quantized=True))
        params.append(Tensor(_he_uniform(rng, (fout, fin), fin), requires_grad=True))
        params.append(Tensor(np.zeros(fout), requires_grad=True))
        if li < len(sizes) - 2:
            descriptors.append(LayerDescriptor("relu", quantized=True))
    arch = "mlp-" + "-".join(str(s) for s in sizes)
    return Model(arch=arch, descriptors=descriptors, params=params, bits=bits)
