"""Workbench for memory-fault sensitivity of small quantized networks.

Trains low-bit quantized networks (optionally activation-sparse, optionally
sharpness-aware), injects bit-flip and stuck-at faults into the stored
weight bits, and measures accuracy degradation, activation sparsity, and
loss-landscape sharpness.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, batches, load_idx, synthetic_blobs, synthetic_images
from .fault import (FaultReport, FaultSite, FaultSpec, apply_faults,
                    monte_carlo_eval, sample_fault_sites, sweep)
from .landscape import LandscapeGrid, filter_normalized_direction, scan, sharpness_estimate
from .nn import Model, build_lenet5, build_mlp, forward
from .quant import (QuantSpec, QuantizedStore, calibrate, decode_bits,
                    dequantize, encode_bits, fake_quant_ste, quantize)
from .tensor import Tensor, no_grad
from .train import (SaqConfig, TrainConfig, activation_sparsity, epsilon_hat,
                    evaluate, regularized_loss, saq_step, sgd_step, train)

__version__ = "0.1.0"
