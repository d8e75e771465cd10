"""Quantization and perturbation laboratory.

Uniform and non-uniform (signed-power companded) fake quantization, matched
intensity perturbation families, a small trainable transformer with
injection hooks, and a seeded experiment harness.
"""

from qlens.errors import (
    QlensError,
    InvalidParameterError,
    InputError,
    NumericalError,
)
from qlens.tensor import Tensor, TensorStats, RngStream, stats, sample, add, sub, scale, l2
from qlens.quant import (
    QuantScheme,
    QuantizedTensor,
    quantize,
    dequantize,
    fake_quant,
    quant_perturbation,
    scale_sweep,
)
from qlens.perturb import PerturbKind, PerturbSpec, gen_perturbation, match_intensity, native_intensity, clip_fraction

__version__ = "0.1.0"

__all__ = [
    "QlensError",
    "InvalidParameterError",
    "InputError",
    "NumericalError",
    "Tensor",
    "TensorStats",
    "RngStream",
    "stats",
    "sample",
    "add",
    "sub",
    "scale",
    "l2",
    "QuantScheme",
    "QuantizedTensor",
    "quantize",
    "dequantize",
    "fake_quant",
    "quant_perturbation",
    "scale_sweep",
    "PerturbKind",
    "PerturbSpec",
    "gen_perturbation",
    "match_intensity",
    "native_intensity",
    "clip_fraction",
]
