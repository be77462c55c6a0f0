"""Simulator for block-scaled FP4 training numerics.

Minifloat codecs, round-to-nearest and stochastic rounding, block-scaled
quantization, simulated quantized GEMMs, noisy-descent analysis and toy
training runs.
"""

from .analysis import (
    CurvatureModel,
    MonitorState,
    ThresholdReport,
    biased_fixed_point,
    expected_loss_delta,
    loss_delta_at_optimum,
    monitor_step,
    noise_ratio,
    noise_sensitivity,
    optimal_eta,
    sigma_critical,
)
from .blockquant import MXFP4, NVFP4, BlockQuantConfig, dequantize, fake_quantize, quantize_block_tensor
from .minifloat import E2M1, E4M3, E8M0U, MiniFloatFormat, decode, encode, enumerate_grid, parse_format
from .qgemm import QuantPoint, RoundingPolicy, parse_policy, qmatmul
from .rounding import RngStream, RoundingMode, round_rtn, round_sr

__version__ = "0.1.0"

__all__ = [
    "BlockQuantConfig", "CurvatureModel", "E2M1", "E4M3", "E8M0U", "MXFP4", "MiniFloatFormat", "MonitorState",
    "NVFP4", "QuantPoint", "RngStream", "RoundingMode", "RoundingPolicy", "ThresholdReport",
    "biased_fixed_point", "decode", "dequantize", "encode", "enumerate_grid", "expected_loss_delta",
    "fake_quantize", "loss_delta_at_optimum", "monitor_step", "noise_ratio", "noise_sensitivity",
    "optimal_eta", "parse_format", "parse_policy", "qmatmul", "quantize_block_tensor", "round_rtn",
    "round_sr", "sigma_critical",
]
