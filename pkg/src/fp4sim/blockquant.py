"""Block-scaled quantization: one shared scale per contiguous block of elements."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .minifloat import (
    E2M1,
    E4M3,
    E8M0U,
    MiniFloatFormat,
    decode_table,
    enumerate_grid,
    parse_format,
)
from .rounding import RngStream, RoundingMode, rtn_index, sr_index


@dataclass(frozen=True)
class BlockQuantConfig:
    data_format: MiniFloatFormat = E2M1
    scale_format: MiniFloatFormat = E4M3
    block_size: int = 16
    element_rounding: RoundingMode = RoundingMode.RTN

    def __post_init__(self) -> None:
        if self.block_size <= 0:
            raise ValueError(f"block_size must be positive, got {self.block_size}")
        object.__setattr__(self, "element_rounding", RoundingMode.parse(self.element_rounding))

    # Scales are always rounded to nearest; never stochastically.
    scale_rounding = RoundingMode.RTN

    def with_rounding(self, mode: RoundingMode | str) -> BlockQuantConfig:
        return replace(self, element_rounding=RoundingMode.parse(mode))

    @property
    def label(self) -> str:
        return (f"data={self.data_format.name},scale={self.scale_format.name},"
                f"block={self.block_size},round={self.element_rounding.value}")


NVFP4 = BlockQuantConfig(E2M1, E4M3, 16)
MXFP4 = BlockQuantConfig(E2M1, E8M0U, 32)
PRESETS = {"nvfp4": NVFP4, "mxfp4": MXFP4}


def parse_block_config(text: str) -> BlockQuantConfig:
    """Parse a preset name or ``data=E2M1,scale=E4M3,block=16[,round=sr]``.

    A preset may be followed by overrides: ``nvfp4,block=32``.
    """
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty block config")
    cfg = NVFP4
    if "=" not in parts[0]:
        try:
            cfg = PRESETS[parts[0].lower()]
        except KeyError:
            raise ValueError(f"unknown preset {parts[0]!r}") from None
        parts = parts[1:]
    for part in parts:
        key, _, value = part.partition("=")
        key = key.strip().lower()
        if key == "data":
            cfg = replace(cfg, data_format=parse_format(value))
        elif key == "scale":
            cfg = replace(cfg, scale_format=parse_format(value))
        elif key == "block":
            cfg = replace(cfg, block_size=int(value))
        elif key == "round":
            cfg = cfg.with_rounding(value)
        else:
            raise ValueError(f"unknown block config key {key!r}")
    return cfg


@dataclass(frozen=True, eq=False)
class QuantizedBlockTensor:
    codes: np.ndarray
    scales: np.ndarray
    shape: tuple[int, ...]
    block_axis: int
    config: BlockQuantConfig

    @property
    def num_blocks(self) -> int:
        return int(self.scales.size)


def _blocked(x: np.ndarray, axis: int, block_size: int):
    moved = np.moveaxis(x, axis, -1)
    n = moved.shape[-1]
    nb = -(-n // block_size)
    pad = nb * block_size - n
    if pad:
        moved = np.concatenate([moved, np.zeros(moved.shape[:-1] + (pad,))], axis=-1)
    return moved.reshape(moved.shape[:-1] + (nb, block_size)), n


def _unblocked(blocks: np.ndarray, n: int, axis: int) -> np.ndarray:
    flat = blocks.reshape(blocks.shape[:-2] + (blocks.shape[-2] * blocks.shape[-1],))[..., :n]
    return np.moveaxis(flat, -1, axis)


def _quantize(x, cfg: BlockQuantConfig, axis: int, rng: RngStream | None):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    if cfg.element_rounding is RoundingMode.NONE:
        raise ValueError("element_rounding NONE means no quantization; pass the tensor through instead")
    if x.ndim == 0:
        x = x.reshape(1)
    axis = axis % x.ndim

    data_grid = enumerate_grid(cfg.data_format)
    scale_grid = enumerate_grid(cfg.scale_format).positive()

    blocks, n = _blocked(x, axis, cfg.block_size)
    amax = np.abs(blocks).max(axis=-1) if blocks.size else np.zeros(blocks.shape[:-1])
    scale_idx = rtn_index(scale_grid, amax / data_grid.max_normal)
    scale = scale_grid.values[scale_idx]

    y = blocks / scale[..., None]
    if cfg.element_rounding is RoundingMode.RTN:
        elem_idx = rtn_index(data_grid, y)
    else:
        if rng is None:
            raise ValueError("stochastic rounding requires an RngStream")
        # draws are indexed by the element's flat position in x
        draws, _ = _blocked(rng.uniform(x.size).reshape(x.shape), axis, cfg.block_size)
        elem_idx = sr_index(data_grid, y, draws)

    codes = _unblocked(data_grid.codes[elem_idx], n, axis).astype(np.uint16)
    scale_codes = np.moveaxis(scale_grid.codes[scale_idx], -1, axis).astype(np.uint16)
    deq = _unblocked(data_grid.values[elem_idx] * scale[..., None], n, axis)
    clipped = _unblocked(np.abs(y) > data_grid.max_normal, n, axis)
    q = QuantizedBlockTensor(codes, scale_codes, tuple(x.shape), axis, cfg)
    return q, deq, clipped


def quantize_block_tensor(x, cfg: BlockQuantConfig = NVFP4, axis: int = -1,
                          rng: RngStream | None = None) -> QuantizedBlockTensor:
    """Quantize ``x`` in blocks of ``cfg.block_size`` running along ``axis``.

    Each block's scale is ``amax / max(data grid)`` rounded to nearest on the
    positive scale grid (an all-zero block gets the smallest positive scale).
    Elements are then rounded on ``scale * data grid`` with saturation.  A
    trailing partial block gets its own scale.
    """
    return _quantize(x, cfg, axis, rng)[0]


def dequantize(q: QuantizedBlockTensor) -> np.ndarray:
    data = decode_table(q.config.data_format)[q.codes]
    scales = decode_table(q.config.scale_format)[q.scales]
    n = q.shape[q.block_axis]
    per_elem = np.repeat(scales, q.config.block_size, axis=q.block_axis)
    per_elem = np.take(per_elem, np.arange(n), axis=q.block_axis)
    return data * per_elem


def fake_quantize(x, cfg: BlockQuantConfig | None, axis: int = -1,
                  rng: RngStream | None = None) -> np.ndarray:
    """Quantize then dequantize; ``cfg=None`` or rounding NONE passes through."""
    x = np.asarray(x, dtype=np.float64)
    if cfg is None or cfg.element_rounding is RoundingMode.NONE:
        return x
    return _quantize(x, cfg, axis, rng)[1].reshape(x.shape)


def block_quant_error(x, cfg: BlockQuantConfig, axis: int = -1, metric: str = "rmse",
                      rng: RngStream | None = None) -> float:
    """Error between ``x`` and its quantize-dequantize round trip.

    metric: ``rmse``, ``nrmse`` (rmse / rms(x)), ``max_abs`` or
    ``clip_fraction`` (share of elements saturated by their block's scale).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("x must be nonempty")
    _, deq, clipped = _quantize(x, cfg, axis, rng)
    err = deq.reshape(x.shape) - x
    if metric == "rmse":
        return float(np.sqrt(np.mean(err ** 2)))
    if metric == "nrmse":
        rms = float(np.sqrt(np.mean(x ** 2)))
        return float(np.sqrt(np.mean(err ** 2))) / rms if rms > 0 else 0.0
    if metric == "max_abs":
        return float(np.max(np.abs(err)))
    if metric == "clip_fraction":
        return float(np.mean(clipped))
    raise ValueError(f"unknown metric {metric!r}")
