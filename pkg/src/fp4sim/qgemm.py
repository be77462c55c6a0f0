"""Simulated quantized GEMMs for the forward, backward and update passes.

Shapes follow the column convention ``z = W @ a``: ``W`` is ``(out, in)`` and
activations are ``(features, batch)``.  Each operand is quantized in blocks
along its own contraction axis, dequantized, and multiplied in float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .blockquant import NVFP4, BlockQuantConfig, fake_quantize, parse_block_config
from .rounding import RngStream, RoundingMode


class QuantPoint(enum.Enum):
    FWD_WEIGHT = "fwdW"
    FWD_ACT = "fwdA"
    BWD_WEIGHT_T = "bwdW"
    BWD_GRAD = "bwdG"
    UPD_GRAD = "updG"
    UPD_ACT_T = "updA"

    @property
    def index(self) -> int:
        return list(QuantPoint).index(self)


BACKWARD_POINTS = (QuantPoint.BWD_WEIGHT_T, QuantPoint.BWD_GRAD,
                   QuantPoint.UPD_GRAD, QuantPoint.UPD_ACT_T)


@dataclass(frozen=True)
class RoundingPolicy:
    """Quantization config per operand position; ``None`` keeps full precision."""

    configs: Mapping[QuantPoint, BlockQuantConfig | None] = field(default_factory=dict)

    def __post_init__(self) -> None:
        full = {p: None for p in QuantPoint}
        for point, cfg in dict(self.configs).items():
            if cfg is not None and cfg.element_rounding is RoundingMode.NONE:
                cfg = None
            full[QuantPoint(point)] = cfg
        object.__setattr__(self, "configs", full)

    def __getitem__(self, point: QuantPoint) -> BlockQuantConfig | None:
        return self.configs[point]

    def __eq__(self, other) -> bool:
        return isinstance(other, RoundingPolicy) and self.configs == other.configs

    def __hash__(self) -> int:
        return hash(tuple(self.configs[p] for p in QuantPoint))

    def with_points(self, **changes: BlockQuantConfig | None) -> RoundingPolicy:
        configs = dict(self.configs)
        for key, cfg in changes.items():
            configs[QuantPoint(key)] = cfg
        return RoundingPolicy(configs)

    @property
    def is_high_precision(self) -> bool:
        return all(cfg is None for cfg in self.configs.values())

    def literal(self) -> str:
        modes = []
        for p in QuantPoint:
            cfg = self.configs[p]
            modes.append(f"{p.value}={'none' if cfg is None else cfg.element_rounding.value}")
        return ",".join(modes)

    @classmethod
    def high_precision(cls) -> RoundingPolicy:
        return cls({})

    @classmethod
    def uniform(cls, base: BlockQuantConfig = NVFP4, mode: RoundingMode | str = "rtn") -> RoundingPolicy:
        cfg = base.with_rounding(mode)
        return cls({p: cfg for p in QuantPoint})

    @classmethod
    def paper(cls, base: BlockQuantConfig = NVFP4) -> RoundingPolicy:
        """RtN for the forward operands and the backward weight, SR for the rest."""
        rtn, sr = base.with_rounding("rtn"), base.with_rounding("sr")
        return cls({
            QuantPoint.FWD_WEIGHT: rtn,
            QuantPoint.FWD_ACT: rtn,
            QuantPoint.BWD_WEIGHT_T: rtn,
            QuantPoint.BWD_GRAD: sr,
            QuantPoint.UPD_GRAD: sr,
            QuantPoint.UPD_ACT_T: sr,
        })

    @classmethod
    def single_sr(cls, point: QuantPoint, base: BlockQuantConfig = NVFP4) -> RoundingPolicy:
        """RtN everywhere except SR at ``point``."""
        return cls.uniform(base, "rtn").with_points(**{point.value: base.with_rounding("sr")})

    def qaf(self, include_weight: bool = True) -> RoundingPolicy:
        """Keep the forward operands, run backward/update operands at full precision.

        ``include_weight=False`` leaves the backward weight operand quantized
        and switches only the three gradient/activation operands.
        """
        points = BACKWARD_POINTS if include_weight else BACKWARD_POINTS[1:]
        return self.with_points(**{p.value: None for p in points})


_ALIASES = {"paper": RoundingPolicy.paper, "none": RoundingPolicy.high_precision,
            "hp": RoundingPolicy.high_precision}


def parse_policy(text: str, base: BlockQuantConfig | str = NVFP4) -> RoundingPolicy:
    """Parse ``paper``, ``none``, ``rtn``/``sr`` (uniform) or six ``point=mode`` entries.

    Unlisted points in the explicit form stay at full precision.
    """
    if isinstance(base, str):
        base = parse_block_config(base)
    text = text.strip()
    key = text.lower()
    if key == "paper":
        return RoundingPolicy.paper(base)
    if key in _ALIASES:
        return _ALIASES[key]()
    if key in ("rtn", "sr"):
        return RoundingPolicy.uniform(base, key)
    configs: dict[QuantPoint, BlockQuantConfig | None] = {}
    for part in text.split(","):
        name, sep, mode = part.partition("=")
        if not sep:
            raise ValueError(f"bad policy entry {part!r}")
        try:
            point = QuantPoint(name.strip())
        except ValueError:
            raise ValueError(f"unknown quantization point {name.strip()!r}") from None
        mode = RoundingMode.parse(mode)
        configs[point] = None if mode is RoundingMode.NONE else base.with_rounding(mode)
    return RoundingPolicy(configs)


def qmatmul(a, b, cfg_a: BlockQuantConfig | None, cfg_b: BlockQuantConfig | None,
            rng_a: RngStream | None = None, rng_b: RngStream | None = None) -> np.ndarray:
    """``Q(a) @ Q(b)`` with ``a`` blocked along axis 1 and ``b`` along axis 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return fake_quantize(a, cfg_a, axis=1, rng=rng_a) @ fake_quantize(b, cfg_b, axis=0, rng=rng_b)


def _streams(rng: RngStream | None, layer: int, first: QuantPoint, second: QuantPoint):
    if rng is None:
        return None, None
    base = layer * len(QuantPoint)
    return rng.fork(tensor_id=base + first.index), rng.fork(tensor_id=base + second.index)


def fqt_linear_forward(W, a_prev, policy: RoundingPolicy, rng: RngStream | None = None,
                       layer: int = 0) -> np.ndarray:
    ra, rb = _streams(rng, layer, QuantPoint.FWD_WEIGHT, QuantPoint.FWD_ACT)
    return qmatmul(W, a_prev, policy[QuantPoint.FWD_WEIGHT], policy[QuantPoint.FWD_ACT], ra, rb)


def fqt_linear_backward(W, delta, policy: RoundingPolicy, rng: RngStream | None = None,
                        layer: int = 0) -> np.ndarray:
    """Gradient w.r.t. the layer input.  ``W.T`` is re-quantized along its own rows."""
    ra, rb = _streams(rng, layer, QuantPoint.BWD_WEIGHT_T, QuantPoint.BWD_GRAD)
    W = np.asarray(W, dtype=np.float64)
    return qmatmul(W.T, delta, policy[QuantPoint.BWD_WEIGHT_T], policy[QuantPoint.BWD_GRAD], ra, rb)


def fqt_linear_update(delta, a_prev_t, policy: RoundingPolicy, rng: RngStream | None = None,
                      layer: int = 0) -> np.ndarray:
    """Weight gradient ``Q(delta) @ Q(a_prev.T)``, contracting over the batch."""
    ra, rb = _streams(rng, layer, QuantPoint.UPD_GRAD, QuantPoint.UPD_ACT_T)
    return qmatmul(delta, a_prev_t, policy[QuantPoint.UPD_GRAD], policy[QuantPoint.UPD_ACT_T], ra, rb)
