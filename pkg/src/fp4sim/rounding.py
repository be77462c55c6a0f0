"""Round reals onto a representable grid: round-to-nearest or stochastic."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .minifloat import RepresentableGrid


class RoundingMode(enum.Enum):
    RTN = "rtn"
    SR = "sr"
    NONE = "none"

    @classmethod
    def parse(cls, text: str | RoundingMode) -> RoundingMode:
        if isinstance(text, RoundingMode):
            return text
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown rounding mode {text!r} (expected rtn, sr or none)") from None


@dataclass(frozen=True)
class RngStream:
    """Counter-based uniform stream keyed by ``(seed, tensor_id, step)``.

    Element ``i`` of a tensor always receives the ``i``-th draw of its key,
    so results do not depend on evaluation order.  Backed by Philox.
    """

    seed: int
    tensor_id: int = 0
    step: int = 0

    def _generator(self) -> np.random.Generator:
        key = np.random.SeedSequence([self.seed, self.tensor_id, self.step]).generate_state(2, np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def uniform(self, n: int, offset: int = 0) -> np.ndarray:
        """Draws for element counters ``offset .. offset + n - 1`` in [0, 1)."""
        draws = self._generator().random(offset + n)
        return draws[offset:]

    def normal(self, shape) -> np.ndarray:
        return self._generator().standard_normal(shape)

    def fork(self, tensor_id: int | None = None, step: int | None = None) -> RngStream:
        changes = {}
        if tensor_id is not None:
            changes["tensor_id"] = tensor_id
        if step is not None:
            changes["step"] = step
        return replace(self, **changes)


def _bracket(grid: RepresentableGrid, x: np.ndarray):
    v = grid.values
    xc = np.clip(x, v[0], v[-1])
    if v.size == 1:
        idx = np.zeros(xc.shape, dtype=np.intp)
        return xc, idx, idx
    lo = np.searchsorted(v, xc, side="right") - 1
    lo = np.clip(lo, 0, v.size - 2)
    return xc, lo, lo + 1


def rtn_index(grid: RepresentableGrid, x) -> np.ndarray:
    """Grid index of the nearest value; ties go to the even magnitude code.

    Out-of-range inputs saturate.  The only ties between two codes of equal
    parity are ``-min`` vs ``+min`` in zero-less formats; those go up.
    """
    xc, lo, hi = _bracket(grid, np.asarray(x, dtype=np.float64))
    v = grid.values
    d_lo = xc - v[lo]
    d_hi = v[hi] - xc
    tie_hi = grid.parity[hi] <= grid.parity[lo]
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & tie_hi)
    return np.where(take_hi, hi, lo)


def sr_probability(grid: RepresentableGrid, x):
    """Bracketing values ``(l, u)`` and the probability ``p`` of rounding up."""
    xc, lo, hi = _bracket(grid, np.asarray(x, dtype=np.float64))
    l, u = grid.values[lo], grid.values[hi]
    gap = u - l
    p = np.divide(xc - l, gap, out=np.zeros_like(xc), where=gap > 0)
    return l, u, p


def sr_index(grid: RepresentableGrid, x, draws) -> np.ndarray:
    """Grid index under stochastic rounding driven by uniform ``draws``."""
    x = np.asarray(x, dtype=np.float64)
    xc, lo, hi = _bracket(grid, x)
    v = grid.values
    gap = v[hi] - v[lo]
    p = np.divide(xc - v[lo], gap, out=np.zeros_like(xc), where=gap > 0)
    draws = np.asarray(draws, dtype=np.float64).reshape(x.shape)
    return np.where(draws < p, hi, lo)


def round_rtn(grid: RepresentableGrid, x):
    out = grid.values[rtn_index(grid, x)]
    return float(out) if np.ndim(out) == 0 else out


def round_sr(grid: RepresentableGrid, x, rng: RngStream):
    x = np.asarray(x, dtype=np.float64)
    out = grid.values[sr_index(grid, x, rng.uniform(x.size))]
    return float(out) if out.ndim == 0 else out


def round_to_grid(grid: RepresentableGrid, x, mode: RoundingMode, rng: RngStream | None = None):
    mode = RoundingMode.parse(mode)
    if mode is RoundingMode.NONE:
        return np.asarray(x, dtype=np.float64)
    if mode is RoundingMode.RTN:
        return round_rtn(grid, x)
    if rng is None:
        raise ValueError("stochastic rounding requires an RngStream")
    return round_sr(grid, x, rng)


def residual_stats(original, rounded) -> tuple[float, float]:
    """Mean and population std of ``rounded - original``."""
    err = np.asarray(rounded, dtype=np.float64) - np.asarray(original, dtype=np.float64)
    return float(err.mean()), float(err.std())


def quantization_noise_stats(grid: RepresentableGrid, samples, mode: RoundingMode,
                             rng: RngStream | None = None) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValueError("samples must be nonempty")
    return residual_stats(samples, round_to_grid(grid, samples, mode, rng))
