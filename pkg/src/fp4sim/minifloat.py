"""Bit-exact codec for small sign/exponent/mantissa floating-point formats.

Code layout is ``[sign][exponent][mantissa]`` from the most significant bit
down.  With ``mantissa_bits > 0`` an exponent field of zero encodes
subnormals ``2**(1 - bias) * m / 2**M``; every other exponent field encodes
normals ``2**(e - bias) * (1 + m / 2**M)``.  Exponent-only formats
(``mantissa_bits == 0``) have no subnormal range: every exponent field is a
power of two, so E8M0 spans ``2**-127 .. 2**128`` with no zero.
"""

from __future__ import annotations

import enum
import functools
import math
import re
from dataclasses import dataclass, field

import numpy as np

MAX_WIDTH = 16


class FormatError(ValueError):
    """Raised for an invalid format description or literal."""


class Specials(enum.Enum):
    ALL_FINITE = "all_finite"
    FINITE_WITH_NAN = "finite_with_nan"


@dataclass(frozen=True)
class MiniFloatFormat:
    exponent_bits: int
    mantissa_bits: int
    has_sign: bool = True
    bias: int | None = None
    specials: Specials = Specials.ALL_FINITE

    def __post_init__(self) -> None:
        e, m = self.exponent_bits, self.mantissa_bits
        if e < 1:
            raise FormatError(f"exponent_bits must be >= 1, got {e}")
        if m < 0:
            raise FormatError(f"mantissa_bits must be >= 0, got {m}")
        if self.width > MAX_WIDTH:
            raise FormatError(f"width {self.width} exceeds {MAX_WIDTH} bits")
        if self.bias is None:
            object.__setattr__(self, "bias", 2 ** (e - 1) - 1)

    @property
    def width(self) -> int:
        return int(self.has_sign) + self.exponent_bits + self.mantissa_bits

    @property
    def name(self) -> str:
        suffix = "" if self.has_sign else "u"
        if self.specials is Specials.FINITE_WITH_NAN:
            suffix += "fn"
        return f"E{self.exponent_bits}M{self.mantissa_bits}{suffix}"

    def __str__(self) -> str:
        return self.name

    @property
    def num_codes(self) -> int:
        return 1 << self.width

    def fields(self, code: int) -> tuple[int, int, int]:
        """Split a code into ``(sign, exponent, mantissa)`` fields."""
        m = code & ((1 << self.mantissa_bits) - 1)
        e = (code >> self.mantissa_bits) & ((1 << self.exponent_bits) - 1)
        s = (code >> (self.exponent_bits + self.mantissa_bits)) & 1 if self.has_sign else 0
        return s, e, m

    def is_nan_code(self, code: int) -> bool:
        if self.specials is not Specials.FINITE_WITH_NAN:
            return False
        _, e, m = self.fields(code)
        return e == (1 << self.exponent_bits) - 1 and m == (1 << self.mantissa_bits) - 1


_LITERAL = re.compile(r"^[Ee](\d+)[Mm](\d+)(u?)(fn)?$")


def parse_format(text: str) -> MiniFloatFormat:
    """Parse ``E{e}M{m}[u][fn]``, e.g. ``E2M1``, ``E8M0u``, ``E4M3fn``.

    ``u`` drops the sign bit; ``fn`` reserves the all-ones code as NaN.
    """
    match = _LITERAL.match(text.strip())
    if match is None:
        raise FormatError(f"unknown format literal {text!r}")
    e, m, unsigned, fn = match.groups()
    specials = Specials.FINITE_WITH_NAN if fn else Specials.ALL_FINITE
    return MiniFloatFormat(int(e), int(m), has_sign=not unsigned, specials=specials)


E2M1 = MiniFloatFormat(2, 1)
E4M3 = MiniFloatFormat(4, 3)
E4M3FN = MiniFloatFormat(4, 3, specials=Specials.FINITE_WITH_NAN)
E8M0U = MiniFloatFormat(8, 0, has_sign=False)

# Scale formats compared at block size 16; all but E8M0u are 8-bit signed.
SCALE_SWEEP = tuple(parse_format(s) for s in
                    ("E1M6", "E2M5", "E3M4", "E4M3", "E5M2", "E6M1", "E8M0u"))


def _magnitude(fmt: MiniFloatFormat, e: int, m: int) -> float:
    bias = fmt.bias
    if fmt.mantissa_bits == 0:
        return math.ldexp(1.0, e - bias)
    frac = m / (1 << fmt.mantissa_bits)
    if e == 0:
        return math.ldexp(frac, 1 - bias)
    return math.ldexp(1.0 + frac, e - bias)


def decode(fmt: MiniFloatFormat, code: int) -> float:
    """Exact value of ``code``; NaN codes decode to ``math.nan``."""
    code = int(code)
    if not 0 <= code < fmt.num_codes:
        raise ValueError(f"code {code} out of range for {fmt.name}")
    if fmt.is_nan_code(code):
        return math.nan
    s, e, m = fmt.fields(code)
    value = _magnitude(fmt, e, m)
    return -value if s else value


@functools.lru_cache(maxsize=None)
def decode_table(fmt: MiniFloatFormat) -> np.ndarray:
    """Decoded value of every code, indexed by code (read-only)."""
    table = np.array([decode(fmt, c) for c in range(fmt.num_codes)], dtype=np.float64)
    table.setflags(write=False)
    return table


@functools.lru_cache(maxsize=None)
def _value_to_code(fmt: MiniFloatFormat) -> dict[float, int]:
    lookup: dict[float, int] = {}
    for code, value in enumerate(decode_table(fmt)):
        if math.isnan(value):
            continue
        # first code wins, so +0 (code 0) is canonical for zero
        lookup.setdefault(float(value), code)
    return lookup


def encode(fmt: MiniFloatFormat, x: float) -> int:
    """Code of the grid value ``x``.  Does not round: off-grid input raises."""
    try:
        return _value_to_code(fmt)[float(x)]
    except KeyError:
        raise ValueError(f"{x!r} is not representable in {fmt.name}") from None


@dataclass(frozen=True, eq=False)
class RepresentableGrid:
    """Sorted finite values of a format, with one canonical code per value.

    ``parity`` is the least significant bit of each value's magnitude code,
    used to break round-to-nearest ties toward even.
    """

    values: np.ndarray
    codes: np.ndarray
    parity: np.ndarray
    fmt: MiniFloatFormat | None = field(default=None)

    @property
    def max_normal(self) -> float:
        return float(self.values[-1])

    @property
    def min_subnormal_positive(self) -> float:
        pos = self.values[self.values > 0]
        return float(pos[0]) if pos.size else math.nan

    def __len__(self) -> int:
        return int(self.values.size)

    def positive(self) -> RepresentableGrid:
        keep = self.values > 0
        return RepresentableGrid(self.values[keep], self.codes[keep], self.parity[keep], self.fmt)

    def scaled(self, scale: float) -> RepresentableGrid:
        """The grid ``scale * values``; ``scale`` must be positive."""
        if not scale > 0:
            raise ValueError("scale must be positive")
        return RepresentableGrid(self.values * scale, self.codes, self.parity, self.fmt)


@functools.lru_cache(maxsize=None)
def enumerate_grid(fmt: MiniFloatFormat) -> RepresentableGrid:
    lookup = _value_to_code(fmt)
    values = np.array(sorted(lookup), dtype=np.float64)
    codes = np.array([lookup[v] for v in values], dtype=np.uint32)
    mag_mask = (1 << (fmt.exponent_bits + fmt.mantissa_bits)) - 1
    parity = ((codes & mag_mask) & 1).astype(np.uint8)
    for arr in (values, codes, parity):
        arr.setflags(write=False)
    return RepresentableGrid(values, codes, parity, fmt)
