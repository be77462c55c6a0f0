"""Self-checks run by ``fp4sim verify``; each reports pass/fail and a counterexample."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import analysis
from .analysis import CurvatureModel
from .blockquant import NVFP4, fake_quantize
from .minifloat import E2M1, E4M3, E8M0U, MiniFloatFormat, decode, encode, enumerate_grid
from .rounding import RngStream, round_rtn, round_sr, sr_probability


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        tail = f"  ({self.detail})" if self.detail else ""
        return f"[{status}] {self.suite}: {self.name}{tail}"


def scale_formats() -> list[MiniFloatFormat]:
    """Every signed E{e}M{7-e} format plus E8M0u."""
    return [MiniFloatFormat(e, 7 - e) for e in range(1, 8)] + [E8M0U]


def check_codec_round_trip(fmt: MiniFloatFormat) -> tuple[bool, str]:
    for code in range(fmt.num_codes):
        v = decode(fmt, code)
        if math.isnan(v):
            continue
        back = decode(fmt, encode(fmt, v))
        if back != v:
            return False, f"{fmt.name} code {code}: {v} -> {back}"
    return True, f"{fmt.num_codes} codes"


def _codec() -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    checks = [(f"round trip {f.name}", (lambda f=f: check_codec_round_trip(f)))
              for f in [E2M1] + scale_formats()]

    def e2m1_grid():
        pos = [v for v in enumerate_grid(E2M1).values if v >= 0]
        return pos == [0, 0.5, 1, 1.5, 2, 3, 4, 6], str([float(v) for v in pos])

    return checks + [("E2M1 positive grid", e2m1_grid)]


def analytic_expectation_exact(lo: float, hi: float, p: float, x: float) -> bool:
    """``l (1 - p) + u p == x`` in exact rationals, with ``p`` the float probability to 1 ulp."""
    if lo == hi:
        return lo == x
    L, U, X = Fraction(lo), Fraction(hi), Fraction(x)
    p_exact = (X - L) / (U - L)
    if not (L <= X <= U and L * (1 - p_exact) + U * p_exact == X):
        return False
    return abs(Fraction(p) - p_exact) <= Fraction(math.ulp(max(p, 1e-300)))


def check_sr_unbiased(values, scale: float = 1.0, draws: int = 100_000, seed: int = 0,
                      fmt: MiniFloatFormat = E2M1) -> tuple[bool, str]:
    """Monte-Carlo SR mean within 3 SE, and the analytic expectation exact, for each value."""
    grid = enumerate_grid(fmt).scaled(scale)
    for i, x in enumerate(np.asarray(values, dtype=np.float64)):
        lo, hi, p = sr_probability(grid, x)
        if not analytic_expectation_exact(float(lo), float(hi), float(p), float(x)):
            return False, f"analytic expectation off at x={x!r}"
        out = round_sr(grid, np.full(draws, x), RngStream(seed, tensor_id=i))
        se = math.sqrt(p * (1 - p)) * (hi - lo) / math.sqrt(draws)
        if abs(out.mean() - x) > 3 * se + 1e-15 * abs(x):
            return False, f"x={x!r}: mean {out.mean()!r}, 3SE {3 * se:.3g}"
    return True, f"{len(values)} points x {draws} draws"


def check_rtn_optimal(fmt: MiniFloatFormat = E2M1, n: int = 10_000, seed: int = 0) -> tuple[bool, str]:
    grid = enumerate_grid(fmt)
    x = np.random.default_rng(seed).uniform(-1.5, 1.5, n) * grid.max_normal
    r = round_rtn(grid, x)
    err = np.abs(r - x)
    best = np.min(np.abs(grid.values[None, :] - x[:, None]), axis=1)
    bad = np.nonzero(err > best)[0]
    if bad.size:
        i = bad[0]
        return False, f"x={x[i]!r} rounded to {r[i]!r}"
    return True, f"{n} inputs"


def _rounding():
    rng = np.random.default_rng(1)
    grid_max = 6.0
    pts = rng.uniform(-grid_max, grid_max, 100)
    return [
        ("SR unbiased E2M1 (unit scale)", lambda: check_sr_unbiased(pts[:20], draws=20_000)),
        ("SR unbiased E2M1 x 0.375", lambda: check_sr_unbiased(pts[:20] * 0.375, 0.375, 20_000, 1)),
        ("RtN optimal E2M1", check_rtn_optimal),
        ("RtN optimal E4M3", lambda: check_rtn_optimal(E4M3, 2_000)),
    ]


def _blockquant():
    def fixed_point():
        x = np.random.default_rng(0).choice([0, 0.5, 1, 1.5, 2, 3, 4, 6], size=(8, 32))
        x[:, ::16] = 6.0
        ok = np.array_equal(fake_quantize(x, NVFP4), x)
        return ok, "" if ok else "grid tensor changed"

    def amax12():
        x = np.array([12.0, 5.0] + [0.0] * 14)
        v = fake_quantize(x, NVFP4)[1]
        return v == 4.0, f"5.0 -> {v}"

    def sr_block_unbiased():
        x = np.random.default_rng(2).uniform(-1, 1, 16)
        x[0] = 1.0
        n = 20_000
        deq = fake_quantize(np.tile(x, n), NVFP4.with_rounding("sr"), rng=RngStream(5)).reshape(n, 16)
        se = deq.std(axis=0) / math.sqrt(n)
        clipped = np.clip(x, -6 * _scale_of(x), 6 * _scale_of(x))
        bad = np.abs(deq.mean(axis=0) - clipped) > 3.5 * se + 1e-15
        return (not bad.any()), f"{int(bad.sum())} elements outside 3.5 SE"

    return [("grid tensors are fixed points", fixed_point), ("amax-12 example", amax12),
            ("SR block unbiased", sr_block_unbiased)]


def _scale_of(block: np.ndarray) -> float:
    from .blockquant import quantize_block_tensor
    from .minifloat import decode_table

    q = quantize_block_tensor(block, NVFP4)
    return float(decode_table(NVFP4.scale_format)[q.scales[0]])


def random_instances(n: int = 30, seed: int = 0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        d = int(rng.integers(2, 40))
        g = rng.standard_normal(d)
        kind = i % 3
        if kind == 0:
            H = CurvatureModel.isotropic(rng.uniform(0.1, 5))
        elif kind == 1:
            H = CurvatureModel.diagonal(rng.uniform(0.01, 5, d))
        else:
            M = rng.standard_normal((d, d))
            H = CurvatureModel.explicit(M @ M.T / d + 0.05 * np.eye(d))
        yield g, H, float(rng.uniform(0, 3))


def check_identity(n: int = 30) -> tuple[bool, str]:
    worst = 0.0
    for g, H, s in random_instances(n):
        eta = analysis.optimal_eta(g, H, s)
        a = analysis.expected_loss_delta(g, H, eta, s)
        b = analysis.loss_delta_at_optimum(g, H, s)
        worst = max(worst, abs(a - b) / abs(b))
    return worst <= 1e-12, f"max rel diff {worst:.2e}"


def check_sensitivity_argmax(X: float = 3.0, Y: float = 1.0, Z: float = 4.0,
                             points: int = 100_001, sigma_max: float = 10.0) -> tuple[bool, str]:
    sig = np.linspace(0, sigma_max, points)
    found = sig[np.argmax(analysis.sensitivity_from_terms(X, Y, Z, sig))]
    target = math.sqrt(X / (3 * Y))
    step = sig[1] - sig[0]
    return abs(found - target) <= step, f"argmax {found:.6f} vs {target:.6f} (grid step {step:.1e})"


def check_threshold_equivalence(n: int = 10_000, seed: int = 0) -> tuple[bool, str]:
    """Random triples plus points within one ulp of the threshold."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        d = int(rng.integers(1, 10_000))
        s = float(rng.uniform(1e-6, 1.0))
        gn = float(rng.uniform(0, 10)) if i % 2 else math.sqrt(3 * d) * s
        for g in (gn, float(np.nextafter(gn, 0.0)), float(np.nextafter(gn, np.inf))):
            below = analysis.noise_ratio(g, s, d) < analysis.SQRT3
            if below != (s > analysis.sigma_critical(g, d)):
                return False, f"grad_norm={g!r} sigma={s!r} d={d}"
    return True, f"{n} triples, half on the threshold"


def _analysis():
    return [("E[dL](eta*) == U(eta*)", check_identity),
            ("noise-sensitivity argmax", check_sensitivity_argmax),
            ("ratio < sqrt3 iff sigma > sigma_crit", check_threshold_equivalence)]


SUITES = {"codec": _codec, "rounding": _rounding, "blockquant": _blockquant, "analysis": _analysis}


def run_suite(name: str) -> list[CheckResult]:
    names = list(SUITES) if name == "all" else [name]
    results = []
    for suite in names:
        if suite not in SUITES:
            raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)} or all")
        for check_name, fn in SUITES[suite]():
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failure with its message as counterexample
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(suite, check_name, bool(ok), detail))
    return results
