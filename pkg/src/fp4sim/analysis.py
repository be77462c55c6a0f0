"""Expected loss change of noisy gradient descent on a local quadratic model.

Notation used throughout: ``A = |g|^2``, ``X = g^T H g``, ``Y = tr(H)``,
``Z = |g|^4`` and ``B = X + sigma_q^2 Y``, where ``g`` is the noise-free
gradient and ``sigma_q`` the per-coordinate std of zero-mean gradient noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blockquant import BlockQuantConfig, fake_quantize
from .rounding import RngStream, residual_stats

SQRT3 = math.sqrt(3.0)
EXPLICIT_MAX_DIM = 512
EMA_DECAY = 0.9
MONITOR_MAX_SAMPLES = 1 << 16


class CurvatureModel:
    """Hessian of the local quadratic model, isotropic, diagonal or explicit."""

    def __init__(self, kind: str, value) -> None:
        self.kind = kind
        if kind == "isotropic":
            self.lam = float(value)
            if not self.lam > 0:
                raise ValueError("isotropic curvature must be positive")
        elif kind == "diagonal":
            self.h = np.asarray(value, dtype=np.float64).ravel()
            if not self.h.sum() > 0:
                raise ValueError("diagonal curvature must have positive trace")
        elif kind == "explicit":
            H = np.asarray(value, dtype=np.float64)
            if H.ndim != 2 or H.shape[0] != H.shape[1]:
                raise ValueError("explicit curvature must be a square matrix")
            if H.shape[0] > EXPLICIT_MAX_DIM:
                raise ValueError(f"explicit curvature limited to d <= {EXPLICIT_MAX_DIM}")
            if not np.trace(H) > 0:
                raise ValueError("explicit curvature must have positive trace")
            self.H = 0.5 * (H + H.T)
        else:
            raise ValueError(f"unknown curvature kind {kind!r}")

    @classmethod
    def isotropic(cls, lam: float) -> CurvatureModel:
        return cls("isotropic", lam)

    @classmethod
    def diagonal(cls, h) -> CurvatureModel:
        return cls("diagonal", h)

    @classmethod
    def explicit(cls, H) -> CurvatureModel:
        return cls("explicit", H)

    def trace(self, d: int) -> float:
        if self.kind == "isotropic":
            return self.lam * d
        if self.kind == "diagonal":
            return float(self.h.sum())
        return float(np.trace(self.H))

    def quad(self, g) -> float:
        """``g^T H g``."""
        g = np.asarray(g, dtype=np.float64).ravel()
        if self.kind == "isotropic":
            return self.lam * float(g @ g)
        if self.kind == "diagonal":
            return float(g @ (self.h * g))
        return float(g @ self.H @ g)

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "isotropic":
            return self.lam * v
        if self.kind == "diagonal":
            return self.h * v
        return self.H @ v

    def lambda_max(self) -> float:
        if self.kind == "isotropic":
            return self.lam
        if self.kind == "diagonal":
            return float(self.h.max())
        return float(np.linalg.eigvalsh(self.H)[-1])


def _terms(grad, H: CurvatureModel, sigma_q: float) -> tuple[float, float]:
    g = np.asarray(grad, dtype=np.float64).ravel()
    A = float(g @ g)
    B = H.quad(g) + sigma_q ** 2 * H.trace(g.size)
    return A, B


def expected_loss_delta(grad, H: CurvatureModel, eta: float, sigma_q: float) -> float:
    """``E[L(theta - eta (g + eps)) - L(theta)] = -eta A + eta^2 B / 2``."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    A, B = _terms(grad, H, sigma_q)
    return -eta * A + 0.5 * eta ** 2 * B


def optimal_eta(grad, H: CurvatureModel, sigma_q: float) -> float:
    A, B = _terms(grad, H, sigma_q)
    if not B > 0:
        raise ValueError("g^T H g + sigma_q^2 tr(H) must be positive")
    return A / B


def loss_delta_at_optimum(grad, H: CurvatureModel, sigma_q: float) -> float:
    A, B = _terms(grad, H, sigma_q)
    if not B > 0:
        raise ValueError("g^T H g + sigma_q^2 tr(H) must be positive")
    return -0.5 * A * A / B


def descent_bound(grad, H: CurvatureModel, sigma_q: float) -> float:
    """Largest step size with negative expected loss change, ``2A / B``."""
    A, B = _terms(grad, H, sigma_q)
    return 2.0 * A / B


def noise_sensitivity(grad, H: CurvatureModel, sigma_q: float) -> float:
    """``Z Y sigma / (X + Y sigma^2)^2``: derivative of the optimal decrease in sigma."""
    g = np.asarray(grad, dtype=np.float64).ravel()
    A = float(g @ g)
    X, Y = H.quad(g), H.trace(g.size)
    denom = (X + Y * sigma_q ** 2) ** 2
    if denom == 0:
        return 0.0
    return A * A * Y * sigma_q / denom


def sensitivity_from_terms(X: float, Y: float, Z: float, sigma_q):
    sigma_q = np.asarray(sigma_q, dtype=np.float64)
    return Z * Y * sigma_q / (X + Y * sigma_q ** 2) ** 2


def sigma_critical_general(grad, H: CurvatureModel) -> float:
    """Noise level maximizing :func:`noise_sensitivity`, ``sqrt(X / (3 Y))``."""
    g = np.asarray(grad, dtype=np.float64).ravel()
    return math.sqrt(H.quad(g) / (3.0 * H.trace(g.size)))


def sigma_critical(grad_norm: float, d: int) -> float:
    """``|g| / sqrt(3 d)``; exact for isotropic curvature, approximate otherwise."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return grad_norm / math.sqrt(3.0 * d)


def noise_ratio(grad_norm: float, sigma_q: float, d: int) -> float:
    """Gradient-to-noise ratio ``|g| / (sigma_q sqrt(d))``; ``inf`` when noise is zero.

    Evaluated as ``sqrt(3) / (sigma_q / sigma_critical)`` so that, in floating
    point too, ``ratio < sqrt(3)`` holds exactly when ``sigma_q > sigma_critical``.
    """
    if sigma_q <= 0:
        return math.inf
    sc = sigma_critical(grad_norm, d)
    if sc == 0:
        return 0.0
    q = sigma_q / sc
    return math.inf if q == 0 else SQRT3 / q


def biased_fixed_point(lam: float, eta: float, mu_eps: float, e0: float, n: int):
    """Closed form of ``e_{t+1} = (1 - eta lam) e_t - eta mu``.

    Returns ``(e_n, L_n, e_inf, L_inf)`` with ``L = lam e^2 / 2``.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    a = 1.0 - eta * lam
    if abs(a) >= 1:
        raise ValueError(f"no fixed point: |1 - eta*lam| = {abs(a)} >= 1")
    an = a ** n
    e_n = an * e0 - (mu_eps / lam) * (1.0 - an)
    e_inf = -mu_eps / lam
    return e_n, 0.5 * lam * e_n ** 2, e_inf, mu_eps ** 2 / (2.0 * lam)


# ── online monitor ──────────────────────────────────────────────────────────


@dataclass
class MonitorState:
    ema: float | None = None
    step: int = 0


@dataclass(frozen=True)
class ThresholdReport:
    step: int
    grad_norm: float
    sigma_q: float
    d: int
    ratio: float
    ema: float
    crossed: bool

    @property
    def sigma_critical(self) -> float:
        return sigma_critical(self.grad_norm, self.d)


def _subsample(n: int, rng: RngStream | None) -> np.ndarray | None:
    if n <= MONITOR_MAX_SAMPLES:
        return None
    u = (rng or RngStream(0)).fork(tensor_id=0x5EED).uniform(n)
    return np.sort(np.argsort(u)[:MONITOR_MAX_SAMPLES])


def monitor_step(grad, quant_cfg: BlockQuantConfig | None, d: int | None,
                 rng: RngStream | None, state: MonitorState,
                 noisy_grad=None) -> ThresholdReport:
    """Update the gradient-to-noise monitor with one step's gradient.

    The noise is ``noisy_grad - grad`` when a noisy gradient is supplied;
    otherwise ``grad`` is SR-quantized with ``quant_cfg`` and its rounding
    residual is used.  ``sigma_q`` is the residual std over at most 2**16
    elements.  ``crossed`` is set while the EMA of the ratio is below sqrt(3).
    """
    g = np.asarray(grad, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("grad must be nonempty")
    d = g.size if d is None else d
    if noisy_grad is None:
        if quant_cfg is None:
            noisy = g
        else:
            noisy = fake_quantize(g, quant_cfg.with_rounding("sr"), rng=rng or RngStream(0))
    else:
        noisy = np.asarray(noisy_grad, dtype=np.float64).ravel()
    idx = _subsample(g.size, rng)
    resid_g, resid_n = (g, noisy) if idx is None else (g[idx], noisy[idx])
    _, sigma_q = residual_stats(resid_g, resid_n)

    grad_norm = float(np.linalg.norm(g))
    ratio = noise_ratio(grad_norm, sigma_q, d)
    if math.isfinite(ratio):
        state.ema = ratio if state.ema is None else EMA_DECAY * state.ema + (1 - EMA_DECAY) * ratio
        crossed = state.ema < SQRT3
    else:
        crossed = False
    report = ThresholdReport(state.step, grad_norm, sigma_q, d, ratio,
                             math.nan if state.ema is None else state.ema, crossed)
    state.step += 1
    return report
