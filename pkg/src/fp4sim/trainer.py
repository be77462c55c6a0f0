"""Toy training targets driven through the simulated quantized GEMMs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .analysis import CurvatureModel, MonitorState, ThresholdReport
from .qgemm import (
    QuantPoint,
    RoundingPolicy,
    fqt_linear_backward,
    fqt_linear_forward,
    fqt_linear_update,
)
from .rounding import RngStream

TRACE_COLUMNS = ("step", "loss", "grad_norm", "sigma_q", "ratio")


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LossTrace:
    """Per-step records; always carries the columns in ``TRACE_COLUMNS``."""

    columns: tuple[str, ...] = TRACE_COLUMNS
    rows: list[dict] = field(default_factory=list)
    diverged: bool = False

    def append(self, **row) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, math.nan) for r in self.rows], dtype=np.float64)

    @property
    def loss(self) -> np.ndarray:
        return self.column("loss")

    @property
    def final_loss(self) -> float:
        return float(self.rows[-1]["loss"]) if self.rows else math.nan

    def window_mean(self, name: str = "loss", fraction: float = 0.1) -> float:
        values = self.column(name)
        n = max(1, int(round(len(values) * fraction)))
        return float(values[-n:].mean())

    def to_csv(self, config=None) -> str:
        """CSV text: a ``# config_hash=...`` comment line, then header and rows."""
        buf = io.StringIO()
        buf.write(f"# config_hash={config_hash(config or {})}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(row.get(c, "")) for c in self.columns])
        return buf.getvalue()


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ── quadratic bowl ──────────────────────────────────────────────────────────


@dataclass
class QuadraticProblem:
    """``L(theta) = lam / 2 * |theta - theta_star|^2``."""

    d: int
    lam: float
    theta_star: np.ndarray
    theta0: np.ndarray

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        self.theta_star = np.broadcast_to(np.asarray(self.theta_star, dtype=np.float64), (self.d,)).copy()
        self.theta0 = np.broadcast_to(np.asarray(self.theta0, dtype=np.float64), (self.d,)).copy()

    @classmethod
    def make(cls, d: int, lam: float = 1.0, seed: int = 0, scale: float = 1.0) -> QuadraticProblem:
        """Optimum at the origin, start drawn from ``N(0, scale^2 I)``."""
        theta0 = scale * RngStream(seed, tensor_id=1).normal(d)
        return cls(d, lam, np.zeros(d), theta0)

    @property
    def curvature(self) -> CurvatureModel:
        return CurvatureModel.isotropic(self.lam)

    def loss(self, theta) -> float:
        e = theta - self.theta_star
        return 0.5 * self.lam * float(e @ e)

    def grad(self, theta) -> np.ndarray:
        return self.lam * (theta - self.theta_star)


def run_quadratic_sr(problem: QuadraticProblem, steps: int, k: float | None = None,
                     sigma: float | None = None, eta: float | None = None,
                     seed: int = 0) -> LossTrace:
    """Gradient descent with zero-mean Gaussian gradient noise.

    With ``k`` the noise std is recomputed every step as ``k * sigma_critical``;
    otherwise it is the fixed ``sigma``.  ``eta=None`` uses the optimal step
    size for the current gradient and noise.  Row ``t`` holds the loss after
    ``t`` updates (row 0 is the starting point).
    """
    if k is None and sigma is None:
        raise ValueError("give either k (adaptive noise) or sigma (fixed noise)")
    if k is not None and not k > 0:
        raise ValueError("k must be positive")
    H = problem.curvature
    theta = problem.theta0.copy()
    trace = LossTrace()
    noise = RngStream(seed, tensor_id=2)
    for t in range(steps + 1):
        g = problem.grad(theta)
        gn = float(np.linalg.norm(g))
        sq = k * analysis.sigma_critical(gn, problem.d) if k is not None else float(sigma)
        trace.append(step=t, loss=problem.loss(theta), grad_norm=gn, sigma_q=sq,
                     ratio=analysis.noise_ratio(gn, sq, problem.d))
        if t == steps:
            break
        if eta is not None:
            step = eta
        elif gn == 0.0:
            step = 0.0  # exactly at the optimum
        else:
            step = analysis.optimal_eta(g, H, sq)
        theta = theta - step * (g + sq * noise.fork(step=t).normal(problem.d))
        if not np.all(np.isfinite(theta)):
            trace.diverged = True
            break
    return trace


@dataclass
class BiasedRun:
    trace: LossTrace
    errors: np.ndarray
    stationary_loss: float


def run_quadratic_biased(problem: QuadraticProblem, eta: float, steps: int, mu_eps: float,
                         sigma_eps: float = 0.0, seed: int = 0) -> BiasedRun:
    """Descent with noise of mean ``mu_eps`` and std ``sigma_eps`` per coordinate.

    ``errors[t]`` is ``theta_t - theta_star``; the stationary loss is the
    mean loss over the final 10% of steps.
    """
    if eta * problem.lam >= 2:
        warnings.warn(f"eta*lam = {eta * problem.lam} >= 2: iteration diverges", RuntimeWarning)
    theta = problem.theta0.copy()
    trace = LossTrace()
    errors = [theta - problem.theta_star]
    noise = RngStream(seed, tensor_id=3)
    for t in range(steps + 1):
        g = problem.grad(theta)
        trace.append(step=t, loss=problem.loss(theta), grad_norm=float(np.linalg.norm(g)),
                     sigma_q=sigma_eps, ratio=analysis.noise_ratio(float(np.linalg.norm(g)), sigma_eps, problem.d))
        if t == steps:
            break
        eps = mu_eps + (sigma_eps * noise.fork(step=t).normal(problem.d) if sigma_eps else 0.0)
        theta = theta - eta * (g + eps)
        errors.append(theta - problem.theta_star)
        if not np.all(np.isfinite(theta)):
            trace.diverged = True
            break
    return BiasedRun(trace, np.array(errors), trace.window_mean("loss", 0.1))


# ── small MLP ───────────────────────────────────────────────────────────────


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0).astype(np.float64)


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "linear": (lambda z: z, lambda z: np.ones_like(z)),
}


class ToyNet:
    """Bias-free MLP in column layout: ``z_l = W_l a_{l-1}``, ``a_l = f(z_l)``.

    The last layer is linear.  ``loss`` is ``mse`` (half mean squared error
    per sample) or ``xent`` (softmax cross-entropy with integer labels).
    """

    def __init__(self, dims, activation: str = "relu", loss: str = "mse", seed: int = 0,
                 init_scale: float = 1.0) -> None:
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if loss not in ("mse", "xent"):
            raise ValueError(f"unknown loss {loss!r}")
        self.dims = tuple(int(d) for d in dims)
        self.activation = activation
        self.loss_name = loss
        gain = math.sqrt(2.0) if activation == "relu" else 1.0
        self.weights = []
        for l, (n_in, n_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            w = RngStream(seed, tensor_id=100 + l).normal((n_out, n_in))
            self.weights.append(init_scale * gain * w / math.sqrt(n_in))

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights)

    def copy(self) -> ToyNet:
        other = object.__new__(ToyNet)
        other.__dict__.update(self.__dict__)
        other.weights = [w.copy() for w in self.weights]
        return other

    def get_flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def set_flat(self, flat) -> None:
        offset = 0
        for i, w in enumerate(self.weights):
            self.weights[i] = np.asarray(flat[offset:offset + w.size], dtype=np.float64).reshape(w.shape).copy()
            offset += w.size

    def forward(self, X, policy: RoundingPolicy | None = None, rng: RngStream | None = None):
        policy = policy or RoundingPolicy.high_precision()
        f, _ = ACTIVATIONS[self.activation]
        acts, pre = [np.asarray(X, dtype=np.float64)], []
        last = len(self.weights) - 1
        for l, W in enumerate(self.weights):
            z = fqt_linear_forward(W, acts[-1], policy, rng, layer=l)
            pre.append(z)
            if l < last:
                acts.append(f(z))
        return pre[-1], (acts, pre)

    def loss_and_grad_output(self, out, Y) -> tuple[float, np.ndarray]:
        B = out.shape[1]
        if self.loss_name == "mse":
            diff = out - Y
            return 0.5 * float(np.sum(diff * diff)) / B, diff / B
        labels = np.asarray(Y, dtype=np.intp).ravel()
        shifted = out - out.max(axis=0, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
        loss = -float(logp[labels, np.arange(B)].mean())
        p = np.exp(logp)
        p[labels, np.arange(B)] -= 1.0
        return loss, p / B

    def backward(self, cache, g_out, policy: RoundingPolicy | None = None,
                 rng: RngStream | None = None) -> list[np.ndarray]:
        policy = policy or RoundingPolicy.high_precision()
        _, fprime = ACTIVATIONS[self.activation]
        acts, pre = cache
        grads: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        delta = g_out
        for l in range(len(self.weights) - 1, -1, -1):
            grads[l] = fqt_linear_update(delta, acts[l].T, policy, rng, layer=l)
            if l > 0:
                g_prev = fqt_linear_backward(self.weights[l], delta, policy, rng, layer=l)
                delta = fprime(pre[l - 1]) * g_prev
        return grads

    def loss(self, X, Y, policy: RoundingPolicy | None = None, rng: RngStream | None = None) -> float:
        out, _ = self.forward(X, policy, rng)
        return self.loss_and_grad_output(out, Y)[0]


def make_teacher_data(in_dim: int, out_dim: int, n: int, seed: int = 0, hidden: int = 16,
                      noise: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Regression data ``(X, Y)`` labelled by a random two-layer ReLU teacher."""
    X = RngStream(seed, tensor_id=900).normal((in_dim, n))
    teacher = ToyNet((in_dim, hidden, out_dim), "relu", seed=seed + 7919)
    Y, _ = teacher.forward(X)
    if noise:
        Y = Y + noise * RngStream(seed, tensor_id=901).normal(Y.shape)
    return X, Y


def gradcheck(net: ToyNet, data, epsilon: float = 1e-3) -> float:
    """Relative error ``max|a - n| / max(|a|, |n|)`` of backprop vs central differences.

    Normalizing by the largest gradient entry keeps near-zero entries, where
    the finite-difference truncation error dominates, from swamping the check.
    """
    X, Y = data
    out, cache = net.forward(X)
    _, g_out = net.loss_and_grad_output(out, Y)
    analytic = np.concatenate([g.ravel() for g in net.backward(cache, g_out)])
    probe = net.copy()
    flat = net.get_flat()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + epsilon
        probe.set_flat(bumped)
        f_plus = probe.loss(X, Y)
        bumped[i] = flat[i] - epsilon
        probe.set_flat(bumped)
        f_minus = probe.loss(X, Y)
        numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


@dataclass
class TrainSchedule:
    """Step budget, learning rate and optional precision switch.

    After the switch (at ``switch_step``, or when the monitor first reports a
    crossing if ``switch_on_threshold``) the backward and update operands run
    at full precision.  With ``qaf_warmup`` set, the learning rate is reset
    at the switch: linear warmup to ``lr`` then cosine decay to ``lr_min``.
    """

    steps: int
    lr: float = 0.05
    switch_step: int | None = None
    switch_on_threshold: bool = False
    qaf_warmup: int | None = None
    lr_min: float = 0.0
    qaf_include_weight: bool = True
    batch_size: int | None = None

    def __post_init__(self) -> None:
        if self.switch_step is not None and not 0 <= self.switch_step <= self.steps:
            raise ValueError("switch_step must lie in [0, steps]")
        if self.qaf_warmup is not None and self.switch_step is not None:
            if self.qaf_warmup > self.steps - self.switch_step:
                raise ValueError("warmup longer than the steps left after the switch")

    def lr_at(self, step: int, switched_at: int | None) -> float:
        if switched_at is None or self.qaf_warmup is None:
            return self.lr
        t = step - switched_at
        if t < self.qaf_warmup:
            return self.lr * (t + 1) / self.qaf_warmup
        span = max(1, self.steps - switched_at - self.qaf_warmup)
        frac = min(1.0, (t - self.qaf_warmup) / span)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainResult:
    trace: LossTrace
    net: ToyNet
    reports: list[ThresholdReport]
    switched_at: int | None

    @property
    def first_crossing(self) -> int | None:
        for r in self.reports:
            if r.crossed:
                return r.step
        return None


TOYNET_COLUMNS = TRACE_COLUMNS + ("ema", "crossed", "lr", "phase")


def train_toynet(net: ToyNet, data, policy: RoundingPolicy, schedule: TrainSchedule,
                 seed: int = 0, monitor: bool = True) -> TrainResult:
    """Plain SGD with every linear-layer GEMM routed through ``policy``.

    ``net`` is trained in place.  Each step also computes the full-precision
    backward pass on the same (quantized) forward to measure the gradient
    noise ``sigma_q`` and the gradient-to-noise ratio.
    """
    X, Y = data
    n = X.shape[1]
    trace = LossTrace(columns=TOYNET_COLUMNS)
    state = MonitorState()
    reports: list[ThresholdReport] = []
    switched_at = schedule.switch_step if schedule.switch_step == 0 else None
    post_policy = policy.qaf(include_weight=schedule.qaf_include_weight)
    d = net.num_params

    for t in range(schedule.steps):
        active = post_policy if switched_at is not None else policy
        rng = RngStream(seed, step=t)
        if schedule.batch_size:
            perm = np.argsort(RngStream(seed, tensor_id=7, step=t).uniform(n))[:schedule.batch_size]
            xb, yb = X[:, perm], (Y[:, perm] if np.ndim(Y) == 2 else np.asarray(Y)[perm])
        else:
            xb, yb = X, Y
        out, cache = net.forward(xb, active, rng)
        loss, g_out = net.loss_and_grad_output(out, yb)
        if not math.isfinite(loss):
            trace.diverged = True
            break
        grads = net.backward(cache, g_out, active, rng)
        g_q = np.concatenate([g.ravel() for g in grads])
        if monitor:
            if active.qaf() == active:
                g_hp = g_q
            else:
                g_hp = np.concatenate([g.ravel() for g in net.backward(cache, g_out, active.qaf(), rng)])
            rep = analysis.monitor_step(g_hp, None, d, rng, state, noisy_grad=g_q)
            reports.append(rep)
            row = dict(grad_norm=rep.grad_norm, sigma_q=rep.sigma_q, ratio=rep.ratio,
                       ema=rep.ema, crossed=rep.crossed)
        else:
            row = dict(grad_norm=float(np.linalg.norm(g_q)), sigma_q=math.nan, ratio=math.nan,
                       ema=math.nan, crossed=False)
        lr = schedule.lr_at(t, switched_at)
        trace.append(step=t, loss=loss, lr=lr, phase="qaf" if switched_at is not None else "fqt", **row)
        for i, g in enumerate(grads):
            net.weights[i] = net.weights[i] - lr * g
        if switched_at is None:
            if schedule.switch_step is not None and t + 1 >= schedule.switch_step:
                switched_at = t + 1
            elif schedule.switch_on_threshold and monitor and reports[-1].crossed:
                switched_at = t + 1
    return TrainResult(trace, net, reports, switched_at)


def sr_ablation(dims, data, steps: int, lr: float, seed: int = 0, base=None,
                activation: str = "relu") -> dict[str, float]:
    """Final loss with SR at exactly one operand position (RtN elsewhere)."""
    from .blockquant import NVFP4

    base = base or NVFP4
    results = {}
    for point in QuantPoint:
        net = ToyNet(dims, activation, seed=seed)
        res = train_toynet(net, data, RoundingPolicy.single_sr(point, base),
                           TrainSchedule(steps, lr), seed=seed, monitor=False)
        results[point.value] = res.trace.final_loss if not res.trace.diverged else math.inf
    return results
