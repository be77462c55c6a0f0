"""Experiment protocols behind ``fp4sim run``: parameter grids in, CSV and JSON out.

Each protocol expands its parameters into independent cells.  A cell owns its
RNG streams and produces one CSV; cells may run in parallel processes and are
always written back in grid order, so output bytes never depend on ``jobs``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .analysis import biased_fixed_point
from .blockquant import BlockQuantConfig, block_quant_error, parse_block_config
from .minifloat import SCALE_SWEEP, parse_format
from .qgemm import RoundingPolicy, parse_policy
from .rounding import RngStream, RoundingMode
from .trainer import (
    QuadraticProblem,
    ToyNet,
    TrainSchedule,
    config_hash,
    make_teacher_data,
    run_quadratic_biased,
    run_quadratic_sr,
    train_toynet,
)

OUTPUT_ENV = "FP4SIM_OUTPUT_DIR"
ERROR_METRICS = ("rmse", "nrmse", "max_abs", "clip_fraction")

EXPERIMENTS = ("format-sweep", "block-sweep", "sr-ablation", "quadratic-sr",
               "quadratic-biased", "switch-run", "quant-error")

# Toy-scale defaults; the large-model hyperparameters are not available.
DEFAULTS: dict[str, dict[str, Any]] = {
    "format-sweep": {
        "mode": "quant-error", "data_format": "E2M1", "scales": [f.name for f in SCALE_SWEEP],
        "block_size": 16, "rounding": "rtn", "shape": [1000, 1000], "octaves": [-4.0, 6.0],
        "model": [4, 32, 1], "n": 256, "noise": 0.5, "steps": 500, "lr": 0.1,
    },
    "block-sweep": {
        "mode": "quant-error", "data_format": "E2M1", "scale_format": "E4M3",
        "block_sizes": [8, 16, 32, 64, 128], "rounding": "rtn", "shape": [1000, 1000],
        "octaves": [-4.0, 6.0], "model": [4, 32, 1], "n": 256, "noise": 0.5, "steps": 500, "lr": 0.1,
    },
    "sr-ablation": {
        "block": "nvfp4", "model": [4, 32, 1], "n": 256, "noise": 0.5, "steps": 1000, "lr": 0.1,
        "activation": "relu",
    },
    "quadratic-sr": {"d": 100, "lam": 1.0, "ks": [2.0, 1.0, 0.5], "baseline": True, "steps": 2000,
                     "eta": None, "scale": 1.0},
    "quadratic-biased": {"d": 1, "lam": 1.0, "eta": 0.1, "mu_eps": 0.1, "sigma_eps": [0.0, 0.01],
                         "steps": 2000, "e0": 1.0},
    "switch-run": {
        "block": "nvfp4", "policy": "paper", "model": [4, 32, 1], "teacher_hidden": 16, "n": 256,
        "noise": 0.5, "steps": 2000, "lr": 0.1, "switch_step": 1000, "switch_on_threshold": False,
        "qaf_warmup": None, "lr_min": 0.0, "qaf_include_weight": True, "activation": "relu",
        "window": 50, "horizon": 500,
    },
    "quant-error": {"configs": ["nvfp4", "mxfp4"], "shape": [1000, 1000], "octaves": [0.0, 0.0],
                    "data": None, "axis": -1, "rounding": "rtn"},
}


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    experiment: str
    params: dict[str, Any] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    output: str | None = None

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise SpecError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        unknown = set(self.params) - set(DEFAULTS[self.experiment])
        if unknown:
            raise SpecError(f"unknown parameters for {self.experiment}: {sorted(unknown)}")
        if not self.seeds:
            raise SpecError("seeds must be nonempty")
        self.seeds = [int(s) for s in self.seeds]

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentSpec:
        data = dict(data)
        if "experiment" not in data:
            raise SpecError("spec needs an 'experiment' field")
        extra = set(data) - {"experiment", "params", "seeds", "output"}
        if extra:
            raise SpecError(f"unknown spec fields: {sorted(extra)}")
        return cls(data["experiment"], data.get("params", {}), data.get("seeds", [0]), data.get("output"))

    @classmethod
    def load(cls, path: str | os.PathLike) -> ExperimentSpec:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def resolved(self) -> dict[str, Any]:
        params = {**DEFAULTS[self.experiment], **self.params}
        return {"experiment": self.experiment, "params": params, "seeds": list(self.seeds)}


@dataclass
class CellResult:
    name: str
    csv_text: str
    metrics: dict[str, Any]
    diverged: bool = False


@dataclass
class RunOutcome:
    output_dir: Path
    summary: dict[str, Any]
    status: int


# ── data helpers ──


def gaussian_tensor(shape, seed: int, octaves=(0.0, 0.0)) -> np.ndarray:
    """Standard normal rows, each scaled by ``2**u`` with ``u ~ U(octaves)``."""
    shape = tuple(int(s) for s in shape)
    x = RngStream(seed, tensor_id=500).normal(shape)
    lo, hi = float(octaves[0]), float(octaves[1])
    if hi > lo and x.ndim >= 1:
        u = lo + (hi - lo) * RngStream(seed, tensor_id=501).uniform(shape[0])
        x = x * (2.0 ** u).reshape((-1,) + (1,) * (x.ndim - 1))
    return x


def load_tensor(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path).astype(np.float64)
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)


def _table_csv(columns, rows, config) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash(config)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _finite(x) -> float | None:
    """JSON-safe float: non-finite values become null."""
    return float(x) if x is not None and math.isfinite(x) else None


def _toy_data(p: dict, seed: int):
    dims = p["model"]
    return make_teacher_data(dims[0], dims[-1], p["n"], seed=seed, hidden=p.get("teacher_hidden", 16),
                             noise=p["noise"])


def _train_cell(name: str, p: dict, seed: int, policy: RoundingPolicy, schedule: TrainSchedule,
                monitor: bool = True) -> CellResult:
    data = _toy_data(p, seed)
    net = ToyNet(p["model"], p.get("activation", "relu"), seed=seed + 1)
    res = train_toynet(net, data, policy, schedule, seed=seed, monitor=monitor)
    cfg = {"cell": name, "seed": seed, "policy": policy.literal(), **p}
    metrics = {"final_loss": _finite(res.trace.final_loss),
               "tail_loss": _finite(res.trace.window_mean("loss", 0.1)),
               "first_crossing": res.first_crossing, "switched_at": res.switched_at}
    return CellResult(name, res.trace.to_csv(cfg), metrics, res.trace.diverged)


# ── cells ──


def _static_cell(name: str, p: dict, seed: int, cfg: BlockQuantConfig) -> CellResult:
    x = gaussian_tensor(p["shape"], seed, p["octaves"])
    rng = RngStream(seed, tensor_id=502)
    values = {m: block_quant_error(x, cfg, -1, m, rng) for m in ERROR_METRICS}
    row = [cfg.data_format.name, cfg.scale_format.name, cfg.block_size, cfg.element_rounding.value, seed]
    row += [values[m] for m in ERROR_METRICS]
    columns = ("data_format", "scale_format", "block_size", "rounding", "seed") + ERROR_METRICS
    text = _table_csv(columns, [row], {"cell": name, "seed": seed, "config": cfg.label, **p})
    return CellResult(name, text, values, diverged=not all(math.isfinite(v) for v in values.values()))


def _cells_format_sweep(p: dict, seeds, overrides) -> list[tuple[str, Callable, tuple]]:
    cells = []
    for scale in p["scales"]:
        cfg = BlockQuantConfig(parse_format(p["data_format"]), parse_format(scale), int(p["block_size"]),
                               RoundingMode.parse(p["rounding"]))
        for seed in seeds:
            name = f"scale-{scale}_seed-{seed}"
            if p["mode"] == "quant-error":
                cells.append((name, _static_cell, (name, p, seed, cfg)))
            else:
                policy = overrides.get("policy") or RoundingPolicy.paper(cfg)
                cells.append((name, _train_cell, (name, p, seed, policy, TrainSchedule(p["steps"], p["lr"]), False)))
    return cells


def _cells_block_sweep(p: dict, seeds, overrides):
    cells = []
    for bs in p["block_sizes"]:
        cfg = BlockQuantConfig(parse_format(p["data_format"]), parse_format(p["scale_format"]), int(bs),
                               RoundingMode.parse(p["rounding"]))
        for seed in seeds:
            name = f"block-{bs}_seed-{seed}"
            if p["mode"] == "quant-error":
                cells.append((name, _static_cell, (name, p, seed, cfg)))
            else:
                policy = overrides.get("policy") or RoundingPolicy.paper(cfg)
                cells.append((name, _train_cell, (name, p, seed, policy, TrainSchedule(p["steps"], p["lr"]), False)))
    return cells


def _cells_sr_ablation(p: dict, seeds, overrides):
    from .qgemm import QuantPoint

    base = parse_block_config(p["block"])
    variants = [("all-rtn", RoundingPolicy.uniform(base, "rtn"))]
    variants += [(f"sr-{pt.value}", RoundingPolicy.single_sr(pt, base)) for pt in QuantPoint]
    variants += [("paper", RoundingPolicy.paper(base)), ("high-precision", RoundingPolicy.high_precision())]
    return [(f"{label}_seed-{seed}", _train_cell,
             (f"{label}_seed-{seed}", p, seed, pol, TrainSchedule(p["steps"], p["lr"]), False))
            for label, pol in variants for seed in seeds]


def _quad_cell(name: str, p: dict, seed: int, k: float | None) -> CellResult:
    prob = QuadraticProblem.make(p["d"], p["lam"], seed=seed, scale=p["scale"])
    if k is None:
        trace = run_quadratic_sr(prob, p["steps"], sigma=0.0, eta=p["eta"], seed=seed)
    else:
        trace = run_quadratic_sr(prob, p["steps"], k=k, eta=p["eta"], seed=seed)
    cfg = {"cell": name, "seed": seed, "k": k, **p}
    loss = trace.loss
    metrics = {"final_loss": _finite(trace.final_loss), "initial_loss": _finite(loss[0])}
    return CellResult(name, trace.to_csv(cfg), metrics, trace.diverged)


def _cells_quadratic_sr(p: dict, seeds, overrides):
    ks = [None] if p["baseline"] else []
    ks += [float(k) for k in p["ks"]]
    cells = []
    for k in ks:
        label = "baseline" if k is None else f"k-{k:g}"
        for seed in seeds:
            cells.append((f"{label}_seed-{seed}", _quad_cell, (f"{label}_seed-{seed}", p, seed, k)))
    return cells


def _biased_cell(name: str, p: dict, seed: int, sigma: float) -> CellResult:
    prob = QuadraticProblem(p["d"], p["lam"], 0.0, p["e0"])
    run = run_quadratic_biased(prob, p["eta"], p["steps"], p["mu_eps"], sigma, seed=seed)
    _, _, e_inf, L_inf = biased_fixed_point(p["lam"], p["eta"], p["mu_eps"], p["e0"], 0)
    metrics = {"stationary_loss": _finite(run.stationary_loss),
               "L_inf_per_coord": L_inf, "L_inf": L_inf * p["d"], "e_inf": e_inf}
    if sigma == 0:
        closed = np.array([biased_fixed_point(p["lam"], p["eta"], p["mu_eps"], p["e0"], n)[0]
                           for n in range(len(run.errors))])
        err = np.abs(run.errors[:, 0] - closed) / np.maximum(np.abs(closed), 1e-300)
        metrics["max_rel_error_closed_form"] = float(err.max())
    cfg = {"cell": name, "seed": seed, "sigma_eps": sigma, **p}
    return CellResult(name, run.trace.to_csv(cfg), metrics, run.trace.diverged)


def _cells_quadratic_biased(p: dict, seeds, overrides):
    sigmas = p["sigma_eps"] if isinstance(p["sigma_eps"], list) else [p["sigma_eps"]]
    return [(f"sigma-{s:g}_seed-{seed}", _biased_cell, (f"sigma-{s:g}_seed-{seed}", p, seed, float(s)))
            for s in sigmas for seed in seeds]


def _cells_switch_run(p: dict, seeds, overrides):
    base = parse_block_config(p["block"])
    policy = overrides.get("policy") or parse_policy(p["policy"], base)
    sched = TrainSchedule(p["steps"], p["lr"], switch_step=p["switch_step"],
                          switch_on_threshold=p["switch_on_threshold"], qaf_warmup=p["qaf_warmup"],
                          lr_min=p["lr_min"], qaf_include_weight=p["qaf_include_weight"])
    cells = []
    for seed in seeds:
        cells.append((f"baseline_seed-{seed}", _train_cell,
                      (f"baseline_seed-{seed}", p, seed, RoundingPolicy.high_precision(),
                       TrainSchedule(p["steps"], p["lr"]), False)))
        cells.append((f"fqt_seed-{seed}", _train_cell, (f"fqt_seed-{seed}", p, seed, policy, sched, True)))
    return cells


def _quant_error_cell(name: str, p: dict, seed: int, cfg: BlockQuantConfig) -> CellResult:
    if p["data"]:
        x = load_tensor(p["data"])
    else:
        x = gaussian_tensor(p["shape"], seed, p["octaves"])
    rng = RngStream(seed, tensor_id=502)
    values = {m: block_quant_error(x, cfg, int(p["axis"]), m, rng) for m in ERROR_METRICS}
    columns = ("config", "seed", "numel") + ERROR_METRICS
    row = [cfg.label, seed, int(x.size)] + [values[m] for m in ERROR_METRICS]
    return CellResult(name, _table_csv(columns, [row], {"cell": name, "seed": seed, **p}), values)


def _cells_quant_error(p: dict, seeds, overrides):
    cells = []
    for i, text in enumerate(p["configs"]):
        cfg = parse_block_config(text).with_rounding(p["rounding"])
        for seed in seeds:
            name = f"cfg-{i}_seed-{seed}"
            cells.append((name, _quant_error_cell, (name, p, seed, cfg)))
    return cells


_CELLS = {
    "format-sweep": _cells_format_sweep,
    "block-sweep": _cells_block_sweep,
    "sr-ablation": _cells_sr_ablation,
    "quadratic-sr": _cells_quadratic_sr,
    "quadratic-biased": _cells_quadratic_biased,
    "switch-run": _cells_switch_run,
    "quant-error": _cells_quant_error,
}


# ── summaries ──


def _mean_by(results: list[CellResult], key: Callable[[str], str], metric: str) -> dict[str, float | None]:
    groups: dict[str, list[float]] = {}
    for r in results:
        v = r.metrics.get(metric)
        groups.setdefault(key(r.name), []).append(math.nan if v is None else v)
    return {k: _finite(float(np.mean(v))) for k, v in groups.items()}


def _label(name: str) -> str:
    return name.rsplit("_seed-", 1)[0]


def _summarize(experiment: str, p: dict, results: list[CellResult]) -> dict:
    if experiment in ("format-sweep", "block-sweep"):
        metric = "rmse" if p["mode"] == "quant-error" else "tail_loss"
        means = _mean_by(results, _label, metric)
        ranked = sorted(means, key=lambda k: math.inf if means[k] is None else means[k])
        return {"metric": metric, "mean": means, "ranking": ranked}
    if experiment == "quant-error":
        labels = {f"cfg-{i}": parse_block_config(t).with_rounding(p["rounding"]).label
                  for i, t in enumerate(p["configs"])}
        return {"configs": labels, "mean": {m: _mean_by(results, _label, m) for m in ERROR_METRICS}}
    if experiment == "sr-ablation":
        return {"final_loss": _mean_by(results, _label, "tail_loss")}
    if experiment == "quadratic-sr":
        return quadratic_sr_summary(results)
    if experiment == "quadratic-biased":
        out = {"stationary_loss": _mean_by(results, _label, "stationary_loss"),
               "L_inf": results[0].metrics["L_inf"], "e_inf": results[0].metrics["e_inf"]}
        errs = [r.metrics["max_rel_error_closed_form"] for r in results if "max_rel_error_closed_form" in r.metrics]
        if errs:
            out["max_rel_error_closed_form"] = max(errs)
        return out
    if experiment == "switch-run":
        return switch_summary(p, results)
    raise AssertionError(experiment)


def _trace_loss(csv_text: str) -> np.ndarray:
    lines = [ln for ln in csv_text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return np.array([float(row["loss"]) for row in reader])


def quadratic_sr_summary(results: list[CellResult]) -> dict:
    """Mean-over-seeds traces: final loss per label and the plateau measure."""
    traces: dict[str, list[np.ndarray]] = {}
    for r in results:
        traces.setdefault(_label(r.name), []).append(r.metrics["_loss"])
    out: dict[str, Any] = {"final_loss": {}, "plateau_rel_change": {}}
    for label, arrs in traces.items():
        mean = np.mean(np.stack(arrs), axis=0)
        n = len(mean) - 1
        start = mean[int(round(0.75 * n))]
        out["final_loss"][label] = float(mean[-1])
        out["plateau_rel_change"][label] = _finite(abs(mean[-1] - start) / start) if start > 0 else None
    return out


def switch_summary(p: dict, results: list[CellResult]) -> dict:
    """Loss gap between FQT and baseline, seed-averaged and smoothed over ``window`` steps."""
    base = [r.metrics["_loss"] for r in results if r.name.startswith("baseline")]
    fqt = [r for r in results if r.name.startswith("fqt")]
    switched = [r.metrics["switched_at"] for r in fqt]
    out: dict[str, Any] = {"first_crossing": {r.name: r.metrics["first_crossing"] for r in fqt},
                           "switched_at": {r.name: s for r, s in zip(fqt, switched)}}
    if any(r.diverged for r in results) or any(s is None for s in switched):
        out["gap_shrink"] = None
        return out
    n = min(len(a) for a in base + [r.metrics["_loss"] for r in fqt])
    gap = np.mean([f.metrics["_loss"][:n] for f in fqt], axis=0) - np.mean([b[:n] for b in base], axis=0)
    w = int(p["window"])

    def smooth(i: int) -> float:
        return float(gap[max(0, i - w + 1):i + 1].mean())

    s = int(round(np.mean(switched)))
    after = min(n - 1, s + int(p["horizon"]) - 1)
    g0, g1 = smooth(s - 1), smooth(after)
    out.update(gap_at_switch=g0, gap_after=g1, horizon=int(p["horizon"]),
               gap_shrink=_finite(1.0 - g1 / g0) if g0 > 0 else None)
    return out


# ── driver ──


def _run_cell(job):
    fn, args = job
    res = fn(*args)
    if res.csv_text.splitlines()[1].split(",")[1:2] == ["loss"]:
        res.metrics["_loss"] = _trace_loss(res.csv_text)
    return res


def default_output_dir(experiment: str) -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "fp4sim_out")) / experiment


def run_experiment(spec: ExperimentSpec, output: str | os.PathLike | None = None, jobs: int = 1,
                   allow_divergence: bool = False, overrides: dict | None = None) -> RunOutcome:
    """Run every cell of ``spec`` and write CSVs, ``summary.json`` and ``manifest.json``.

    ``overrides`` may carry a ``policy`` (RoundingPolicy) replacing the
    spec's policy for training protocols.  The returned status is 1 when
    any cell diverged and divergence is not allowed, else 0.
    """
    overrides = overrides or {}
    resolved = spec.resolved()
    p = resolved["params"]
    if "policy" in overrides:
        resolved["policy_override"] = overrides["policy"].literal()
    out_dir = Path(output or spec.output or default_output_dir(spec.experiment))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SpecError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise SpecError(f"output directory {out_dir} is not writable")

    cells = _CELLS[spec.experiment](p, spec.seeds, overrides)
    jobs_list = [(fn, args) for _, fn, args in cells]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, jobs_list))
    else:
        results = [_run_cell(j) for j in jobs_list]

    files = {}
    for r in results:
        path = out_dir / f"{r.name}.csv"
        path.write_text(r.csv_text)
        files[r.name] = path.name
    summary = _summarize(spec.experiment, p, results)
    diverged = [r.name for r in results if r.diverged]
    summary = {"experiment": spec.experiment, "config_hash": config_hash(resolved), "diverged": diverged,
               "runs": {r.name: {k: v for k, v in r.metrics.items() if not k.startswith("_")} for r in results},
               **summary}
    manifest = {"config": resolved, "config_hash": config_hash(resolved), "files": files}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    status = 1 if diverged and not allow_divergence else 0
    return RunOutcome(out_dir, summary, status)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)
