"""Command-line entry point: ``fp4sim run|verify|formats|quant-error``."""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from . import experiments
from .blockquant import block_quant_error, parse_block_config
from .experiments import ERROR_METRICS, ExperimentSpec, SpecError, gaussian_tensor, load_tensor
from .minifloat import E2M1, E4M3, E4M3FN, E8M0U, SCALE_SWEEP, FormatError, enumerate_grid, parse_format
from .qgemm import parse_policy
from .rounding import RngStream, RoundingMode
from .verify import SUITES, run_suite


def bundled_specs() -> dict[str, Path]:
    root = resources.files("fp4sim") / "specs"
    return {p.name[:-5]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


def _load_spec(ref: str) -> ExperimentSpec:
    path = Path(ref)
    if not path.exists():
        specs = bundled_specs()
        if ref not in specs:
            raise SpecError(f"no spec file {ref!r} and no bundled spec of that name "
                            f"(bundled: {', '.join(sorted(specs))})")
        path = specs[ref]
    return ExperimentSpec.load(path)


def cmd_run(args) -> int:
    spec = _load_spec(args.spec)
    params = dict(spec.params)
    if args.seed is not None:
        spec.seeds = [args.seed]
    if args.rounding is not None:
        if "rounding" not in experiments.DEFAULTS[spec.experiment]:
            raise SpecError(f"--rounding does not apply to {spec.experiment}")
        params["rounding"] = RoundingMode.parse(args.rounding).value
    if args.switch_step is not None:
        params["switch_step"] = args.switch_step
    if args.switch_on_threshold:
        params["switch_on_threshold"] = True
        if args.switch_step is None:
            params["switch_step"] = None
    spec = ExperimentSpec(spec.experiment, params, spec.seeds, spec.output)
    overrides = {}
    if args.policy is not None:
        base = parse_block_config(spec.resolved()["params"].get("block", "nvfp4"))
        overrides["policy"] = parse_policy(args.policy, base)
    outcome = experiments.run_experiment(spec, args.output, jobs=args.jobs,
                                         allow_divergence=args.allow_divergence, overrides=overrides)
    diverged = outcome.summary["diverged"]
    print(f"{spec.experiment}: {len(outcome.summary['runs'])} runs written to {outcome.output_dir}")
    if diverged:
        print(f"diverged: {', '.join(diverged)}" + ("" if args.allow_divergence else " (use --allow-divergence)"))
    return outcome.status


def cmd_verify(args) -> int:
    results = run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_formats(args) -> int:
    fmts = [E2M1, E4M3, E4M3FN, E8M0U] + [f for f in SCALE_SWEEP if f not in (E4M3, E8M0U)]
    if args.format:
        fmts = [parse_format(args.format)]
    print("format,width,bias,codes,values,max,min_positive")
    for f in fmts:
        g = enumerate_grid(f)
        pos = g.positive().values
        print(f"{f.name},{f.width},{f.bias},{f.num_codes},{len(g)},{float(g.max_normal)!r},{float(pos[0])!r}")
    return 0


def cmd_quant_error(args) -> int:
    if args.data:
        x = load_tensor(args.data)
    else:
        x = gaussian_tensor(args.shape, args.seed, args.octaves)
    rows = []
    for text in args.config:
        cfg = parse_block_config(text)
        if args.rounding:
            cfg = cfg.with_rounding(args.rounding)
        rng = RngStream(args.seed, tensor_id=502)
        rows.append([cfg.label] + [block_quant_error(x, cfg, args.axis, m, rng) for m in ERROR_METRICS])
    if args.json:
        print(json.dumps([dict(zip(("config",) + ERROR_METRICS, r)) for r in rows], indent=2))
    else:
        print("config," + ",".join(ERROR_METRICS))
        for r in rows:
            print(f"\"{r[0]}\"," + ",".join(repr(float(v)) for v in r[1:]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fp4sim", description="Block-scaled FP4 training numerics simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment spec (JSON file or bundled spec name)")
    run.add_argument("spec")
    run.add_argument("--output", "-o", help=f"output directory (default ${experiments.OUTPUT_ENV}/<experiment>)")
    run.add_argument("--seed", type=int, help="run only this seed")
    run.add_argument("--jobs", type=int, default=1, help="parallel cells")
    run.add_argument("--rounding", help="element rounding for sweep experiments: rtn|sr|none")
    run.add_argument("--policy", help="paper|rtn|sr|none or six point=mode entries")
    run.add_argument("--switch-step", type=int, help="step at which backward/update go to full precision")
    run.add_argument("--switch-on-threshold", action="store_true", help="switch when the monitor crosses sqrt(3)")
    run.add_argument("--allow-divergence", action="store_true", help="exit 0 even if some run diverged")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run built-in property checks")
    ver.add_argument("suite", choices=sorted(SUITES) + ["all"])
    ver.set_defaults(func=cmd_verify)

    fm = sub.add_parser("formats", help="format utilities")
    fm_sub = fm.add_subparsers(dest="action", required=True)
    fl = fm_sub.add_parser("list", help="list minifloat formats and their ranges")
    fl.add_argument("--format", help="show a single format literal, e.g. E3M4 or E8M0u")
    fl.set_defaults(func=cmd_formats)

    qe = sub.add_parser("quant-error", help="block quantization error of a tensor")
    qe.add_argument("--data", help=".npy or CSV file; default is a generated Gaussian tensor")
    qe.add_argument("--shape", type=int, nargs="+", default=[1000, 1000])
    qe.add_argument("--octaves", type=float, nargs=2, default=[0.0, 0.0],
                    help="per-row scale 2**U(lo, hi) for the generated tensor")
    qe.add_argument("--config", nargs="+", default=["nvfp4", "mxfp4"], help="block configs, e.g. nvfp4,block=32")
    qe.add_argument("--axis", type=int, default=-1)
    qe.add_argument("--rounding", help="rtn|sr")
    qe.add_argument("--seed", type=int, default=0)
    qe.add_argument("--json", action="store_true")
    qe.set_defaults(func=cmd_quant_error)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
