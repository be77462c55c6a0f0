import json

import pytest

from fp4sim.experiments import DEFAULTS, EXPERIMENTS, ExperimentSpec, SpecError, run_experiment

SMALL = {
    "format-sweep": {"shape": [32, 64]},
    "block-sweep": {"shape": [32, 64]},
    "sr-ablation": {"steps": 10, "n": 16},
    "quadratic-sr": {"steps": 30, "d": 8},
    "quadratic-biased": {"steps": 50},
    "switch-run": {"steps": 40, "switch_step": 20, "horizon": 10, "window": 5, "n": 16},
    "quant-error": {"shape": [16, 64]},
}


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.mark.parametrize("experiment", EXPERIMENTS)
def test_small_run_writes_outputs(tmp_path, experiment):
    out = run_experiment(ExperimentSpec(experiment, SMALL[experiment], [0]), tmp_path)
    assert out.status == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"summary.json", "manifest.json"} <= names
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest["files"].values()) == names - {"summary.json", "manifest.json"}
    for f in manifest["files"].values():
        assert (tmp_path / f).read_text().startswith("# config_hash=")


@pytest.mark.parametrize("experiment", ["block-sweep", "switch-run", "quadratic-sr"])
def test_parallel_matches_serial_bytewise(tmp_path, experiment):
    spec = ExperimentSpec(experiment, SMALL[experiment], [0, 1])
    run_experiment(spec, tmp_path / "a", jobs=1)
    run_experiment(spec, tmp_path / "b", jobs=2)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_seed_changes_output(tmp_path):
    run_experiment(ExperimentSpec("quant-error", SMALL["quant-error"], [0]), tmp_path / "a")
    run_experiment(ExperimentSpec("quant-error", SMALL["quant-error"], [1]), tmp_path / "b")
    assert (tmp_path / "a" / "cfg-0_seed-0.csv").read_text() != (tmp_path / "b" / "cfg-0_seed-1.csv").read_text()


def test_block_sweep_ranking_orders_small_blocks_first(tmp_path):
    out = run_experiment(ExperimentSpec("block-sweep", {"shape": [64, 256]}, [0]), tmp_path)
    m = out.summary["mean"]
    assert m["block-8"] <= m["block-16"] <= m["block-128"]


def test_quadratic_biased_summary(tmp_path):
    out = run_experiment(ExperimentSpec("quadratic-biased", {"steps": 300}, [0]), tmp_path)
    assert out.summary["max_rel_error_closed_form"] <= 1e-10
    assert out.summary["L_inf"] == pytest.approx(0.005)


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("FP4SIM_OUTPUT_DIR", str(tmp_path))
    out = run_experiment(ExperimentSpec("quant-error", SMALL["quant-error"], [0]))
    assert out.output_dir == tmp_path / "quant-error"


@pytest.mark.parametrize("data", [
    {"experiment": "nope"},
    {"experiment": "block-sweep", "params": {"bogus": 1}},
    {"experiment": "block-sweep", "extra": 1},
    {"params": {}},
    {"experiment": "block-sweep", "seeds": []},
])
def test_spec_errors(data):
    with pytest.raises(SpecError):
        ExperimentSpec.from_dict(data)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SpecError):
        run_experiment(ExperimentSpec("quant-error", SMALL["quant-error"]), blocker / "sub")


def test_defaults_cover_every_experiment():
    assert set(DEFAULTS) == set(EXPERIMENTS)
