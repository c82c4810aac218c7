import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from misync import cli
from misync.cli import main, preset_paths, resolve_config
from misync.config import evaluate, load_config, parse_config, serialize
from misync.errors import ConfigError, StepSizeError
from misync.runner import OUTPUT_ENV, run_scenario, sweep_sync_time

pytestmark = pytest.mark.filterwarnings("ignore:.*undecided trajectories")

PRESETS = ["fig1", "fig1-superposition", "fig2", "fig3a", "fig3c", "sync-time-n5"]

MINIMAL = """
name: tiny
model: {N: 8, gamma: 0.7/pi, measured_site: 3}
initial:
  kind: mixture
  terms: [[q1, 2/5], [p, 3/5]]
integrator: {t_final: 4, seed: 7}
ensemble: {size: 50, chunk_size: 25}
outputs: {trajectories: [0, 3], lindblad: true}
"""


# ---------------------------------------------------------------- expressions


@pytest.mark.parametrize(
    "expr, value",
    [(0.5, 0.5), ("0.7/pi", 0.7 / math.pi), ("1/sqrt(2)", 1 / math.sqrt(2)), ("2**3 - 1", 7.0), ("-e", -math.e)],
)
def test_evaluate(expr, value):
    assert evaluate(expr) == pytest.approx(value, rel=1e-15)


def test_evaluate_with_variables():
    assert evaluate("25/gamma + 10*gamma + 40", {"gamma": 0.5}) == pytest.approx(95.0)


@pytest.mark.parametrize("expr", ["__import__('os')", "gamma", "sqrt", "1/", "open('x')", "[1, 2]", True])
def test_evaluate_rejects(expr):
    with pytest.raises(ConfigError):
        evaluate(expr)


# ---------------------------------------------------------------- parsing


def test_minimal_config_gets_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg["integrator"]["dt"] == 1e-3 and cfg["noise_kind"] == "quantum"
    assert cfg["analysis"]["sync_sites"] == [1, "N"]


@pytest.mark.parametrize(
    "patch, match",
    [
        ({"colour": 1}, "unknown key"),
        ({"integrator": {"t_final": 4, "tmax": 3}}, "unknown key"),
        ({"model": {"N": 8, "gamma": "0.7/pi"}}, "measured_site"),
        ({"model": {"N": 12, "gamma": 1, "measured_site": 3}}, "N"),
        ({"model": {"N": 8, "gamma": 1, "measured_site": 9}}, "measured_site"),
        ({"noise_kind": "pink"}, "noise_kind"),
        ({"integrator": {"t_final": "import os"}}, "t_final"),
        ({"ensemble": {"size": 0}}, "positive"),
        ({"ensemble": {"size": 1.5}}, "integer"),
        ({"outputs": {"lindblad": "yes"}}, "true or false"),
        ({"initial": {"kind": "mixture", "terms": [["q1"]]}}, "label, value"),
    ],
)
def test_invalid_configs(patch, match):
    import yaml

    raw = yaml.safe_load(MINIMAL)
    raw.update(patch)
    with pytest.raises(ConfigError, match=match):
        parse_config(raw)


def test_invalid_yaml():
    with pytest.raises(ConfigError):
        parse_config("model: [unclosed")
    with pytest.raises(ConfigError):
        parse_config("- just a list")


def test_sweep_variable_only_inside_sweeps():
    text = MINIMAL.replace("gamma: 0.7/pi", "gamma: gamma")
    with pytest.raises(ConfigError):
        parse_config(text)
    assert parse_config(text + "sweep: {gammas: [1, 2]}\n").sweep["gammas"] == [1, 2]


@pytest.mark.parametrize("name", PRESETS)
def test_presets_round_trip(name):
    cfg = load_config(preset_paths()[name])
    once = serialize(cfg)
    again = serialize(parse_config(once))
    assert once == again
    assert parse_config(once).data == cfg.data


@settings(max_examples=50, deadline=None)
@given(
    size=st.integers(1, 10_000),
    seed=st.integers(0, 2**63),
    dt=st.sampled_from(["1e-3", "5e-4", "1/1000"]),
    w=st.floats(0.01, 0.99),
)
def test_round_trip_is_idempotent(size, seed, dt, w):
    text = MINIMAL.replace("size: 50", f"size: {size}").replace("seed: 7", f"seed: {seed}, dt: '{dt}'")
    text = text.replace("[[q1, 2/5], [p, 3/5]]", f"[[q1, {w!r}], [p, 1 - {w!r}]]")
    once = serialize(parse_config(text))
    assert serialize(parse_config(once)) == once


def test_with_updates_revalidates():
    cfg = parse_config(MINIMAL)
    assert cfg.with_updates({"ensemble": {"size": 9}})["ensemble"]["size"] == 9
    assert cfg["ensemble"]["size"] == 50
    with pytest.raises(ConfigError):
        cfg.with_updates({"ensemble": {"bogus": 1}})


def test_all_presets_shipped():
    assert sorted(preset_paths()) == sorted(PRESETS)
    assert resolve_config("fig1").name == "fig1"
    with pytest.raises(ConfigError):
        resolve_config("fig99")


# ---------------------------------------------------------------- running


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    cfg = parse_config(MINIMAL)
    root = tmp_path_factory.mktemp("runs")
    one = run_scenario(cfg, output_dir=root / "one", workers=1)
    two = run_scenario(cfg, output_dir=root / "two", workers=2)
    return one, two


def test_run_writes_outputs(tiny_runs):
    one, _ = tiny_runs
    names = sorted(p.name for p in one.output_dir.iterdir())
    assert names == ["lindblad_mean.csv", "manifest.json", "summary.json", "trajectory_00000.csv", "trajectory_00003.csv"]
    header = (one.output_dir / "trajectory_00000.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["time", "site_1"] and header[8] == "site_8"
    assert header[-1] == "overlap_p" and "overlap_q1" in header and "overlap_q2" in header
    manifest = json.loads((one.output_dir / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["streams"]["count"] == 50
    assert set(manifest["outputs"]) == {"lindblad_mean.csv", "summary.json", "trajectory_00000.csv", "trajectory_00003.csv"}
    assert parse_config(manifest["config"]).data == parse_config(MINIMAL).data


def test_csv_rows_carry_full_precision(tiny_runs):
    one, _ = tiny_runs
    data = np.loadtxt(one.output_dir / "trajectory_00003.csv", delimiter=",", skiprows=1)
    rec = next(r for r in one.ensemble.records if r.stream_id == 3)
    np.testing.assert_array_equal(data[:, 1:9], rec.observables)
    np.testing.assert_allclose(data[:, -1], rec.overlap("p"), rtol=0, atol=1e-15)


def test_outputs_identical_across_worker_counts(tiny_runs):
    one, two = tiny_runs
    for name in ["lindblad_mean.csv", "summary.json", "trajectory_00000.csv", "trajectory_00003.csv"]:
        assert (one.output_dir / name).read_bytes() == (two.output_dir / name).read_bytes(), name


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    cfg = parse_config(MINIMAL).with_updates({"ensemble": {"size": 2}, "outputs": {"lindblad": False}})
    result = run_scenario(cfg)
    assert result.output_dir == tmp_path / "tiny"
    assert (tmp_path / "tiny" / "summary.json").exists()


def test_sync_time_from_inside_dfs_is_zero(tmp_path):
    cfg = resolve_config("sync-time-n5").with_updates(
        {"initial": {"kind": "mixture", "terms": [["q2", 1.0]]}, "integrator": {"t_final": 3}}
    )
    result = sweep_sync_time(cfg, [0.5, 5.0], output_dir=tmp_path, size=5)
    for row in result.summary["sync_time"]:
        assert row["mean"] == 0.0 and row["count"] == 5
    lines = (tmp_path / "sync_time.csv").read_text().splitlines()
    assert lines[0].startswith("gamma,mean,variance") and len(lines) == 3


# ---------------------------------------------------------------- command line


def test_cli_presets_list(capsys):
    assert main(["presets", "list"]) == 0
    out = capsys.readouterr().out
    for name in PRESETS:
        assert name in out


def test_cli_analyze(tmp_path, capsys):
    path = tmp_path / "dfs.json"
    assert main(["analyze", "--n", "8", "--site", "3", "--gamma", "0.2228", "--output", str(path)]) == 0
    report = json.loads(path.read_text())
    assert report["dims"] == [2, 2]
    assert [s["bohr_frequencies"] for s in report["subspaces"]] == [[pytest.approx(2.0, abs=1e-9)]] * 2
    np.testing.assert_allclose(report["eigenmodes"]["q1"], [1, -1, 0, -1, 1, 0, 1, -1], atol=1e-9)
    assert json.loads(capsys.readouterr().out) == report


def test_cli_run(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.yaml"
    cfg_path.write_text(MINIMAL)
    assert main(["run", str(cfg_path), "--output", str(tmp_path / "out"), "--size", "3", "--seed", "1"]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["ensemble_size"] == 3
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["seed"] == 1


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(MINIMAL + "colour: red\n")
    assert main(["run", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert main(["run", "no-such-preset"]) == 2
    assert main(["analyze", "--n", "1", "--site", "1"]) == 2


def test_cli_numerical_error_exit_code(monkeypatch, capsys):
    def failing(*args, **kwargs):
        raise StepSizeError("trajectory 4: state norm collapsed", time=1.0)

    monkeypatch.setattr(cli, "run_scenario", failing)
    assert main(["run", "fig1"]) == 3
    assert "trajectory 4" in capsys.readouterr().err
