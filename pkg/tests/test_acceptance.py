"""Acceptance suite: the twelve headline checks at full ensemble size.

Each test records one PASS/FAIL line (shown in the terminal summary) before
asserting.  The long ensembles are session fixtures shared between checks;
everything here is marked ``slow`` and can be skipped with ``-m "not slow"``.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from misync.analysis import single_crossover
from misync.chain import InitialStateSpec, realize_initial_state
from misync.cli import resolve_config
from misync.engine import IntegratorConfig, evolve_lindblad, simulate_ensemble
from misync.linalg import trace_distance
from misync.runner import analyze, prepare, run_fidelity_sweep, run_scenario, sweep_sync_time

pytestmark = [pytest.mark.slow, pytest.mark.filterwarnings("ignore:.*undecided trajectories")]

TESTS = Path(__file__).parent
SQ5 = math.sqrt(5)


def binomial_ok(count, m, p):
    return abs(count / m - p) <= 3 * math.sqrt(p * (1 - p) / m)


@pytest.fixture(scope="session")
def fig1(tmp_path_factory):
    t0 = time.perf_counter()
    result = run_scenario(resolve_config("fig1"), output_dir=tmp_path_factory.mktemp("fig1"))
    result.summary["elapsed"] = time.perf_counter() - t0
    return result


# ---------------------------------------------------------------- DFS structure


def test_c1_dfs_structure_eight_sites(verdict):
    t0 = time.perf_counter()
    rep = analyze(8, 3, gamma=0.7 / math.pi)
    elapsed = time.perf_counter() - t0
    subs = rep["subspaces"]
    ok = (
        rep["dims"] == [2, 2]
        and sorted(round(s["c_normalized"], 9) for s in subs) == [-1.0, 1.0]
        and all(len(s["bohr_frequencies"]) == 1 and abs(s["bohr_frequencies"][0] - 2.0) <= 1e-9 for s in subs)
        and elapsed < 5
    )
    detail = f"dims {rep['dims']}, freqs {[s['bohr_frequencies'] for s in subs]}, {elapsed:.2f} s"
    assert verdict(1, "N=8 DFS structure", ok, detail)


def test_c2_dfs_structure_nine_sites(verdict):
    t0 = time.perf_counter()
    rep = analyze(9, 5, gamma=0.1)
    elapsed = time.perf_counter() - t0
    target = np.array([1.0, SQ5 - 1, SQ5, SQ5 + 1])
    eight = [s for s in rep["subspaces"] if s["dim"] == 8]
    ok = (
        len(eight) == 2
        and sorted(round(s["c_normalized"], 9) for s in eight) == [-1.0, 1.0]
        and all(len(s["bohr_frequencies"]) == 4 and np.max(np.abs(np.array(s["bohr_frequencies"]) - target)) <= 1e-9
                for s in eight)
        and elapsed < 20
    )
    detail = f"8-dim DFS {len(eight)}, all dims {rep['dims']}, {elapsed:.2f} s"
    assert verdict(2, "N=9 DFS structure", ok, detail)


# ---------------------------------------------------------------- fig1 ensemble


def test_c3_stationary_trapping(fig1, verdict):
    s = fig1.summary
    m = s["ensemble_size"]
    tr = s["trapping"]
    q1 = tr["q1"]["count"]
    elsewhere = sum(v["count"] for k, v in tr.items() if k not in ("q1", "p"))
    ok = m == 1000 and binomial_ok(q1, m, 0.4) and tr["q2"]["count"] == 0 and elsewhere == 0
    ok = ok and tr["p"]["count"] + s["undecided"] == m - q1 and s["elapsed"] < 20 * 60
    detail = (f"q1 {q1}/{m}, p {tr['p']['count']}, undecided {s['undecided']}, other DFS {elsewhere}, "
              f"{s['elapsed'] / 60:.1f} min")
    assert verdict(3, "stationary trapping law", ok, detail)


def test_c4_martingale(fig1, verdict):
    mart = fig1.summary["martingale"]["q1"]
    ok = mart["within_3_se"]
    assert verdict(4, "martingale of DFS weight", ok, f"max z {mart['max_z']:.2f}")


def test_c6_synchronization_detection(fig1, verdict):
    sync = fig1.summary["synchronization"]
    q1, p = sync["q1"], sync["p"]
    ok = (
        q1["synchronized"] == q1["records"]
        and abs(q1["frequency_min"] - 2) <= 0.02
        and abs(q1["frequency_max"] - 2) <= 0.02
        and q1["relative_phase"] == {"anti-phase": q1["records"]}
        and p["synchronized"] == 0
    )
    detail = (f"q1 {q1['synchronized']}/{q1['records']} synced at {q1['frequency_min']:.5f}..{q1['frequency_max']:.5f}"
              f" {q1['relative_phase']}, complement {p['synchronized']}/{p['records']} synced")
    assert verdict(6, "synchronization detection", ok, detail)


def test_c7_site_pattern(fig1, verdict):
    sp = fig1.summary["site_pattern"]
    ok = sp["checked"] > 0 and sp["passed"] == sp["checked"] and sp["sign_failures"] == 0
    ok = ok and sp["max_relative_deviation"] <= 0.03
    detail = f"{sp['passed']}/{sp['checked']} within 3%, max deviation {sp['max_relative_deviation']:.2e}"
    assert verdict(7, "site amplitude pattern", ok, detail)


# ---------------------------------------------------------------- unraveling


def _unraveling_errors(seed, first_streams=(0, 10_000)):
    prep = prepare(resolve_config("fig1"))
    model, dec = prep.model, prep.dfs
    state = realize_initial_state(InitialStateSpec("mixture", [("q1", 0.4), ("p", 0.6)]), dec, model)
    cfg = IntegratorConfig(dt=1e-3, t_final=10.0, seed=seed)
    exact = None
    errors = {}
    for m, first in zip((400, 1600), first_streams):
        if exact is None:
            lind = evolve_lindblad(state, model, cfg, dec)
            exact = lind.space.lift(lind.states[-1])
        ens = simulate_ensemble(model, dec, state, cfg, m, first_stream=first, tail_window=0.0)
        errors[m] = trace_distance(ens.space.lift(ens.mean_density()), exact)
    return errors


@pytest.mark.xfail(
    reason="a single ratio of two Monte Carlo errors is itself random: over 24 seeds it had mean 2.23 and "
    "standard deviation 0.77, so only about half of all seeds land in [1.4, 2.8]",
    strict=False,
)
def test_c5_unraveling_consistency(verdict):
    errors = _unraveling_errors(resolve_config("fig1")["integrator"]["seed"])
    ratio = errors[400] / errors[1600]
    ok = all(e <= 5 / math.sqrt(m) for m, e in errors.items()) and 1.4 <= ratio <= 2.8
    detail = f"D(400) {errors[400]:.4f}, D(1600) {errors[1600]:.4f}, ratio {ratio:.2f}"
    assert verdict(5, "unraveling vs Lindblad, single draw", ok, detail)


def test_c5_unraveling_scaling_over_replicates(verdict):
    base = resolve_config("fig1")["integrator"]["seed"]
    runs = [_unraveling_errors(base + 1 + k) for k in range(8)]
    bound_ok = all(e <= 5 / math.sqrt(m) for r in runs for m, e in r.items())
    mean400 = float(np.mean([r[400] for r in runs]))
    mean1600 = float(np.mean([r[1600] for r in runs]))
    ratio = mean400 / mean1600
    ok = bound_ok and 1.4 <= ratio <= 2.8
    detail = f"8 replicates: mean D(400) {mean400:.4f}, mean D(1600) {mean1600:.4f}, ratio {ratio:.2f}"
    assert verdict(5, "unraveling vs Lindblad, replicate mean", ok, detail)


# ---------------------------------------------------------------- ergodicity


@pytest.fixture(scope="session")
def fig2(tmp_path_factory):
    cfg = resolve_config("fig2")
    root = tmp_path_factory.mktemp("fig2")
    quantum = run_fidelity_sweep(cfg.with_updates({"sweep": {"noise_kinds": ["quantum"]}}), output_dir=root / "q")
    classical = run_fidelity_sweep(
        cfg.with_updates({"sweep": {"w_values": [0.3, 0.5], "noise_kinds": ["classical"]}}), output_dir=root / "c"
    )
    return quantum.summary["fidelity_curve"], classical.summary["fidelity_curve"]


def _z_scores(rows):
    out = []
    for row in rows:
        dev = abs(row["empirical_mean"] - row["predicted"])
        se = row["standard_error"]
        out.append(dev / se if se > 0 else (0.0 if dev == 0 else math.inf))
    return out


def _classical_ok(classical):
    c_ok = len(classical) == 2 and all(abs(r["empirical_mean"] - 1) <= 0.02 for r in classical)
    return c_ok and all(r["purity_drift_max"] <= 1e-8 for r in classical)


def _classical_detail(classical):
    return (f"classical {[round(r['empirical_mean'], 4) for r in classical]}, "
            f"purity drift {max(r['purity_drift_max'] for r in classical):.1e}")


@pytest.mark.xfail(
    reason="at w = 0 and w = 1 the standard error vanishes (w = 1 is deterministic) while finite-horizon "
    "time averages keep a bias of order 1/T (1 - F = 9e-3 and 2e-5 at T = 300), so 3 SE is unreachable there",
    strict=False,
)
def test_c8_ergodicity_curve(fig2, verdict):
    quantum, classical = fig2
    z = _z_scores(quantum)
    ok = len(quantum) == 11 and max(z) <= 3 and _classical_ok(classical)
    curve = ", ".join(f"{r['w']:.1f}:{r['empirical_mean']:.4f}/{zz:.1f}" for r, zz in zip(quantum, z))
    detail = f"quantum w:F/z {curve}; {_classical_detail(classical)}"
    assert verdict(8, "ergodicity curve, every w at 3 SE", ok, detail)


def test_c8_ergodicity_curve_interior(fig2, verdict):
    quantum, classical = fig2
    interior = [r for r in quantum if 0 < r["w"] < 1]
    ends = [r for r in quantum if r["w"] in (0.0, 1.0)]
    z = _z_scores(interior)
    ok = len(interior) == 9 and max(z) <= 3
    ok = ok and len(ends) == 2 and all(abs(r["empirical_mean"] - 1) <= 0.02 for r in ends)
    ok = ok and _classical_ok(classical)
    detail = (f"interior worst z {max(z):.2f}, endpoints {[round(r['empirical_mean'], 5) for r in ends]}; "
              f"{_classical_detail(classical)}")
    assert verdict(8, "ergodicity curve, interior at 3 SE, endpoints within 0.02", ok, detail)


# ---------------------------------------------------------------- superposition


def test_c9_superposition_non_ergodicity(tmp_path, verdict):
    s = run_scenario(resolve_config("fig1-superposition"), output_dir=tmp_path).summary
    m = s["ensemble_size"]
    q1, q2 = s["trapping"]["q1"]["count"], s["trapping"]["q2"]["count"]
    synced = sum(g["synchronized"] for g in s["synchronization"].values())
    ens_sync = s["lindblad"]["ensemble_sync"]["synchronized"]
    ok = m == 500 and binomial_ok(q1, m, 0.5) and q1 + q2 == m and synced == m and not ens_sync
    detail = f"q1 {q1}, q2 {q2} of {m}; synchronized {synced}; ensemble mean synchronized {ens_sync}"
    assert verdict(9, "superposition non-ergodicity", ok, detail)


# ---------------------------------------------------------------- multiplexing


@pytest.mark.parametrize("name, pair", [("fig3a", (SQ5, 1.0)), ("fig3c", (SQ5 - 1, SQ5 + 1))])
def test_c10_multiplexing(name, pair, tmp_path, verdict):
    t0 = time.perf_counter()
    s = run_scenario(resolve_config(name), output_dir=tmp_path).summary
    elapsed = time.perf_counter() - t0
    fh = s["frequency_histogram"]
    m = fh["total"]
    counts = {}
    other = 0
    for key, count in fh["histogram"].items():
        match = [f for f in pair if key != "other" and abs(float(key) - f) <= 1e-9]
        if match:
            counts[match[0]] = count
        else:
            other += count
    ok = m == 400 and all(binomial_ok(counts.get(f, 0), m, 0.5) for f in pair) and other <= 0.02 * m
    detail = (f"{', '.join(f'{f:.4f}: {counts.get(f, 0)}' for f in pair)}, other {other}, "
              f"unsynchronized {fh['unsynchronized']}, {elapsed / 60:.1f} min")
    assert verdict(f"10 ({name})", "frequency multiplexing", ok, detail)


# ---------------------------------------------------------------- Zeno crossover


def test_c11_zeno_crossover(tmp_path, verdict):
    cfg = resolve_config("sync-time-n5")
    rows = sweep_sync_time(cfg, cfg.sweep["gammas"], output_dir=tmp_path).summary["sync_time"]
    means = [r["mean"] for r in rows]
    ses = [r["standard_error"] for r in rows]
    cross = single_crossover(means, ses, z=2.0)
    var = {r["gamma"]: r["variance"] for r in rows}
    ok = cross["passes"] and var[10.0] < var[0.1]
    undecided = [r["undecided"] for r in rows]
    detail = (f"means {[round(x, 1) for x in means]}, signs {cross['signs']}, "
              f"var(0.1) {var[0.1]:.0f}, var(10) {var[10.0]:.0f}, undecided {undecided}")
    assert verdict(11, "Zeno crossover of sync time", ok, detail)


# ---------------------------------------------------------------- property suites


PROPERTY_TESTS = [
    "test_linalg.py::test_eigh_reconstruction",
    "test_linalg.py::test_site_operator_matches_kron",
    "test_linalg.py::test_fidelity_symmetric",
    "test_dfs.py::test_planted_blocks_recovered",
    "test_linalg.py::test_purity_amplitude_identity",
    "test_engine.py::test_fixed_point_absorption",
    "test_engine.py::test_dt_halving_keeps_trapping_fractions",
    "test_engine.py::test_results_independent_of_workers",
    "test_config_cli.py::test_outputs_identical_across_worker_counts",
]


def test_c12_property_suites(verdict):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
        cwd=TESTS, capture_output=True, text=True,
    )
    elapsed = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and elapsed < 120
    assert verdict(12, "property suites", ok, f"{tail}; {elapsed:.0f} s"), proc.stdout[-3000:]


@pytest.mark.xfail(
    reason="the DFS defect 1 - q is a non-negative martingale, so by Doob's maximal inequality a defect "
    "of 1e-6 grows past 1e-5 with probability up to 10%; the per-trajectory certainty cannot hold",
    strict=False,
)
def test_c12_literal_fixed_point_absorption(verdict):
    prep = prepare(resolve_config("fig1"))
    model, dec = prep.model, prep.dfs
    a = 1 / math.sqrt(2)
    state = realize_initial_state(InitialStateSpec("superposition", [("q1", a), ("p", a)]), dec, model)
    cfg = IntegratorConfig(dt=1e-3, t_final=120.0, seed=5, dwell=5.0)
    ens = simulate_ensemble(model, dec, state, cfg, 40, full_streams=range(40))
    entries = violations = 0
    for rec in ens.records:
        for b in range(rec.overlaps.shape[1]):
            q = rec.overlaps[:, b]
            hit = np.flatnonzero(q >= 1 - 1e-6)
            if hit.size:
                entries += 1
                violations += int(np.any(q[hit[0]:] < 1 - 1e-5))
    ok = violations == 0
    detail = f"{violations} of {entries} absorbed trajectories later dropped below 1 - 1e-5 (expected failure)"
    assert verdict("12 (literal absorption)", "fixed point never left", ok, detail)
