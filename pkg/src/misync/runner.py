"""Scenario execution: ensembles, analysis and result files.

Every run writes into one output directory:

* ``trajectory_<stream>.csv`` for each requested trajectory,
* ``lindblad_mean.csv`` for the ensemble-averaged dynamics,
* ``summary.json`` with the analysis,
* ``manifest.json`` with the config snapshot, seed, streams, timing and
  SHA-256 digests of every other file.

CSV rows are ``time, site_1..site_N, overlap_q1..overlap_qK, overlap_dark,
overlap_p`` with floats written to 17 significant digits, so reruns with the
same config are byte-identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    SyncThresholds,
    SyncVerdict,
    analysis_window,
    binomial_interval,
    detect_sync,
    ergodicity_fidelity,
    hitting_time_stats,
    multiplexing_report,
    site_amplitudes,
    stationary_histogram,
)
from .chain import ChainParams, InitialStateSpec, build_model, realize_initial_state
from .config import ScenarioConfig, evaluate, serialize
from .dfs import synchronized_eigenmode
from .engine import (
    COMPLEMENT,
    IntegratorConfig,
    evolve_lindblad,
    simulate_ensemble,
)
from .errors import ConfigError, InsufficientDataError, UnsupportedModeError
from .linalg import TOLERANCES, PureEnsemble

__all__ = [
    "OUTPUT_ENV",
    "ScenarioResult",
    "prepare",
    "run_scenario",
    "run_fidelity_sweep",
    "sweep_sync_time",
    "analyze",
    "classify_records",
    "site_pattern_check",
    "write_csv",
]

OUTPUT_ENV = "MISYNC_OUTPUT_DIR"


@dataclass
class Prepared:
    """Objects built from a config before any time evolution."""

    model: object
    dfs: object
    spec: InitialStateSpec
    state0: object
    integrator: IntegratorConfig


@dataclass
class ScenarioResult:
    summary: dict
    manifest: dict
    ensemble: object = None
    lindblad: object = None
    prepared: Prepared | None = None
    output_dir: Path | None = None
    children: list = field(default_factory=list)


# ----------------------------------------------------------------------------
# building


def prepare(cfg: ScenarioConfig, variables: dict | None = None) -> Prepared:
    variables = variables or {}
    m = cfg["model"]
    params = ChainParams(
        N=m["N"],
        J=evaluate(m["J"], variables),
        h=evaluate(m["h"], variables),
        gamma=evaluate(m["gamma"], variables),
        measured_site=m["measured_site"],
    )
    model = build_model(params)
    dec = model.dfs()
    terms = []
    for label, value in cfg["initial"]["terms"]:
        if isinstance(value, list):
            terms.append((label, [evaluate(v, variables) for v in value]))
        else:
            terms.append((label, evaluate(value, variables)))
    terms = [(label, v) for label, v in terms if not (cfg["initial"]["kind"] == "mixture" and v == 0)]
    spec = InitialStateSpec(kind=cfg["initial"]["kind"], terms=terms)
    state0 = realize_initial_state(spec, dec, model)
    return Prepared(model=model, dfs=dec, spec=spec, state0=state0, integrator=_integrator(cfg, variables))


def _integrator(cfg: ScenarioConfig, variables: dict) -> IntegratorConfig:
    it = cfg["integrator"]
    return IntegratorConfig(
        dt=evaluate(it["dt"], variables),
        t_final=evaluate(it["t_final"], variables),
        scheme=it["scheme"],
        renormalize_every_step=it["renormalize_every_step"],
        seed=it["seed"],
        sample_stride=evaluate(it["sample_stride"], variables),
        lindblad_dt=None if it["lindblad_dt"] is None else evaluate(it["lindblad_dt"], variables),
        trap_epsilon=evaluate(it["trap_epsilon"], variables),
        dwell=evaluate(it["dwell"], variables),
        max_halvings=it["max_halvings"],
    )


def _thresholds(cfg: ScenarioConfig) -> SyncThresholds:
    values = {k: evaluate(v) for k, v in cfg["analysis"]["thresholds"].items()}
    return SyncThresholds(**values)


def _sync_sites(cfg: ScenarioConfig, n: int):
    sites = cfg["analysis"]["sync_sites"]
    if sites == "auto":
        return None
    out = []
    for s in sites:
        s = n if s == "N" else s
        if not isinstance(s, int) or not 1 <= s <= n:
            raise ConfigError(f"analysis.sync_sites entry {s!r} is not a site of the chain")
        out.append(s)
    return out


# ----------------------------------------------------------------------------
# per-record analysis


def classify_records(records, sites=None, thresholds: SyncThresholds | None = None) -> None:
    """Attach a :class:`SyncVerdict` to every record (in place).

    ``sites`` are 1-based; ``None`` picks the two sites with the largest
    oscillation in the analysis window.
    """
    for r in records:
        window = analysis_window(r)
        mask = (r.times >= window[0] - 1e-12) & (r.times <= window[1] + 1e-12)
        if sites is None:
            spread = r.observables[mask].std(axis=0)
            pair = sorted(np.argsort(-spread, kind="stable")[:2] + 1)
        else:
            pair = sites
        try:
            r.verdict = detect_sync(
                r.times, r.observables[:, pair[0] - 1], r.observables[:, pair[1] - 1], window, thresholds
            )
        except InsufficientDataError as err:
            r.verdict = SyncVerdict(False, None, None, float("nan"), float("nan"), reason=str(err))
        r.verdict.sites = tuple(int(s) for s in pair)


def site_pattern_check(records, model, dec, rel_tol: float = 0.03) -> dict:
    """Compare fitted per-site amplitudes with the DFS eigenmode pattern.

    Only synchronised records trapped in a single-frequency DFS are checked.
    Amplitudes are normalised by their maximum; sites with a zero entry in
    the pattern must stay below ``rel_tol``.  Signs are relative to the
    first non-zero site of the pattern.
    """
    checked = passed = 0
    worst = 0.0
    sign_failures = 0
    patterns = {}
    for s in dec.subspaces:
        try:
            patterns[s.label] = synchronized_eigenmode(model, s)
        except UnsupportedModeError:
            continue
    for r in records:
        pattern = patterns.get(r.trapped_in)
        if pattern is None or r.verdict is None or not r.verdict.synchronized:
            continue
        amps, phases = site_amplitudes(r.times, r.observables, r.verdict.frequency, analysis_window(r))
        rel = amps / amps.max()
        dev = np.abs(rel - np.abs(pattern))
        nonzero = np.abs(pattern) > 1e-9
        ref = int(np.flatnonzero(nonzero)[0])
        signs = np.where(np.abs(((phases - phases[ref]) + np.pi) % (2 * np.pi) - np.pi) < np.pi / 2, 1.0, -1.0)
        sign_ok = bool(np.all(signs[nonzero] == np.sign(pattern[nonzero]) * np.sign(pattern[ref])))
        checked += 1
        worst = max(worst, float(dev.max()))
        if dev.max() <= rel_tol and sign_ok:
            passed += 1
        if not sign_ok:
            sign_failures += 1
    return {
        "checked": checked,
        "passed": passed,
        "max_relative_deviation": worst,
        "sign_failures": sign_failures,
        "patterns": {k: v.tolist() for k, v in patterns.items()},
    }


# ----------------------------------------------------------------------------
# output helpers


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _csv_columns(space, n_sites: int):
    q = [l for l in space.labels if l.startswith("q")]
    return ["time"] + [f"site_{j}" for j in range(1, n_sites + 1)] + [f"overlap_{l}" for l in q] + ["overlap_dark", "overlap_p"]


def _overlap_columns(space, overlaps: np.ndarray) -> np.ndarray:
    labels = space.labels
    q = [i for i, l in enumerate(labels) if l.startswith("q")]
    d = [i for i, l in enumerate(labels) if l.startswith("d")]
    p = labels.index(COMPLEMENT)
    dark = overlaps[:, d].sum(1, keepdims=True) if d else np.zeros((len(overlaps), 1))
    return np.hstack([overlaps[:, q], dark, overlaps[:, [p]]])


def write_csv(path: Path, space, times, observables, overlaps) -> None:
    cols = _csv_columns(space, observables.shape[1])
    table = np.hstack([np.asarray(times)[:, None], observables, _overlap_columns(space, overlaps)])
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    for row in table:
        buf.write(",".join(_fmt(x) for x in row) + "\n")
    path.write_text(buf.getvalue())


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=False) + "\n")


def _output_dir(cfg: ScenarioConfig, override=None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env) / cfg.name
    return Path(cfg["outputs"]["directory"])


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _manifest(cfg, integrator, streams, started, finished, out: Path, files) -> dict:
    return {
        "config": serialize(cfg),
        "code_version": __version__,
        "source_sha256": _source_digest(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": integrator.seed,
        "streams": {"first": int(streams[0]), "last": int(streams[-1]), "count": len(streams)} if len(streams) else {},
        "wall_clock": {"started": started, "finished": finished, "elapsed_s": finished - started},
        "outputs": {f.name: _digest(f) for f in files},
    }


# ----------------------------------------------------------------------------
# single scenario


def _block_weights(overlaps: np.ndarray) -> list:
    return [float(x) for x in overlaps]


def run_scenario(cfg: ScenarioConfig, output_dir=None, workers: int | None = None, variables=None,
                 write: bool = True, noise_kind: str | None = None) -> ScenarioResult:
    """Run the scenario described by ``cfg`` and write its outputs.

    Sweeps declared in ``cfg`` (``sweep.w_values`` or ``sweep.gammas``) are
    dispatched to :func:`run_fidelity_sweep` and :func:`sweep_sync_time`.
    """
    if variables is None and cfg.sweep.get("w_values"):
        return run_fidelity_sweep(cfg, output_dir=output_dir, workers=workers, write=write)
    if variables is None and cfg.sweep.get("gammas"):
        gammas = [evaluate(g) for g in cfg.sweep["gammas"]]
        return sweep_sync_time(cfg, gammas, output_dir=output_dir, workers=workers, write=write)
    started = time.time()
    variables = variables or {}
    prep = prepare(cfg, variables)
    model, dec, it = prep.model, prep.dfs, prep.integrator
    kind = noise_kind or cfg["noise_kind"]
    ens_cfg = cfg["ensemble"]
    an = cfg["analysis"]
    thresholds = _thresholds(cfg)
    tol = TOLERANCES.updated(**{k: evaluate(v) for k, v in an["tolerances"].items()})
    avg_fraction = None if an["average_fraction"] is None else evaluate(an["average_fraction"], variables)
    steady_fraction = evaluate(an["steady_fraction"], variables)
    full_streams = [int(s) for s in cfg["outputs"]["trajectories"]]

    summary = {
        "scenario": cfg.name,
        "noise_kind": kind,
        "variables": variables,
        "model": {"N": model.N, "J": model.params.J, "h": model.params.h, "gamma": model.params.gamma,
                  "measured_site": model.params.measured_site},
        "horizon": it.t_final,
        "dt": it.dt,
        "sample_stride": it.sample_dt,
        "dfs": dec.report(),
        "initial_state": prep.spec.to_dict(),
    }
    ensemble = None
    lindblad = None
    if kind != "lindblad":
        ensemble = simulate_ensemble(
            model, dec, prep.state0, it, ens_cfg["size"], kind=kind,
            chunk_size=ens_cfg["chunk_size"], workers=workers or ens_cfg["workers"],
            full_streams=full_streams, tail_window=evaluate(an["tail_window"]),
            average_fraction=avg_fraction, reduce=ens_cfg["reduce"],
        )
    if cfg["outputs"]["lindblad"] or avg_fraction is not None or kind == "lindblad":
        lindblad = evolve_lindblad(prep.state0, model, it, dfs=dec, steady_fraction=steady_fraction,
                                   reduce=ens_cfg["reduce"])

    if ensemble is not None:
        summary.update(_ensemble_summary(cfg, prep, ensemble, lindblad, thresholds, avg_fraction, tol))
    if lindblad is not None:
        summary["lindblad"] = _lindblad_summary(cfg, model, lindblad, thresholds)

    files = []
    out = None
    if write:
        out = _output_dir(cfg, output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if ensemble is not None:
            for r in ensemble.records:
                if r.stream_id in full_streams:
                    path = out / f"trajectory_{r.stream_id:05d}.csv"
                    write_csv(path, ensemble.space, r.times, r.observables, r.overlaps)
                    files.append(path)
        if lindblad is not None:
            path = out / "lindblad_mean.csv"
            write_csv(path, lindblad.space, lindblad.times, lindblad.observables, lindblad.overlaps)
            files.append(path)
        path = out / "summary.json"
        _write_json(path, summary)
        files.append(path)
    finished = time.time()
    streams = np.arange(ens_cfg["size"]) if ensemble is not None else np.arange(0)
    manifest = _manifest(cfg, it, streams, started, finished, out or Path("."), files)
    if write:
        _write_json(out / "manifest.json", manifest)
    return ScenarioResult(summary=summary, manifest=manifest, ensemble=ensemble, lindblad=lindblad,
                          prepared=prep, output_dir=out)


def _known_frequencies(cfg, dec):
    freqs = cfg["analysis"]["frequencies"]
    if freqs == "auto":
        return sorted({round(f, 12) for s in dec.subspaces for f in s.bohr_frequencies})
    if freqs is None:
        return None
    return [evaluate(f) for f in freqs]


def _ensemble_summary(cfg, prep, ensemble, lindblad, thresholds, avg_fraction, tol) -> dict:
    model, dec = prep.model, prep.dfs
    records = ensemble.records
    m = len(records)
    labels = ensemble.labels
    hist = stationary_histogram(records, labels) if m else None
    initial = ensemble.initial_overlaps
    trapping = {}
    for b, label in enumerate(labels):
        count = hist["counts"][label]
        p, half = binomial_interval(count, m, 3.0)
        expected = float(initial[b])
        sigma = math.sqrt(max(expected * (1 - expected), 0.0) / m)
        trapping[label] = {
            "count": count,
            "fraction": p,
            "expected": expected,
            "binomial_sigma": sigma,
            "within_3_sigma": abs(p - expected) <= 3 * sigma + 1e-12,
        }
    mean, se = ensemble.mean_overlap()
    z = np.abs(mean - initial[None, :]) / np.maximum(se, 1e-12)
    martingale = {
        label: {
            "max_abs_deviation": float(np.max(np.abs(mean[:, b] - initial[b]))),
            "max_z": float(np.max(z[:, b])),
            "within_3_se": bool(np.all(np.abs(mean[:, b] - initial[b]) <= 3 * np.maximum(se[:, b], 1e-12))),
        }
        for b, label in enumerate(labels)
        if initial[b] > 0
    }
    sites = _sync_sites(cfg, model.N)
    classify_records(records, sites, thresholds)
    sync = {}
    for label in labels + ["undecided"]:
        group = [r for r in records if r.trapped_in == label]
        if not group:
            continue
        synced = [r for r in group if r.verdict.synchronized]
        freqs = [r.verdict.frequency for r in synced]
        phases = {}
        for r in synced:
            phases[str(r.verdict.relative_phase)] = phases.get(str(r.verdict.relative_phase), 0) + 1
        sync[label] = {
            "records": len(group),
            "synchronized": len(synced),
            "frequency_min": min(freqs) if freqs else None,
            "frequency_max": max(freqs) if freqs else None,
            "relative_phase": phases,
        }
    summary = {
        "ensemble_size": m,
        "undecided": hist["undecided"],
        "initial_overlaps": dict(zip(labels, map(float, initial))),
        "trapping": trapping,
        "martingale": martingale,
        "sync_sites": sites or "auto",
        "synchronization": sync,
        "frequency_histogram": multiplexing_report(records, _known_frequencies(cfg, dec)),
        "site_pattern": site_pattern_check(records, model, dec),
        "hitting_times": hitting_time_stats(records, bins=cfg["analysis"]["histogram_bins"]).to_dict(),
    }
    if ensemble.kind == "classical":
        drifts = [r.purity_drift for r in records]
        summary["purity_drift_max"] = float(max(drifts))
    if avg_fraction is not None and lindblad is not None:
        steady = _to_basis(lindblad.steady_state, lindblad.space, ensemble.space)
        rep = ergodicity_fidelity(records, steady, _block_weights(initial), space=ensemble.space)
        summary["ergodicity"] = rep.to_dict()
        summary["ergodicity"]["average_fraction"] = avg_fraction
    return summary


def _to_basis(rho, src, dst) -> np.ndarray:
    if src.basis.shape == dst.basis.shape and np.allclose(src.basis, dst.basis):
        return rho
    t = dst.basis.conj().T @ src.basis
    return t @ rho @ t.conj().T


def _lindblad_summary(cfg, model, lindblad, thresholds) -> dict:
    sites = _sync_sites(cfg, model.N) or [1, model.N]
    t = lindblad.times
    window = (max(t[-1] - evaluate(cfg["analysis"]["tail_window"]), 0.0), t[-1])
    try:
        verdict = detect_sync(t, lindblad.observables[:, sites[0] - 1], lindblad.observables[:, sites[1] - 1],
                              window, thresholds)
        verdict_d = verdict.to_dict()
    except InsufficientDataError as err:
        verdict_d = {"synchronized": False, "reason": str(err)}
    return {
        "trace_drift": lindblad.trace_drift,
        "final_overlaps": dict(zip(lindblad.space.labels, map(float, lindblad.overlaps[-1]))),
        "ensemble_sync": verdict_d,
        "steady_fraction": lindblad.steady_fraction,
    }


# ----------------------------------------------------------------------------
# sweeps


def run_fidelity_sweep(cfg: ScenarioConfig, output_dir=None, workers=None, write: bool = True) -> ScenarioResult:
    """Mean fidelity versus initial DFS weight ``w`` for each noise kind in the sweep."""
    started = time.time()
    out = _output_dir(cfg, output_dir) if write else None
    kinds = cfg.sweep.get("noise_kinds") or [cfg["noise_kind"]]
    rows = []
    children = []
    for kind in kinds:
        for w_expr in cfg.sweep["w_values"]:
            w = evaluate(w_expr)
            sub_dir = None if out is None else out / f"{kind}_w{w:.3f}"
            child = run_scenario(cfg, output_dir=sub_dir, workers=workers, variables={"w": w}, write=write,
                                 noise_kind=kind)
            erg = child.summary.get("ergodicity", {})
            row = {"noise_kind": kind, "w": w}
            row.update({k: erg.get(k) for k in ("empirical_mean", "standard_error", "predicted",
                                                 "empirical_variance", "predicted_variance", "popoviciu_bound")})
            row["purity_drift_max"] = child.summary.get("purity_drift_max")
            rows.append(row)
            children.append(child)
    summary = {"scenario": cfg.name, "fidelity_curve": rows}
    files = []
    if write:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "fidelity_curve.csv"
        cols = ["noise_kind", "w", "empirical_mean", "standard_error", "predicted", "empirical_variance",
                "predicted_variance", "popoviciu_bound"]
        lines = [",".join(cols)]
        for row in rows:
            lines.append(",".join([row["noise_kind"]] + [_fmt(row[c]) if row[c] is not None else "" for c in cols[1:]]))
        path.write_text("\n".join(lines) + "\n")
        files.append(path)
        _write_json(out / "summary.json", summary)
        files.append(out / "summary.json")
    manifest = _manifest(cfg, _integrator(cfg, {"w": 0.0}), np.arange(cfg["ensemble"]["size"]), started,
                         time.time(), out or Path("."), files)
    if write:
        _write_json(out / "manifest.json", manifest)
    return ScenarioResult(summary=summary, manifest=manifest, output_dir=out, children=children)


def sweep_sync_time(cfg: ScenarioConfig, gammas, output_dir=None, workers=None, write: bool = True,
                    size: int | None = None) -> ScenarioResult:
    """Hitting-time statistics of DFS trapping over a grid of measurement strengths.

    ``model.gamma`` and integrator expressions may refer to ``gamma``.
    """
    started = time.time()
    out = _output_dir(cfg, output_dir) if write else None
    if size is not None:
        cfg = cfg.with_updates({"ensemble": {"size": size}})
    rows = []
    children = []
    for g in gammas:
        sub = cfg.with_updates({"model": {"gamma": "gamma"}})
        child = run_scenario(sub, output_dir=None if out is None else out / f"gamma_{g:g}", workers=workers,
                             variables={"gamma": float(g)}, write=write)
        ht = child.summary["hitting_times"]
        rows.append({
            "gamma": float(g),
            "mean": ht["mean"],
            "variance": ht["variance"],
            "standard_error": ht["standard_error"],
            "variance_se": ht["variance_se"],
            "count": ht["count"],
            "total": child.summary["ensemble_size"],
            "undecided": child.summary["undecided"],
            "horizon": child.summary["horizon"],
        })
        children.append(child)
    summary = {"scenario": cfg.name, "sync_time": rows}
    files = []
    if write:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "sync_time.csv"
        cols = ["gamma", "mean", "variance", "standard_error", "variance_se", "count", "total", "undecided", "horizon"]
        lines = [",".join(cols)]
        for row in rows:
            lines.append(",".join(_fmt(row[c]) if row[c] is not None else "" for c in cols))
        path.write_text("\n".join(lines) + "\n")
        files.append(path)
        _write_json(out / "summary.json", summary)
        files.append(out / "summary.json")
    manifest = _manifest(cfg, _integrator(cfg, {"gamma": float(gammas[0])}), np.arange(cfg["ensemble"]["size"]),
                         started, time.time(), out or Path("."), files)
    if write:
        _write_json(out / "manifest.json", manifest)
    return ScenarioResult(summary=summary, manifest=manifest, output_dir=out, children=children)


# ----------------------------------------------------------------------------
# DFS report


def analyze(n: int, site: int, gamma: float = 1.0, J: float = 1.0, h: float = 1.0) -> dict:
    """DFS report of the chain with ``n`` sites measured at ``site``."""
    if not 2 <= n <= 10:
        raise ConfigError(f"N must lie in 2..10, got {n}")
    if gamma <= 0:
        raise ConfigError("gamma must be positive for a DFS analysis")
    model = build_model(ChainParams(N=n, J=J, h=h, gamma=gamma, measured_site=site))
    dec = model.dfs()
    report = dec.report()
    report["model"] = {"N": n, "J": J, "h": h, "gamma": gamma, "measured_site": site}
    modes = {}
    for s in dec.subspaces:
        try:
            modes[s.label] = synchronized_eigenmode(model, s).tolist()
        except UnsupportedModeError:
            pass
    report["eigenmodes"] = modes
    return report
