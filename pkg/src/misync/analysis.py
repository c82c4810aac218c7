"""Post-processing of trajectory ensembles.

Synchronisation is judged from a least-squares sinusoid fit: two observables
are synchronised when they oscillate at a common frequency with a stable
amplitude and small residual.  The remaining helpers turn ensembles into
trapping fractions, fidelity statistics and hitting-time statistics.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import COMPLEMENT, UNDECIDED, TrajectoryRecord
from .errors import ConfigError, ContractViolation, InsufficientDataError
from .linalg import fidelity

__all__ = [
    "SyncThresholds",
    "SinusoidFit",
    "SyncVerdict",
    "fit_sinusoid",
    "estimate_frequency",
    "detect_sync",
    "site_amplitudes",
    "analysis_window",
    "stationary_histogram",
    "binomial_interval",
    "ErgodicityReport",
    "ergodicity_fidelity",
    "complement_kernel_dimension",
    "HittingTimeStats",
    "hitting_time_stats",
    "multiplexing_report",
    "single_crossover",
]

IN_PHASE = "in-phase"
ANTI_PHASE = "anti-phase"


@dataclass(frozen=True)
class SyncThresholds:
    """Engineering thresholds of the synchronisation criterion."""

    frequency_rel_tol: float = 0.01
    residual_max: float = 0.05
    drift_max: float = 0.02
    phase_tol: float = 0.1
    amplitude_floor: float = 1e-3
    min_periods: float = 2.0


@dataclass
class SinusoidFit:
    """``amplitude * cos(frequency * t + phase) + offset``."""

    frequency: float
    amplitude: float
    phase: float
    offset: float
    residual_rms: float

    def __call__(self, t):
        return self.amplitude * np.cos(self.frequency * np.asarray(t) + self.phase) + self.offset


@dataclass
class SyncVerdict:
    synchronized: bool
    frequency: float | None
    relative_phase: str | None
    amplitude: float
    residual_noise: float
    drift: float = float("nan")
    reason: str = ""
    fits: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("fits")
        return out


def fit_sinusoid(t, y, frequency: float) -> SinusoidFit:
    """Linear least-squares fit of a sinusoid at fixed angular frequency."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    design = np.column_stack([np.cos(frequency * t), np.sin(frequency * t), np.ones_like(t)])
    (a, b, c), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ np.array([a, b, c])
    return SinusoidFit(
        frequency=float(frequency),
        amplitude=float(np.hypot(a, b)),
        phase=float(np.arctan2(-b, a)),
        offset=float(c),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
    )


def _golden(f, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    inv_phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _fft_peak(t, y, pad: int = 8) -> float:
    dt = t[1] - t[0]
    n = len(y)
    spec = np.abs(np.fft.rfft((y - y.mean()) * np.hanning(n), n=pad * n))
    omega = 2 * np.pi * np.fft.rfftfreq(pad * n, d=dt)
    spec[0] = 0.0
    return float(omega[np.argmax(spec)])


def estimate_frequency(t, y) -> float:
    """Dominant angular frequency: FFT peak refined by golden-section search on the fit residual."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(t) < 4:
        raise InsufficientDataError("need at least four samples to estimate a frequency")
    seed = _fft_peak(t, y)
    span = t[-1] - t[0]
    half_bin = np.pi / span
    lo = max(seed - half_bin, 1e-9)
    return _golden(lambda w: fit_sinusoid(t, y, w).residual_rms, lo, seed + half_bin)


def _window(t, series, window):
    t = np.asarray(t, dtype=float)
    if window is None:
        mask = np.ones_like(t, dtype=bool)
    else:
        mask = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    return t[mask], [np.asarray(s, dtype=float)[mask] for s in series]


def _wrap(angle: float) -> float:
    return (angle + np.pi) % (2 * np.pi) - np.pi


def detect_sync(t, series_a, series_b, window=None, thresholds: SyncThresholds | None = None) -> SyncVerdict:
    """Decide whether two sampled observables oscillate synchronously.

    Both series are fitted to ``A cos(L t + phi) + B``; the frequency ``L`` is
    seeded by the FFT peak and refined by golden-section search.  The pair is
    synchronised when the frequencies agree, the residuals are small relative
    to the amplitudes, and the amplitudes fitted on the two halves of the
    window agree.

    Raises
    ------
    InsufficientDataError
        When the window spans fewer than ``min_periods`` periods of the seed
        frequency.
    """
    th = thresholds or SyncThresholds()
    t, (a, b) = _window(t, [series_a, series_b], window)
    if len(t) < 8:
        raise InsufficientDataError(f"window holds {len(t)} samples; need at least 8")
    span = t[-1] - t[0]
    scale = [float(np.std(a)), float(np.std(b))]
    if max(scale) * math.sqrt(2) < th.amplitude_floor:
        return SyncVerdict(False, None, None, max(scale) * math.sqrt(2), float("nan"), reason="flat")
    seeds = [_fft_peak(t, s) for s in (a, b)]
    seed = seeds[int(np.argmax(scale))]
    if seed <= 0 or span < th.min_periods * 2 * np.pi / seed:
        raise InsufficientDataError(
            f"window of length {span:.3g} covers fewer than {th.min_periods} periods "
            f"of the dominant frequency {seed:.3g}"
        )
    freqs = [estimate_frequency(t, s) for s in (a, b)]
    fits = [fit_sinusoid(t, s, w) for s, w in zip((a, b), freqs)]
    amplitude = min(f.amplitude for f in fits)
    residual = max(f.residual_rms / max(f.amplitude, 1e-300) for f in fits)
    common = 0.5 * (freqs[0] + freqs[1])
    freq_ok = abs(freqs[0] - freqs[1]) <= th.frequency_rel_tol * common
    half = t <= t[0] + span / 2
    drift = 0.0
    for s, f in zip((a, b), fits):
        first = fit_sinusoid(t[half], s[half], common).amplitude
        second = fit_sinusoid(t[~half], s[~half], common).amplitude
        drift = max(drift, abs(first - second) / max(f.amplitude, 1e-300))
    dphi = _wrap(fits[0].phase - fits[1].phase)
    if abs(abs(dphi) - np.pi) < th.phase_tol:
        relation = ANTI_PHASE
    elif abs(dphi) < th.phase_tol:
        relation = IN_PHASE
    else:
        relation = None
    reasons = []
    if amplitude < th.amplitude_floor:
        reasons.append("amplitude below floor")
    if not freq_ok:
        reasons.append("frequencies differ")
    if residual > th.residual_max:
        reasons.append("residual too large")
    if drift > th.drift_max:
        reasons.append("amplitude drifts")
    synchronized = not reasons
    return SyncVerdict(
        synchronized=synchronized,
        frequency=common if synchronized else None,
        relative_phase=relation if synchronized else None,
        amplitude=amplitude,
        residual_noise=residual,
        drift=drift,
        reason="; ".join(reasons),
        fits=tuple(fits),
    )


def site_amplitudes(t, observables, frequency: float, window=None):
    """Fitted amplitude and phase of every site at a fixed frequency.

    Returns
    -------
    amplitudes, phases : ndarray
        One entry per column of ``observables``.
    """
    obs = np.asarray(observables, dtype=float)
    t, cols = _window(t, list(obs.T), window)
    fits = [fit_sinusoid(t, c, frequency) for c in cols]
    return np.array([f.amplitude for f in fits]), np.array([f.phase for f in fits])


def analysis_window(record: TrajectoryRecord) -> tuple[float, float]:
    """Stored samples after the trapping time (or the whole stored tail)."""
    start = record.times[0]
    if record.hitting_time is not None:
        start = max(start, record.hitting_time)
    return float(start), float(record.times[-1])


# ----------------------------------------------------------------------------
# trapping statistics


def binomial_interval(count: int, total: int, nsigma: float = 3.0):
    """Normal-approximation band ``p_hat +- nsigma * sqrt(p_hat (1 - p_hat) / M)``."""
    if total <= 0:
        raise ConfigError("empty ensemble")
    p = count / total
    half = nsigma * math.sqrt(p * (1 - p) / total)
    return p, half


def stationary_histogram(records, labels=None) -> dict:
    """Fraction of trajectories trapped in every block.

    Returns a dict with ``fractions`` (per label, ``'p'`` being the
    complement), ``counts`` and ``undecided``.  A warning lists undecided
    trajectories.
    """
    records = list(records)
    if not records:
        raise ConfigError("no trajectory records")
    labels = labels or records[0].labels
    counts = {label: 0 for label in labels}
    undecided = 0
    for r in records:
        if r.trapped_in == UNDECIDED:
            undecided += 1
        else:
            counts[r.trapped_in] += 1
    if undecided:
        ids = [r.stream_id for r in records if r.trapped_in == UNDECIDED]
        warnings.warn(f"{undecided} undecided trajectories (streams {ids[:10]}{'...' if undecided > 10 else ''})")
    m = len(records)
    return {
        "fractions": {k: v / m for k, v in counts.items()},
        "counts": counts,
        "undecided": undecided,
        "total": m,
    }


# ----------------------------------------------------------------------------
# ergodicity


@dataclass
class ErgodicityReport:
    empirical_mean: float
    standard_error: float
    predicted: float
    empirical_variance: float
    predicted_variance: float
    popoviciu_bound: float
    n_blocks: int
    fidelities: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("fidelities")
        return out


def complement_kernel_dimension(H: np.ndarray, L: np.ndarray, tol: float = 1e-9) -> int:
    """Dimension of the kernel of the Lindblad generator of ``(H, L)``."""
    d = H.shape[0]
    if d == 0:
        return 0
    eye = np.eye(d)
    LdL = L.conj().T @ L
    gen = (
        -1j * (np.kron(H, eye) - np.kron(eye, H.T))
        + np.kron(L, L.conj())
        - 0.5 * (np.kron(LdL, eye) + np.kron(eye, LdL.T))
    )
    sv = np.linalg.svd(gen, compute_uv=False)
    return int(np.sum(sv <= tol * max(1.0, sv[0])))


def ergodicity_fidelity(records, lindblad_steady: np.ndarray, weights, space=None) -> ErgodicityReport:
    """Mean fidelity between time-averaged trajectory states and the ensemble steady state.

    ``weights`` are the initial block weights.  When ``space`` (a
    :class:`~misync.engine.ReducedSpace`) is given, the complement block is
    first checked to carry a unique steady state.
    """
    w = np.asarray([x for x in weights if x > 0], dtype=float)
    if abs(w.sum() - 1) > 1e-8:
        raise ConfigError(f"block weights sum to {w.sum()}, not 1")
    if space is not None:
        sl = space.slices[space.index(COMPLEMENT)]
        if sl.stop > sl.start:
            k = complement_kernel_dimension(space.H[sl, sl], space.L[sl, sl])
            if k != 1:
                raise ContractViolation(
                    f"complement block has a {k}-dimensional stationary space; "
                    "its steady state is not unique and the fidelity prediction does not apply"
                )
    fids = []
    for r in records:
        if r.time_average is None:
            raise ConfigError(
                "records carry no time-averaged state; enable analysis.average_fraction "
                "and make the sampling stride finer than the averaging window"
            )
        fids.append(fidelity(r.time_average, lindblad_steady))
    fids = np.array(fids)
    m = len(fids)
    predicted = float(np.sum(w**2))
    n_blocks = len(w)
    if predicted < 1 / n_blocks - 1e-12:
        raise ContractViolation("participation ratio below 1/N")
    return ErgodicityReport(
        empirical_mean=float(fids.mean()),
        standard_error=float(fids.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0,
        predicted=predicted,
        empirical_variance=float(fids.var(ddof=1)) if m > 1 else 0.0,
        predicted_variance=float(np.sum(w**3) - predicted**2),
        popoviciu_bound=(1 / n_blocks - 1) ** 2 / 4,
        n_blocks=n_blocks,
        fidelities=fids,
    )


# ----------------------------------------------------------------------------
# hitting times


@dataclass
class HittingTimeStats:
    count: int
    mean: float
    variance: float
    standard_error: float
    variance_se: float
    histogram: tuple = field(default=((), ()))

    @property
    def empty(self) -> bool:
        return self.count == 0

    def to_dict(self) -> dict:
        counts, edges = self.histogram
        return {
            "count": self.count,
            "mean": self.mean,
            "variance": self.variance,
            "standard_error": self.standard_error,
            "variance_se": self.variance_se,
            "histogram": {"counts": list(map(int, counts)), "edges": list(map(float, edges))},
        }


def hitting_time_stats(records, bins=30, labels=None) -> HittingTimeStats:
    """Statistics of the first time the trapping DFS is reached.

    Only trajectories trapped in a decoherence-free subspace (labels starting
    with ``'q'`` unless ``labels`` is given) contribute.  An empty selection
    yields ``count == 0`` and NaN moments.
    """
    taus = np.array(
        [
            r.hitting_time
            for r in records
            if r.hitting_time is not None
            and (r.trapped_in in labels if labels else r.trapped_in.startswith("q"))
        ],
        dtype=float,
    )
    n = len(taus)
    if n == 0:
        return HittingTimeStats(0, float("nan"), float("nan"), float("nan"), float("nan"))
    mean = float(taus.mean())
    var = float(taus.var(ddof=1)) if n > 1 else 0.0
    m4 = float(np.mean((taus - mean) ** 4))
    var_se = math.sqrt(max(m4 - var**2 * (n - 3) / (n - 1), 0.0) / n) if n > 3 else float("nan")
    counts, edges = np.histogram(taus, bins=bins)
    return HittingTimeStats(
        count=n,
        mean=mean,
        variance=var,
        standard_error=math.sqrt(var / n),
        variance_se=var_se,
        histogram=(counts, edges),
    )


def single_crossover(means, errors, z: float = 2.0) -> dict:
    """Test that a sequence first decreases then increases.

    Consecutive differences count only when significant at ``z`` combined
    standard errors.  The sequence passes when the significant differences
    change sign exactly once, from decreasing to increasing.
    """
    means = np.asarray(means, dtype=float)
    errors = np.asarray(errors, dtype=float)
    signs = []
    for i in range(len(means) - 1):
        diff = means[i + 1] - means[i]
        if abs(diff) > z * math.hypot(errors[i], errors[i + 1]):
            signs.append(int(np.sign(diff)))
        else:
            signs.append(0)
    significant = [s for s in signs if s != 0]
    changes = sum(1 for x, y in zip(significant, significant[1:]) if x != y)
    ok = changes == 1 and bool(significant) and significant[0] < 0 and significant[-1] > 0
    return {"signs": signs, "direction_changes": changes, "passes": ok, "argmin": int(np.argmin(means))}


# ----------------------------------------------------------------------------
# multiplexing


def multiplexing_report(records, frequencies=None, rel_tol: float = 0.01, nsigma: float = 3.0) -> dict:
    """Histogram of synchronisation frequencies over records with verdicts.

    Detected frequencies are snapped to the nearest entry of ``frequencies``
    within ``rel_tol``; others are counted under ``'other'``.
    """
    records = list(records)
    m = len(records)
    hist: dict = {}
    unsynced = 0
    for r in records:
        v = r.verdict
        if v is None or not v.synchronized:
            unsynced += 1
            continue
        key = "other"
        if frequencies is not None:
            for f in frequencies:
                if abs(v.frequency - f) <= rel_tol * f:
                    key = float(f)
                    break
        else:
            key = round(float(v.frequency), 3)
        hist[key] = hist.get(key, 0) + 1
    ratios = {}
    for key, count in hist.items():
        p, half = binomial_interval(count, m, nsigma) if m else (float("nan"), float("nan"))
        ratios[key] = {"count": count, "fraction": p, "half_width": half}
    return {"histogram": hist, "ratios": ratios, "unsynchronized": unsynced, "total": m}
