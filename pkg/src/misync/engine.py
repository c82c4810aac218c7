"""Time evolution of the monitored chain.

Three dynamics are provided:

* the Ito homodyne stochastic Schroedinger equation (Euler-Maruyama), used
  for pure states and for mixtures unravelled as a :class:`PureEnsemble`
  conditioned on one shared measurement record;
* stochastic unitary dynamics driven by classical white noise in the
  Stratonovich sense (implicit midpoint, exactly unitary; Heun on request);
* the deterministic Lindblad equation (RK4).

Ensembles are propagated in a reduced basis: the smallest subspace that
contains the initial state and is closed under ``H`` and ``L``.  The basis is
adapted to the block decomposition (DFS, dark states, complement) so block
overlaps are sums of squared amplitudes over contiguous index ranges.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dfs import DfsDecomposition
from .errors import ConfigError, StepSizeError, StructuralError
from .linalg import PureEnsemble, as_density
from ._kernel import HEUN, MIDPOINT, OK, QUANTUM, propagate

__all__ = [
    "IntegratorConfig",
    "ReducedSpace",
    "TrajectoryRecord",
    "EnsembleResult",
    "LindbladResult",
    "step_sse",
    "step_sme",
    "lindblad_rhs",
    "build_reduced_space",
    "noise_path",
    "noise_stream",
    "evolve_trajectory",
    "evolve_classical_noise",
    "evolve_lindblad",
    "simulate_ensemble",
]

SCHEMES = ("euler-maruyama", "heun-stratonovich", "midpoint-stratonovich", "rk4")
REDUCE_GROUP = 25
CLASSICAL_SCHEMES = {"heun-stratonovich": HEUN, "midpoint-stratonovich": MIDPOINT}
COMPLEMENT = "p"
UNDECIDED = "undecided"
NORM_FLOOR = 1e-6


@dataclass(frozen=True)
class IntegratorConfig:
    """Discretisation and classification settings (times in units of ``1/J``)."""

    dt: float = 1e-3
    t_final: float = 10.0
    scheme: str = "euler-maruyama"
    renormalize_every_step: bool = True
    seed: int = 0
    stream_id: int = 0
    sample_stride: float = 0.05
    lindblad_dt: float | None = None
    trap_epsilon: float = 1e-3
    dwell: float = 1.0
    max_halvings: int = 3
    refine: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not self.t_final >= self.dt:
            raise ConfigError(f"t_final ({self.t_final}) must be >= dt ({self.dt})")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.sample_stride < self.dt:
            raise ConfigError("sample_stride must be at least dt")
        if not 0 < self.trap_epsilon < 0.5:
            raise ConfigError("trap_epsilon must lie in (0, 0.5)")
        if self.dwell < 0:
            raise ConfigError("dwell must be non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.refine < 0 or self.stride_steps % 2**self.refine:
            raise ConfigError("refine levels must divide the sample stride")

    @property
    def stride_steps(self) -> int:
        return max(1, int(round(self.sample_stride / self.dt)))

    @property
    def n_samples(self) -> int:
        return int(math.ceil(round(self.t_final / self.dt, 6) / self.stride_steps)) + 1

    @property
    def n_steps(self) -> int:
        return (self.n_samples - 1) * self.stride_steps

    @property
    def sample_dt(self) -> float:
        return self.stride_steps * self.dt

    def sample_times(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.sample_dt

    def halved(self) -> "IntegratorConfig":
        """Same noise path, refined by one Brownian-bridge level."""
        return replace(self, dt=self.dt / 2, refine=self.refine + 1)


# ----------------------------------------------------------------------------
# single steps


def step_sse(psi: np.ndarray, H: np.ndarray, L: np.ndarray, dt: float, dW: float) -> np.ndarray:
    """One Euler-Maruyama step of the homodyne stochastic Schroedinger equation.

    ``d|psi> = (-iH dt - [L^dag L/2 - X L/2 + X^2/8] dt + [L - X/2] dW)|psi>``
    with ``X = <L + L^dag>``, followed by renormalisation.  The
    ``-iH`` part carries its second-order Taylor term so that
    long runs do not pump population between energy levels.
    """
    psi = np.asarray(psi, dtype=complex)
    Lpsi = L @ psi
    X = 2.0 * np.real(np.vdot(psi, Lpsi))
    Hpsi = -1j * (H @ psi)
    drift = Hpsi - 1j * 0.5 * dt * (H @ Hpsi) - 0.5 * (L.conj().T @ Lpsi)
    dpsi = (drift + 0.5 * X * Lpsi - X * X / 8.0 * psi) * dt
    dpsi += (Lpsi - 0.5 * X * psi) * dW
    out = psi + dpsi
    norm = np.linalg.norm(out)
    if norm < NORM_FLOOR:
        raise StepSizeError("state norm collapsed during an SSE step; reduce dt")
    return out / norm


def step_sme(rho: np.ndarray, H: np.ndarray, L: np.ndarray, dt: float, dW: float) -> np.ndarray:
    """One Euler-Maruyama step of the homodyne stochastic master equation.

    The result is symmetrised and renormalised to unit trace.
    """
    rho = np.asarray(rho, dtype=complex)
    Ld = L.conj().T
    X = np.real(np.trace((L + Ld) @ rho))
    drift = lindblad_rhs(rho, H, L)
    noise = L @ rho + rho @ Ld - X * rho
    out = rho + drift * dt + noise * dW
    out = 0.5 * (out + out.conj().T)
    out /= np.real(np.trace(out))
    lowest = np.linalg.eigvalsh(out)[0]
    if lowest < -1e-6:
        raise StepSizeError(f"SME step produced eigenvalue {lowest:.3e}; reduce dt")
    return out


def lindblad_rhs(rho: np.ndarray, H: np.ndarray, L: np.ndarray) -> np.ndarray:
    """``-i[H, rho] + L rho L^dag - {L^dag L, rho}/2``."""
    Ld = L.conj().T
    LdL = Ld @ L
    return -1j * (H @ rho - rho @ H) + L @ rho @ Ld - 0.5 * (LdL @ rho + rho @ LdL)


# ----------------------------------------------------------------------------
# reduced invariant subspace


@dataclass
class ReducedSpace:
    """Block-adapted orthonormal basis of an ``(H, L)``-invariant subspace.

    ``labels`` lists every block of the decomposition (DFS, dark states,
    complement ``'p'``) including blocks the initial state does not reach;
    those have empty slices.
    """

    basis: np.ndarray
    H: np.ndarray
    L: np.ndarray
    site_z: np.ndarray
    labels: list
    slices: list
    n_sites: int

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def full_dim(self) -> int:
        return self.basis.shape[0]

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def project(self, psi: np.ndarray) -> np.ndarray:
        coeffs = self.basis.conj().T @ psi
        lost = abs(np.linalg.norm(psi) ** 2 - np.linalg.norm(coeffs) ** 2)
        if lost > 1e-9:
            raise StructuralError(f"state leaves the reduced space (lost weight {lost:.2e})")
        return coeffs

    def lift(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state)
        if state.ndim == 1:
            return self.basis @ state
        return self.basis @ state @ self.basis.conj().T

    def block_overlaps(self, probs: np.ndarray) -> np.ndarray:
        """Sum per-basis-vector probabilities (last axis) into block overlaps."""
        out = np.zeros(probs.shape[:-1] + (len(self.labels),))
        for b, sl in enumerate(self.slices):
            if sl.stop > sl.start:
                out[..., b] = probs[..., sl].sum(axis=-1)
        return out


def _closure(ops, seeds, tol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis of the smallest subspace containing ``seeds`` and closed under ``ops``.

    A candidate is accepted when its component orthogonal to the current
    basis exceeds ``tol`` relative to its own norm, so round-off does not
    grow the space.
    """
    dim = seeds[0].shape[0] if seeds else 0
    basis = np.zeros((dim, 0), dtype=complex)
    queue = [s for s in seeds if np.linalg.norm(s) > tol]
    while queue and basis.shape[1] < dim:
        v = queue.pop(0).astype(complex)
        scale = np.linalg.norm(v)
        for _ in range(2):
            v = v - basis @ (basis.conj().T @ v)
        norm = np.linalg.norm(v)
        if norm <= tol * scale:
            continue
        v = v / norm
        basis = np.column_stack([basis, v])
        queue.extend(op @ v for op in ops)
    return basis


def build_reduced_space(model, dec: DfsDecomposition, states, reduce: bool = True) -> ReducedSpace:
    """Reduced basis for propagating ``states`` (vectors) under ``model``.

    With ``reduce=False`` the full Hilbert space is used, still in the
    block-adapted basis.
    """
    blocks = [(s.label, s.basis) for s in dec.blocks()] + [(COMPLEMENT, dec.complement_basis)]
    columns, slices, start = [], [], 0
    for _, B in blocks:
        if reduce and B.shape[1] > 0:
            Hb = B.conj().T @ model.H @ B
            Lb = B.conj().T @ model.L @ B
            seeds = [B.conj().T @ psi for psi in states]
            Q = _closure([Hb, Lb], seeds)
            part = B @ Q
        else:
            part = B
        columns.append(part)
        slices.append(slice(start, start + part.shape[1]))
        start += part.shape[1]
    V = np.column_stack(columns) if start else np.zeros((dec.dim, 0), dtype=complex)

    def restrict(op):
        red = V.conj().T @ op @ V
        # blocks are invariant, so cross-block entries are round-off
        mask = np.zeros(red.shape, dtype=bool)
        for sl in slices:
            mask[sl, sl] = True
        red[~mask] = 0.0
        return 0.5 * (red + red.conj().T)

    site_z = np.array([V.conj().T @ z @ V for z in model.site_z])
    return ReducedSpace(
        basis=V,
        H=restrict(model.H),
        L=restrict(model.L),
        site_z=site_z,
        labels=[label for label, _ in blocks],
        slices=slices,
        n_sites=model.N,
    )


def _members(state0):
    if isinstance(state0, PureEnsemble):
        return np.array(state0.weights, dtype=float), list(state0.states)
    state0 = np.asarray(state0, dtype=complex)
    if state0.ndim != 1:
        raise StructuralError("trajectory propagation needs a vector or a PureEnsemble")
    return np.ones(1), [state0]


# ----------------------------------------------------------------------------
# random numbers


def noise_stream(seed: int, stream_id: int) -> np.random.Generator:
    """Counter-based generator for one trajectory, keyed by ``(seed, stream_id)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))))


def noise_path(seed: int, stream_id: int, n_base: int, levels: int = 0) -> np.ndarray:
    """Standard normal increments of one Brownian path, refined ``levels`` times.

    Each refinement splits a step into two halves whose increments sum
    to the coarse one (Brownian bridge), so runs at ``dt`` and ``dt/2``
    follow the same path.
    """
    z = noise_stream(seed, stream_id).standard_normal(n_base)
    for level in range(1, levels + 1):
        gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(stream_id), level)))
        )
        xi = gen.standard_normal(len(z))
        fine = np.empty(2 * len(z))
        fine[0::2] = (z + xi) / math.sqrt(2.0)
        fine[1::2] = (z - xi) / math.sqrt(2.0)
        z = fine
    return z


# ----------------------------------------------------------------------------
# records


@dataclass
class TrajectoryRecord:
    """Samples and classification of one trajectory.

    ``times``/``observables``/``overlaps`` cover either the whole run or the
    trailing analysis window, depending on what was requested.  ``final_state``
    and ``time_average`` live in the reduced basis of the owning result.
    """

    stream_id: int
    times: np.ndarray
    observables: np.ndarray
    overlaps: np.ndarray
    labels: list
    trapped_in: str
    hitting_time: float | None
    first_hits: dict
    final_state: object
    time_average: np.ndarray | None = None
    purity_drift: float | None = None
    dt: float | None = None
    verdict: object = None

    def overlap(self, label: str) -> np.ndarray:
        return self.overlaps[:, self.labels.index(label)]


@dataclass
class EnsembleResult:
    """Output of :func:`simulate_ensemble`."""

    space: ReducedSpace
    kind: str
    config: IntegratorConfig
    times: np.ndarray
    records: list
    overlap_sum: np.ndarray
    overlap_sumsq: np.ndarray
    average_from: float | None = None
    initial_overlaps: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> list:
        return self.space.labels

    def mean_overlap(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample ensemble mean of every block overlap and its standard error."""
        m = self.size
        mean = self.overlap_sum / m
        var = np.clip(self.overlap_sumsq / m - mean**2, 0.0, None) * m / max(m - 1, 1)
        return mean, np.sqrt(var / m)

    def mean_density(self) -> np.ndarray:
        """Ensemble mean of the final conditional states (reduced basis)."""
        return sum(as_density(r.final_state) for r in self.records) / self.size

    def trapping_counts(self) -> dict:
        counts = {label: 0 for label in self.labels + [UNDECIDED]}
        for r in self.records:
            counts[r.trapped_in] += 1
        return counts


@dataclass
class LindbladResult:
    """Lindblad solution sampled at ``times`` (states in the reduced basis)."""

    space: ReducedSpace
    times: np.ndarray
    states: np.ndarray
    observables: np.ndarray
    overlaps: np.ndarray
    steady_state: np.ndarray
    steady_fraction: float = 0.2
    trace_drift: float = 0.0

    def state(self, i: int, full: bool = False) -> np.ndarray:
        return self.space.lift(self.states[i]) if full else self.states[i]


# ----------------------------------------------------------------------------
# batched kernel


@dataclass
class _Task:
    space: ReducedSpace
    members: np.ndarray
    weights: np.ndarray
    kind: str
    config: IntegratorConfig
    streams: np.ndarray
    full_streams: frozenset
    tail_samples: int
    average_from: float | None
    origin: int = 0


@dataclass
class _Trajectory:
    stream_id: int
    dt: float
    overlaps: np.ndarray
    observables: np.ndarray
    obs_from: int
    final_members: np.ndarray
    final_weights: np.ndarray
    time_average: np.ndarray | None
    purity_drift: float | None
    trapped: int = -1
    first_hit: np.ndarray | None = None


@dataclass
class _ChunkOutput:
    trajectories: list
    overlap_sums: list
    overlap_sumsqs: list


def _sparse_pattern(*ops):
    mask = np.zeros(ops[0].shape, dtype=bool)
    for op in ops:
        mask |= np.abs(op) > 0
    rows, cols = np.nonzero(mask)
    rowptr = np.searchsorted(rows, np.arange(ops[0].shape[0] + 1)).astype(np.int64)
    return rowptr, cols.astype(np.int64), [np.ascontiguousarray(op[rows, cols]) for op in ops]


def _member_ranges(members: np.ndarray, slices) -> tuple[np.ndarray, np.ndarray]:
    """Row range spanning every block in which each member has weight."""
    lo = np.zeros(len(members), dtype=np.int64)
    hi = np.zeros(len(members), dtype=np.int64)
    for k, m in enumerate(members):
        used = [sl for sl in slices if sl.stop > sl.start and np.any(np.abs(m[sl]) > 0)]
        if used:
            lo[k] = min(sl.start for sl in used)
            hi[k] = max(sl.stop for sl in used)
    return lo, hi


def _run_one(task: _Task, stream: int, pattern) -> _Trajectory:
    space, cfg = task.space, task.config
    rowptr, cols, (a_vals, l_vals, h_vals, g_vals) = pattern
    starts = np.array([sl.start for sl in space.slices], dtype=np.int64)
    stops = np.array([sl.stop for sl in space.slices], dtype=np.int64)
    quantum = task.kind == "quantum"
    mode = QUANTUM if quantum else CLASSICAL_SCHEMES[cfg.scheme]
    n_samples = cfg.n_samples
    full = stream in task.full_streams
    obs_from = 0 if full else max(n_samples - task.tail_samples, 0)
    avg_from = n_samples + 1
    if task.average_from is not None:
        avg_from = min(int(math.ceil(task.average_from / cfg.sample_dt - 1e-9)), n_samples - 1)
    lo, hi = _member_ranges(task.members, space.slices)
    for attempt in range(cfg.max_halvings + 1):
        stride = cfg.stride_steps * 2**attempt
        dt = cfg.sample_dt / stride
        psi = np.array(task.members, dtype=np.complex128)
        u = np.array(task.weights, dtype=np.float64)
        levels = cfg.refine + attempt
        z = noise_path(cfg.seed, stream, (n_samples - 1) * stride // 2**levels, levels)
        status, failed, ov, obs, rho_sum, pdev = propagate(
            psi, u, rowptr, cols, a_vals, l_vals, h_vals, g_vals, z, dt, stride, n_samples,
            mode, cfg.renormalize_every_step, starts, stops, space.site_z, obs_from, avg_from, lo, hi,
        )
        if status == OK:
            break
    else:
        raise StepSizeError(
            f"trajectory {stream}: state norm collapsed after {cfg.max_halvings} dt halvings",
            time=failed * dt,
        )
    return _Trajectory(
        stream_id=int(stream),
        dt=dt,
        overlaps=ov,
        observables=obs,
        obs_from=obs_from,
        final_members=psi,
        final_weights=u,
        time_average=rho_sum / (n_samples - avg_from) if avg_from < n_samples else None,
        purity_drift=None if quantum else float(pdev),
    )


def _run_chunk(task: _Task) -> _ChunkOutput:
    space = task.space
    pattern = _sparse_pattern(-1j * space.H - 0.5 * (space.L @ space.L), space.L, -1j * space.H, -1j * space.L)
    cfg = task.config
    dwell_samples = int(math.ceil(cfg.dwell / cfg.sample_dt - 1e-9))
    trajectories = []
    sums, sumsqs = [], []
    for stream in task.streams:
        traj = _run_one(task, int(stream), pattern)
        if (int(stream) - task.origin) % REDUCE_GROUP == 0 or not sums:
            sums.append(traj.overlaps.copy())
            sumsqs.append(traj.overlaps**2)
        else:
            sums[-1] += traj.overlaps
            sumsqs[-1] += traj.overlaps**2
        traj.trapped, traj.first_hit = _classify(traj.overlaps, cfg.trap_epsilon, dwell_samples)
        tail = task.tail_samples
        if int(stream) not in task.full_streams:
            traj.overlaps = traj.overlaps[-tail:].copy()
        trajectories.append(traj)
    return _ChunkOutput(trajectories=trajectories, overlap_sums=sums, overlap_sumsqs=sumsqs)


def _classify(ov: np.ndarray, eps: float, dwell_samples: int):
    """Trapping block (or -1), per-block first hit sample (or -1)."""
    above = ov >= 1.0 - eps
    first_hit = np.where(above.any(0), above.argmax(0), -1)
    block = np.where(above.any(1), above.argmax(1), -1)
    last = block[-1]
    if last < 0:
        return -1, first_hit
    changed = np.flatnonzero(block != last)
    since = changed[-1] + 1 if changed.size else 0
    if len(block) - 1 - since < dwell_samples:
        return -1, first_hit
    return int(last), first_hit


# ----------------------------------------------------------------------------
# public drivers


def simulate_ensemble(
    model,
    dec: DfsDecomposition,
    state0,
    config: IntegratorConfig,
    size: int,
    kind: str = "quantum",
    chunk_size: int = 250,
    workers: int = 1,
    full_streams=(),
    tail_window: float = 20.0,
    average_fraction: float | None = None,
    reduce: bool = True,
    first_stream: int = 0,
) -> EnsembleResult:
    """Propagate ``size`` independent trajectories from ``state0``.

    Trajectory ``i`` uses noise stream ``first_stream + i``, so every
    trajectory is reproducible on its own and results do not depend on
    ``chunk_size`` or ``workers``.  Ensemble sums are formed over fixed groups
    of ``REDUCE_GROUP`` consecutive streams and merged in stream order, so they
    are bit-identical for any chunking (``chunk_size`` is rounded up to whole
    groups).

    Parameters
    ----------
    kind : {'quantum', 'classical'}
        Homodyne measurement backaction or classical Stratonovich noise.
    full_streams : iterable of int
        Streams whose complete time series are kept; all others keep only the
        trailing ``tail_window``.
    average_fraction : float, optional
        When given, accumulate the time-averaged state over the final fraction
        of the horizon.
    """
    if kind not in ("quantum", "classical"):
        raise ConfigError(f"unknown noise kind {kind!r}")
    if size < 1:
        raise ConfigError("ensemble size must be positive")
    if kind == "classical" and config.scheme not in CLASSICAL_SCHEMES:
        config = replace(config, scheme="midpoint-stratonovich")
    weights, states = _members(state0)
    space = build_reduced_space(model, dec, states, reduce=reduce)
    members = np.array([space.project(s) for s in states])
    average_from = None
    if average_fraction is not None:
        if not 0 < average_fraction <= 1:
            raise ConfigError("average_fraction must lie in (0, 1]")
        average_from = config.t_final * (1 - average_fraction)
    tail_samples = min(int(math.ceil(tail_window / config.sample_dt - 1e-9)) + 1, config.n_samples)
    streams = np.arange(first_stream, first_stream + size)
    # partial sums cover fixed groups of streams, so chunks must hold whole groups
    chunk_size = max(1, math.ceil(chunk_size / REDUCE_GROUP)) * REDUCE_GROUP
    tasks = [
        _Task(
            space=space,
            members=members,
            weights=np.asarray(weights, dtype=float),
            kind=kind,
            config=config,
            streams=streams[i : i + chunk_size],
            full_streams=frozenset(int(s) for s in full_streams),
            tail_samples=tail_samples,
            average_from=average_from,
            origin=first_stream,
        )
        for i in range(0, size, chunk_size)
    ]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_chunk, tasks))
    else:
        outputs = [_run_chunk(t) for t in tasks]

    probs0 = np.asarray(weights) @ np.abs(members) ** 2
    return _assemble(space, kind, config, outputs, average_from, space.block_overlaps(probs0))


def _assemble(space, kind, config, outputs, average_from, initial_overlaps) -> EnsembleResult:
    labels = space.labels
    times = config.sample_times()
    records = []
    ov_sum = sum(part for out in outputs for part in out.overlap_sums)
    ov_sumsq = sum(part for out in outputs for part in out.overlap_sumsqs)
    for out in outputs:
        for traj in out.trajectories:
            t_idx = traj.trapped
            hits = {labels[b]: float(times[h]) for b, h in enumerate(traj.first_hit) if h >= 0}
            trapped_in = labels[t_idx] if t_idx >= 0 else UNDECIDED
            if traj.final_members.shape[0] == 1:
                final = traj.final_members[0]
            else:
                final = PureEnsemble(weights=traj.final_weights, states=list(traj.final_members))
            records.append(
                TrajectoryRecord(
                    stream_id=traj.stream_id,
                    times=times[traj.obs_from :],
                    observables=traj.observables,
                    overlaps=traj.overlaps,
                    labels=labels,
                    trapped_in=trapped_in,
                    hitting_time=hits.get(trapped_in) if t_idx >= 0 else None,
                    first_hits=hits,
                    final_state=final,
                    time_average=traj.time_average,
                    purity_drift=traj.purity_drift,
                    dt=traj.dt,
                )
            )
    return EnsembleResult(
        space=space,
        kind=kind,
        config=config,
        times=times,
        records=records,
        overlap_sum=ov_sum,
        overlap_sumsq=ov_sumsq,
        average_from=average_from,
        initial_overlaps=initial_overlaps,
    )


def evolve_trajectory(state0, model, dfs: DfsDecomposition, config: IntegratorConfig, reduce: bool = True) -> TrajectoryRecord:
    """Single homodyne trajectory with stream ``config.stream_id``; full series kept."""
    result = simulate_ensemble(
        model, dfs, state0, config, 1, kind="quantum", full_streams=[config.stream_id],
        reduce=reduce, first_stream=config.stream_id,
    )
    return result.records[0]


def evolve_classical_noise(state0, model, config: IntegratorConfig, dfs: DfsDecomposition | None = None, reduce: bool = True) -> TrajectoryRecord:
    """Single stochastic-unitary trajectory (Stratonovich); full series kept.

    Uses the implicit midpoint step unless ``config.scheme`` asks for Heun.
    """
    dfs = dfs if dfs is not None else model.dfs()
    result = simulate_ensemble(
        model, dfs, state0, config, 1, kind="classical",
        full_streams=[config.stream_id], reduce=reduce, first_stream=config.stream_id,
    )
    return result.records[0]


def _rk4_propagator(H: np.ndarray, L: np.ndarray, h: float) -> np.ndarray:
    """One RK4 step of the Lindblad equation as a superoperator on row-major vec(rho)."""
    d = H.shape[0]
    eye = np.eye(d)
    LdL = L.conj().T @ L
    gen = (
        -1j * (np.kron(H, eye) - np.kron(eye, H.T))
        + np.kron(L, L.conj())
        - 0.5 * (np.kron(LdL, eye) + np.kron(eye, LdL.T))
    )
    step = h * gen
    out = np.eye(d * d, dtype=complex)
    term = np.eye(d * d, dtype=complex)
    for n in range(1, 5):
        term = term @ step / n
        out = out + term
    return out


def evolve_lindblad(rho0, model, config: IntegratorConfig, dfs: DfsDecomposition | None = None,
                    steady_fraction: float = 0.2, reduce: bool = True) -> LindbladResult:
    """Deterministic RK4 solution of the Lindblad equation sampled every ``sample_stride``.

    ``steady_state`` is the average of the sampled states over the final
    ``steady_fraction`` of the horizon.
    """
    dfs = dfs if dfs is not None else model.dfs()
    if isinstance(rho0, PureEnsemble):
        weights, states = _members(rho0)
        space = build_reduced_space(model, dfs, states, reduce=reduce)
        rho = sum(w * np.outer(c, c.conj()) for w, c in zip(weights, (space.project(s) for s in states)))
    else:
        rho0 = np.asarray(rho0, dtype=complex)
        if rho0.ndim == 1:
            space = build_reduced_space(model, dfs, [rho0], reduce=reduce)
            c = space.project(rho0)
            rho = np.outer(c, c.conj())
        else:
            vals, vecs = np.linalg.eigh(0.5 * (rho0 + rho0.conj().T))
            keep = vals > 1e-14
            space = build_reduced_space(model, dfs, list(vecs[:, keep].T), reduce=reduce)
            rho = space.basis.conj().T @ rho0 @ space.basis
    h = config.lindblad_dt or config.dt
    sample_dt = config.sample_dt
    substeps = max(1, int(round(sample_dt / h)))
    h = sample_dt / substeps
    n_samples = config.n_samples
    d = space.dim
    states = np.zeros((n_samples, d, d), dtype=complex)
    states[0] = rho
    if d <= 32:
        prop = np.linalg.matrix_power(_rk4_propagator(space.H, space.L, h), substeps)
        vec = rho.reshape(-1)
        for s in range(1, n_samples):
            vec = prop @ vec
            states[s] = vec.reshape(d, d)
    else:
        cur = rho
        for s in range(1, n_samples):
            for _ in range(substeps):
                k1 = lindblad_rhs(cur, space.H, space.L)
                k2 = lindblad_rhs(cur + 0.5 * h * k1, space.H, space.L)
                k3 = lindblad_rhs(cur + 0.5 * h * k2, space.H, space.L)
                k4 = lindblad_rhs(cur + h * k3, space.H, space.L)
                cur = cur + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            states[s] = cur
    traces = np.real(np.einsum("tii->t", states))
    drift = float(np.max(np.abs(traces - traces[0])))
    if drift > 1e-6 or not np.all(np.isfinite(traces)):
        raise StepSizeError(f"Lindblad trace drifted by {drift:.2e}; reduce lindblad_dt")
    probs = np.real(np.einsum("tii->ti", states))
    overlaps = space.block_overlaps(probs)
    observables = np.real(np.einsum("jab,tba->tj", space.site_z, states))
    start = int(math.floor(n_samples * (1 - steady_fraction)))
    steady = states[start:].mean(0)
    steady = 0.5 * (steady + steady.conj().T)
    return LindbladResult(
        space=space,
        times=config.sample_times(),
        states=states,
        observables=observables,
        overlaps=overlaps,
        steady_state=steady,
        steady_fraction=steady_fraction,
        trace_drift=drift,
    )
