"""XY spin chain in a transverse field with single-site homodyne monitoring.

Energies and rates are in units of the coupling ``J`` (``J = 1`` unless
overridden); times are in units of ``1/J``.  Sites are 1-based in every public
argument and report.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .dfs import DfsDecomposition, find_dfs, fix_phase
from .errors import ConfigError
from .linalg import SIGMA_X, SIGMA_Y, SIGMA_Z, PureEnsemble, kron_chain, site_operator

__all__ = [
    "ChainParams",
    "ChainModel",
    "InitialStateSpec",
    "build_hamiltonian",
    "build_measurement",
    "build_classical_noise_generator",
    "build_model",
    "basis_state",
    "realize_initial_state",
]

MAX_SITES = 10


@dataclass(frozen=True)
class ChainParams:
    """Parameters of the monitored chain.

    ``gamma`` is the reduced measurement strength Gamma/J.  ``N = 1`` is
    accepted for unit tests only; scenario configs require ``N >= 2``.
    """

    N: int
    J: float = 1.0
    h: float = 1.0
    gamma: float = 0.0
    measured_site: int = 1

    def __post_init__(self):
        if not isinstance(self.N, (int, np.integer)) or not 1 <= self.N <= MAX_SITES:
            raise ConfigError(f"N must be an integer in 1..{MAX_SITES}, got {self.N!r}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not 1 <= self.measured_site <= self.N:
            raise ConfigError(f"measured_site must lie in 1..{self.N}, got {self.measured_site}")

    @property
    def Gamma(self) -> float:
        return self.gamma * self.J


_HOP = (np.kron(SIGMA_X, SIGMA_X) + np.kron(SIGMA_Y, SIGMA_Y)).real.astype(complex)


def build_hamiltonian(params: ChainParams) -> np.ndarray:
    """``(J/2) sum_j (XX + YY)_{j,j+1} + h sum_j Z_j`` as a dense matrix."""
    n = params.N
    dim = 2**n
    H = np.zeros((dim, dim), dtype=complex)
    for j in range(n - 1):
        left, right = np.eye(2**j), np.eye(2 ** (n - j - 2))
        H += 0.5 * params.J * np.kron(np.kron(left, _HOP), right)
    bits = (np.arange(dim)[:, None] >> np.arange(n - 1, -1, -1)) & 1
    H[np.diag_indices(dim)] += params.h * np.sum(1 - 2 * bits, axis=1)
    return H


def build_measurement(params: ChainParams) -> np.ndarray:
    """``L = sqrt(Gamma) sigma^z_u``."""
    return np.sqrt(params.Gamma) * site_operator(SIGMA_Z, params.measured_site - 1, params.N)


def build_classical_noise_generator(params: ChainParams) -> np.ndarray:
    """Hermitian generator ``G`` of the noisy Hamiltonian ``H + xi(t) G``."""
    return build_measurement(params)


def basis_state(bits: str) -> np.ndarray:
    """Computational basis vector; ``'0'`` is the ``sigma^z = +1`` state of a site."""
    if not bits or set(bits) - {"0", "1"}:
        raise ConfigError(f"invalid bitstring {bits!r}")
    v = np.zeros(2 ** len(bits), dtype=complex)
    v[int(bits, 2)] = 1.0
    return v


@dataclass
class ChainModel:
    """Operators of a :class:`ChainParams` instance, built once and shared read-only."""

    params: ChainParams
    H: np.ndarray = field(repr=False)
    L: np.ndarray = field(repr=False)
    G: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.params.N

    @property
    def dim(self) -> int:
        return 2**self.params.N

    @cached_property
    def site_z(self) -> list:
        return [site_operator(SIGMA_Z, j, self.N) for j in range(self.N)]

    @cached_property
    def magnetization(self) -> np.ndarray:
        return np.diag(np.diag(sum(self.site_z))).astype(complex)

    @cached_property
    def spin_flip(self) -> np.ndarray:
        return kron_chain([SIGMA_X] * self.N)

    def dfs(self, tol: float = 1e-8) -> DfsDecomposition:
        """DFS decomposition resolved by magnetisation sector (cached per tol)."""
        cache = self.__dict__.setdefault("_dfs_cache", {})
        if tol not in cache:
            scale = np.sqrt(self.params.Gamma) if self.params.Gamma > 0 else None
            cache[tol] = find_dfs(self.H, self.L, tol=tol, charges=[self.magnetization], c_scale=scale)
        return cache[tol]


def build_model(params: ChainParams) -> ChainModel:
    return ChainModel(
        params=params,
        H=build_hamiltonian(params),
        L=build_measurement(params),
        G=build_classical_noise_generator(params),
    )


@dataclass
class InitialStateSpec:
    """Initial state in terms of DFS modes and complement states.

    ``kind`` is ``"mixture"`` (terms carry probabilities), ``"superposition"``
    (terms carry amplitudes, real or ``[re, im]``) or ``"explicit"`` (terms
    are computational-basis bitstrings with amplitudes).

    Term labels:

    ``q<k>``           the mode state of DFS ``k``; valid when it supports one frequency
    ``q<k>@<freq>``    the mode of DFS ``k`` oscillating at Bohr frequency ``freq``
    ``p`` / ``p:<bits>`` normalised complement projection of a basis state
                       (default bits: site 1 flipped up, all others down)
    ``flip:<label>``   global spin flip of another label's state
    """

    kind: str
    terms: list

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in {"mixture", "superposition", "explicit"}:
            raise ConfigError(f"unknown initial-state kind {self.kind!r}")
        if not self.terms:
            raise ConfigError("initial state needs at least one term")
        self.terms = [(str(label), _coerce_value(value)) for label, value in self.terms]
        if self.kind == "mixture":
            weights = np.array([v for _, v in self.terms])
            if np.any(np.iscomplex(weights)) or np.any(weights.real < 0):
                raise ConfigError("mixture weights must be non-negative reals")
            if abs(weights.real.sum() - 1.0) > 1e-10:
                raise ConfigError(f"mixture weights sum to {weights.real.sum()}, not 1")
        else:
            norm = sum(abs(v) ** 2 for _, v in self.terms)
            if abs(norm - 1.0) > 1e-10:
                raise ConfigError(f"superposition amplitudes have norm^2 {norm}, not 1")

    def to_dict(self) -> dict:
        def encode(v):
            v = complex(v)
            return v.real if v.imag == 0 else [v.real, v.imag]

        return {"kind": self.kind, "terms": [[label, encode(v)] for label, v in self.terms]}


def _coerce_value(value):
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ConfigError(f"complex amplitude must be [re, im], got {value!r}")
        return complex(float(value[0]), float(value[1]))
    if isinstance(value, str):
        from .config import parse_number

        return parse_number(value)
    return complex(value) if isinstance(value, complex) else float(value)


_MODE = re.compile(r"^q(\d+)(?:@(.+))?$")


def _mode_state(label: str, dec: DfsDecomposition) -> np.ndarray:
    m = _MODE.match(label)
    index = int(m.group(1))
    if not 1 <= index <= len(dec.subspaces):
        raise ConfigError(
            f"label {label!r}: model has {len(dec.subspaces)} DFS "
            f"({', '.join(s.label for s in dec.subspaces) or 'none'})"
        )
    sub = dec.subspaces[index - 1]
    available = sub.bohr_frequencies
    if m.group(2) is None:
        if len(available) != 1:
            raise ConfigError(
                f"label {label!r} is ambiguous; {sub.label} supports modes at {available}; "
                f"write e.g. {sub.label}@{available[0]:.6g}" if available else
                f"{sub.label} supports no oscillating mode"
            )
        freq = available[0]
    else:
        from .config import parse_number

        freq = float(np.real(parse_number(m.group(2))))
    pairs = sub.mode_pairs(freq)
    if not pairs:
        raise ConfigError(
            f"label {label!r}: no mode at frequency {freq:.6g} in {sub.label}; "
            f"available: {[round(f, 9) for f in available]}"
        )
    i, j = pairs[0]
    return (sub.basis[:, i] + sub.basis[:, j]) / np.sqrt(2)


def _resolve(label: str, dec: DfsDecomposition, model: ChainModel) -> np.ndarray:
    label = label.strip()
    if label.startswith("flip:"):
        return model.spin_flip @ _resolve(label[5:], dec, model)
    if _MODE.match(label):
        return _mode_state(label, dec)
    if label == "p" or label.startswith("p:"):
        bits = label[2:] if label.startswith("p:") else "0" + "1" * (model.N - 1)
        if len(bits) != model.N:
            raise ConfigError(f"label {label!r}: seed needs {model.N} bits")
        seed = basis_state(bits)
        basis = dec.complement_basis
        proj = basis @ (basis.conj().T @ seed)
        norm = np.linalg.norm(proj)
        if norm < 1e-8:
            raise ConfigError(f"label {label!r}: seed state has no complement component")
        return fix_phase(proj / norm)
    if set(label) <= {"0", "1"} and len(label) == model.N:
        return basis_state(label)
    raise ConfigError(
        f"unresolvable state label {label!r}; available: "
        + ", ".join([s.label for s in dec.subspaces] + ["p", "p:<bits>", "flip:<label>", "<bits>"])
    )


def realize_initial_state(spec: InitialStateSpec, dfs: DfsDecomposition, model: ChainModel):
    """Turn a spec into a pure vector or a :class:`PureEnsemble`."""
    states = [_resolve(label, dfs, model) for label, _ in spec.terms]
    if spec.kind == "mixture":
        keep = [(float(np.real(v)), s) for (_, v), s in zip(spec.terms, states) if np.real(v) > 0]
        weights = np.array([w for w, _ in keep])
        weights = weights / weights.sum()
        return PureEnsemble(weights=weights, states=[s for _, s in keep])
    psi = sum(complex(v) * s for (_, v), s in zip(spec.terms, states))
    norm = np.linalg.norm(psi)
    if abs(norm - 1.0) > 1e-8:
        raise ConfigError(
            f"superposition terms are not orthonormal (norm {norm:.6g}); "
            "use labels from distinct subspaces"
        )
    return psi / norm

