"""Dense linear algebra and quantum-state primitives.

States are plain numpy arrays: a 1-D complex vector is a pure state, a 2-D
square array is a density matrix.  Mixtures that must be propagated as pure
members are held in a :class:`PureEnsemble`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .errors import ContractViolation, StructuralError

__all__ = [
    "TOLERANCES",
    "Tolerances",
    "IDENTITY",
    "SIGMA_X",
    "SIGMA_Y",
    "SIGMA_Z",
    "PureEnsemble",
    "kron_chain",
    "site_operator",
    "is_hermitian",
    "eigh",
    "expectation",
    "as_density",
    "check_density",
    "purity",
    "fidelity",
    "trace_distance",
    "purity_amplitude",
]


@dataclass
class Tolerances:
    """Numerical tolerances shared across the package.

    A scenario config may override any field; see ``analysis.tolerances`` in
    the config schema.
    """

    hermitian: float = 1e-12
    unitary: float = 1e-10
    norm: float = 1e-10
    trace: float = 1e-10
    min_eigenvalue: float = -1e-9
    eigh_residual: float = 1e-9
    fidelity_clamp: float = 1e-6
    imag_residue: float = 1e-10

    def updated(self, **overrides) -> "Tolerances":
        unknown = set(overrides) - set(self.__dataclass_fields__)
        if unknown:
            raise ContractViolation(f"unknown tolerance(s): {sorted(unknown)}")
        values = {**self.__dict__, **overrides}
        return Tolerances(**values)


TOLERANCES = Tolerances()

IDENTITY = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def kron_chain(factors) -> np.ndarray:
    """Kronecker product of 2x2 factors in left-to-right site order."""
    factors = [np.asarray(f, dtype=complex) for f in factors]
    if not factors:
        raise StructuralError("kron_chain needs at least one factor")
    for k, f in enumerate(factors):
        if f.shape != (2, 2):
            raise StructuralError(f"factor {k} has shape {f.shape}, expected (2, 2)")
    return reduce(np.kron, factors)


def site_operator(op: np.ndarray, site: int, n_sites: int) -> np.ndarray:
    """Embed a single-site operator at 0-based ``site`` of an ``n_sites`` chain."""
    if not 0 <= site < n_sites:
        raise StructuralError(f"site {site} outside chain of length {n_sites}")
    return kron_chain([op if k == site else IDENTITY for k in range(n_sites)])


def _square(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise StructuralError(f"{name} must be square, got shape {m.shape}")
    return m


def is_hermitian(m: np.ndarray, tol: float | None = None) -> bool:
    tol = TOLERANCES.hermitian if tol is None else tol
    m = _square(m)
    return bool(np.max(np.abs(m - m.conj().T), initial=0.0) <= tol)


def eigh(m: np.ndarray, tol: float | None = None):
    """Eigen-decomposition of a Hermitian matrix.

    Returns ascending real eigenvalues and a unitary matrix whose columns are
    the eigenvectors.  Raises :class:`ContractViolation` when ``m`` is not
    Hermitian to within ``tol`` (max absolute entry of ``m - m^dagger``).
    """
    m = _square(m)
    if not is_hermitian(m, tol):
        raise ContractViolation("eigh requires a Hermitian matrix")
    vals, vecs = np.linalg.eigh(m)
    return vals, vecs


def _dims_match(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise StructuralError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def expectation(state: np.ndarray, op: np.ndarray, tol: float | None = None) -> float:
    """Real expectation value ``<psi|A|psi>`` or ``Tr[A rho]``."""
    tol = TOLERANCES.imag_residue if tol is None else tol
    state = np.asarray(state)
    op = _square(op, "observable")
    _dims_match(state, op)
    if state.ndim == 1:
        value = np.vdot(state, op @ state)
    else:
        value = np.trace(op @ state)
    scale = max(1.0, float(np.max(np.abs(op), initial=0.0)))
    if abs(value.imag) > tol * scale:
        raise ContractViolation(
            f"expectation has imaginary part {value.imag:.3e}; is the observable Hermitian?"
        )
    return float(value.real)


def as_density(state) -> np.ndarray:
    """Density matrix of a pure vector, a :class:`PureEnsemble`, or a matrix."""
    if isinstance(state, PureEnsemble):
        return state.density()
    state = np.asarray(state, dtype=complex)
    if state.ndim == 1:
        return np.outer(state, state.conj())
    return _square(state, "density matrix")


def check_density(rho: np.ndarray, tol: Tolerances | None = None) -> None:
    """Raise :class:`ContractViolation` unless ``rho`` is a valid density matrix."""
    tol = tol or TOLERANCES
    rho = _square(rho, "density matrix")
    if abs(np.trace(rho) - 1.0) > tol.trace:
        raise ContractViolation(f"trace {np.trace(rho).real:.12f} differs from 1")
    if not is_hermitian(rho, tol.hermitian):
        raise ContractViolation("density matrix is not Hermitian")
    lowest = np.linalg.eigvalsh(rho)[0]
    if lowest < tol.min_eigenvalue:
        raise ContractViolation(f"density matrix has eigenvalue {lowest:.3e} < 0")


def purity(state) -> float:
    rho = as_density(state)
    return float(np.real(np.vdot(rho, rho)))


def _psd_sqrt(rho: np.ndarray, clamp: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((rho + rho.conj().T) / 2)
    if vals[0] < -clamp:
        raise ContractViolation(f"state has eigenvalue {vals[0]:.3e} below -{clamp:g}")
    vals = _drop_round_off(vals)
    return (vecs * np.sqrt(vals)) @ vecs.conj().T


def _drop_round_off(vals: np.ndarray) -> np.ndarray:
    # eigenvalues below the eigensolver's noise floor become exact zeros, so
    # their square roots (~1e-8) do not leak into fidelities
    floor = len(vals) * np.finfo(float).eps * max(float(np.max(np.abs(vals), initial=0.0)), 1.0)
    return np.where(vals > floor, vals, 0.0)


def fidelity(rho: np.ndarray, sigma: np.ndarray, clamp: float | None = None) -> float:
    """Uhlmann fidelity ``Tr[sqrt(sqrt(rho) sigma sqrt(rho))]^2``.

    Pure vectors are accepted for either argument.  Eigenvalues in
    ``(-clamp, 0)`` are treated as round-off and set to zero.
    """
    clamp = TOLERANCES.fidelity_clamp if clamp is None else clamp
    a = np.asarray(rho, dtype=complex)
    b = np.asarray(sigma, dtype=complex)
    _dims_match(a, b)
    if a.ndim == 1 and b.ndim == 1:
        return float(abs(np.vdot(a, b)) ** 2)
    if a.ndim == 1 or b.ndim == 1:
        vec, mat = (a, b) if a.ndim == 1 else (b, a)
        value = np.real(np.vdot(vec, mat @ vec))
        return float(min(max(value, 0.0), 1.0))
    root = _psd_sqrt(a, clamp)
    inner = root @ b @ root
    vals = np.linalg.eigvalsh((inner + inner.conj().T) / 2)
    if vals[0] < -clamp:
        raise ContractViolation(f"state has eigenvalue {vals[0]:.3e} below -{clamp:g}")
    value = np.sum(np.sqrt(_drop_round_off(vals))) ** 2
    return float(min(max(value, 0.0), 1.0))


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Half the trace norm of ``rho - sigma``."""
    diff = as_density(rho) - as_density(sigma)
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh((diff + diff.conj().T) / 2))))


def purity_amplitude(bloch, tol: float = 1e-12):
    """Purity, oscillation amplitude and l1-coherence of a qubit Bloch vector.

    For a qubit precessing about z the transverse amplitude is
    ``A = sqrt(a_x**2 + a_y**2)`` and ``P = (1 + |a|**2) / 2``, so
    ``A**2 + a_z**2 == 2P - 1`` and ``A <= sqrt(2P - 1)``.  The squared form
    ``A**2 + a_z**2 == (2P - 1)**2`` (bound ``A <= 2P - 1``) holds only for
    pure states, where ``2P - 1 = 1``.

    Returns
    -------
    dict with keys ``purity``, ``amplitude``, ``coherence``,
    ``identity_residual`` (``A**2 + a_z**2 - (2P - 1)``) and
    ``pure_form_residual`` (``A**2 + a_z**2 - (2P - 1)**2``).
    """
    a = np.asarray(bloch, dtype=float)
    if a.shape != (3,):
        raise StructuralError("Bloch vector must have three components")
    norm = float(np.linalg.norm(a))
    if norm > 1.0 + tol:
        raise ContractViolation(f"invalid Bloch vector: |a| = {norm:.6g} > 1")
    p = 0.5 * (1.0 + norm**2)
    amplitude = float(np.hypot(a[0], a[1]))
    lhs = amplitude**2 + a[2] ** 2
    return {
        "purity": p,
        "amplitude": amplitude,
        "coherence": 2.0 * amplitude,
        "identity_residual": lhs - (2 * p - 1),
        "pure_form_residual": lhs - (2 * p - 1) ** 2,
    }


@dataclass
class PureEnsemble:
    """Convex mixture of pure states ``sum_m u_m |psi_m><psi_m|``."""

    weights: np.ndarray
    states: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.states = [np.asarray(s, dtype=complex) for s in self.states]
        if len(self.weights) != len(self.states) or not self.states:
            raise StructuralError("weights and states must be non-empty and equally long")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ContractViolation("ensemble weights must be non-negative and sum to 1")
        dim = self.states[0].shape
        for s in self.states:
            if s.shape != dim or s.ndim != 1:
                raise StructuralError("ensemble members must be vectors of equal length")
            if abs(np.linalg.norm(s) - 1.0) > TOLERANCES.norm:
                raise ContractViolation("ensemble members must be normalised")

    @property
    def dim(self) -> int:
        return self.states[0].shape[0]

    def density(self) -> np.ndarray:
        rho = np.zeros((self.dim, self.dim), dtype=complex)
        for u, s in zip(self.weights, self.states):
            rho += u * np.outer(s, s.conj())
        return rho
