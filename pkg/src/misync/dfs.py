"""Decoherence-free subspaces of a monitored Hamiltonian.

A vector ``v`` belongs to a decoherence-free subspace (DFS) when it is an
eigenvector of both the Hamiltonian ``H`` and the measurement operator ``L``.
Vectors sharing the eigenvalue ``c`` of ``L`` are never separated by the
measurement record, so they are grouped together.

When conserved charges are supplied (for the XY chain: total magnetisation),
the simultaneous eigenvectors are additionally resolved by charge sector.
Observables that commute with the charge only see Bohr frequencies between
levels of the same sector, so frequencies are computed sector by sector.
Sector blocks of equal ``c`` and identical frequency content are reported as
one subspace; one-dimensional blocks cannot oscillate and are reported
separately as dark states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space

from .errors import ContractViolation, StructuralError, UnsupportedModeError
from .linalg import as_density, eigh, is_hermitian

__all__ = [
    "DfsSubspace",
    "DfsDecomposition",
    "find_dfs",
    "bohr_frequencies",
    "synchronized_eigenmode",
    "overlaps",
    "check_decomposition",
    "fix_phase",
]

DEFAULT_TOL = 1e-8


def fix_phase(vecs: np.ndarray, rel: float = 1e-10) -> np.ndarray:
    """Rotate each column so that its first non-negligible entry is real positive."""
    vecs = np.array(vecs, dtype=complex, copy=True)
    single = vecs.ndim == 1
    if single:
        vecs = vecs[:, None]
    for k in range(vecs.shape[1]):
        col = vecs[:, k]
        mags = np.abs(col)
        idx = np.flatnonzero(mags > rel * mags.max())[0]
        vecs[:, k] = col * (np.conj(col[idx]) / mags[idx])
    return vecs[:, 0] if single else vecs


def _cluster(values, tol):
    """Cluster sorted values whose neighbours differ by at most ``tol``."""
    values = sorted(values)
    clusters = []
    for v in values:
        if clusters and v - clusters[-1][-1] <= tol:
            clusters[-1].append(v)
        else:
            clusters.append([v])
    return [float(np.mean(c)) for c in clusters]


def _pair_frequencies(energies, sectors, tol):
    diffs = []
    n = len(energies)
    for i in range(n):
        for j in range(i + 1, n):
            if sectors is not None and sectors[i] != sectors[j]:
                continue
            gap = abs(energies[i] - energies[j])
            if gap > tol:
                diffs.append(gap)
    return _cluster(diffs, tol)


@dataclass
class DfsSubspace:
    """One decoherence-free subspace (or a dark state when ``kind == 'dark'``).

    ``basis`` holds orthonormal columns that are simultaneous eigenvectors of
    ``H`` (eigenvalues ``energies``) and ``L`` (eigenvalue ``c``).
    """

    label: str
    c: float
    basis: np.ndarray
    energies: np.ndarray
    sectors: tuple | None = None
    c_normalized: float | None = None
    kind: str = "dfs"
    freq_tol: float = 1e-9
    _frequencies: list | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.conj().T

    @property
    def bohr_frequencies(self) -> list:
        if self._frequencies is None:
            self._frequencies = bohr_frequencies(self, self.freq_tol)
        return self._frequencies

    def mode_pairs(self, frequency: float, tol: float = 1e-6):
        """Index pairs ``(i, j)`` of basis vectors whose energy gap is ``frequency``.

        Pairs are restricted to a common charge sector and sorted by the lower
        energy, then the upper energy.
        """
        pairs = []
        for i in range(self.dim):
            for j in range(self.dim):
                if i == j:
                    continue
                if self.sectors is not None and self.sectors[i] != self.sectors[j]:
                    continue
                gap = self.energies[j] - self.energies[i]
                if abs(gap - frequency) <= tol * max(1.0, frequency):
                    pairs.append((i, j))
        pairs.sort(key=lambda p: (self.energies[p[0]], self.energies[p[1]], p))
        return pairs

    def summary(self) -> dict:
        out = {
            "label": self.label,
            "kind": self.kind,
            "dim": self.dim,
            "c": self.c,
            "c_normalized": self.c_normalized,
            "energies": [float(e) for e in self.energies],
            "bohr_frequencies": list(self.bohr_frequencies),
        }
        if self.sectors is not None:
            out["sectors"] = sorted({float(s[0]) if len(s) == 1 else tuple(s) for s in self.sectors})
        return out


@dataclass
class DfsDecomposition:
    """Exhaustive split of the Hilbert space into DFS, dark states and complement."""

    subspaces: list
    dark: list
    dim: int
    _complement_basis: np.ndarray | None = field(default=None, repr=False)

    @property
    def dims(self) -> list:
        return [s.dim for s in self.subspaces]

    def blocks(self) -> list:
        """All invariant pieces in report order: DFS, dark states, complement."""
        return list(self.subspaces) + list(self.dark)

    def labels(self) -> list:
        return [s.label for s in self.blocks()] + ["p"]

    def subspace(self, label: str) -> DfsSubspace:
        for s in self.blocks():
            if s.label == label:
                return s
        raise KeyError(label)

    @property
    def complement_basis(self) -> np.ndarray:
        if self._complement_basis is None:
            blocks = self.blocks()
            if blocks:
                stacked = np.hstack([s.basis for s in blocks])
                self._complement_basis = null_space(stacked.conj().T)
            else:
                self._complement_basis = np.eye(self.dim, dtype=complex)
        return self._complement_basis

    @property
    def complement_projector(self) -> np.ndarray:
        eye = np.eye(self.dim, dtype=complex)
        for s in self.blocks():
            eye = eye - s.projector
        return eye

    def report(self) -> dict:
        return {
            "hilbert_dim": self.dim,
            "n_subspaces": len(self.subspaces),
            "dims": self.dims,
            "subspaces": [s.summary() for s in self.subspaces],
            "dark_states": [s.summary() for s in self.dark],
            "complement_dim": self.dim - sum(s.dim for s in self.blocks()),
        }


def _refine(basis: np.ndarray, op: np.ndarray, tol: float):
    """Split ``span(basis)`` into eigenspaces of ``op`` restricted to it."""
    restricted = basis.conj().T @ op @ basis
    restricted = (restricted + restricted.conj().T) / 2
    vals, vecs = np.linalg.eigh(restricted)
    groups, start = [], 0
    for k in range(1, len(vals) + 1):
        if k == len(vals) or vals[k] - vals[start] > tol:
            groups.append((float(np.mean(vals[start:k])), basis @ vecs[:, start:k]))
            start = k
    return groups


def find_dfs(
    H: np.ndarray,
    L: np.ndarray,
    tol: float = DEFAULT_TOL,
    charges=None,
    degeneracy_tol: float = 1e-9,
    c_scale: float | None = None,
    freq_tol: float = 1e-9,
) -> DfsDecomposition:
    """Detect the decoherence-free subspaces of ``(H, L)``.

    Parameters
    ----------
    H, L : Hermitian arrays of equal dimension.
    tol : residual bound ``||L v - <v|L|v> v||`` for accepting a vector.
    charges : optional sequence of Hermitian operators commuting with both
        ``H`` and ``L``; used to resolve degeneracies and to split subspaces
        into sectors.
    degeneracy_tol : relative threshold (times ``max|H|``) for grouping
        degenerate energies.
    c_scale : scale used to normalise ``c`` (``sqrt(Gamma)`` for
        ``L = sqrt(Gamma) sigma_z``).  Defaults to the largest ``|L|`` entry.
    """
    H = np.asarray(H, dtype=complex)
    L = np.asarray(L, dtype=complex)
    if H.shape != L.shape or H.ndim != 2:
        raise StructuralError(f"H {H.shape} and L {L.shape} must be square and equal")
    if not is_hermitian(H) or not is_hermitian(L):
        raise ContractViolation("find_dfs requires Hermitian H and L")
    dim = H.shape[0]
    charges = [np.asarray(q, dtype=complex) for q in (charges or [])]
    if c_scale is None:
        c_scale = float(np.max(np.abs(L), initial=0.0))
    h_scale = max(float(np.max(np.abs(H), initial=0.0)), 1.0)

    energies, vecs = eigh(H)
    members = []  # (energy, charge tuple, c, vector)
    start = 0
    for k in range(1, dim + 1):
        if k < dim and energies[k] - energies[start] <= degeneracy_tol * h_scale:
            continue
        energy = float(np.mean(energies[start:k]))
        pieces = [((), vecs[:, start:k])]
        for q in charges:
            pieces = [
                (tag + (round(val, 8),), sub)
                for tag, basis in pieces
                for val, sub in _refine(basis, q, 1e-8)
            ]
        for tag, basis in pieces:
            for c, sub in _refine(basis, L, 1e-8 * max(c_scale, 1.0)):
                for v in sub.T:
                    cv = np.vdot(v, L @ v).real
                    if np.linalg.norm(L @ v - cv * v) <= tol:
                        members.append((energy, tag, cv, v))
        start = k

    # group by c
    members.sort(key=lambda m: m[2])
    c_tol = 1e-8 * max(c_scale, 1e-300) if c_scale > 0 else 1e-8
    c_groups = []
    for m in members:
        if c_groups and abs(m[2] - c_groups[-1][0][2]) <= c_tol:
            c_groups[-1].append(m)
        else:
            c_groups.append([m])

    subspaces, dark = [], []
    for group in c_groups:
        c = float(np.mean([m[2] for m in group]))
        if charges:
            by_sector = {}
            for m in group:
                by_sector.setdefault(m[1], []).append(m)
            blocks = [by_sector[key] for key in sorted(by_sector)]
        else:
            blocks = [group]
        merged = []  # list of (frequency tuple, members)
        for block in blocks:
            if len(block) == 1:
                dark.append((c, block))
                continue
            freqs = _pair_frequencies(
                [m[0] for m in block], [m[1] for m in block] if charges else None, freq_tol
            )
            for entry in merged:
                if len(entry[0]) == len(freqs) and np.allclose(entry[0], freqs, atol=freq_tol, rtol=0):
                    entry[1].extend(block)
                    break
            else:
                merged.append((freqs, list(block)))
        for _, block in merged:
            subspaces.append((c, block))

    def make(c, block, label, kind):
        block = sorted(block, key=lambda m: (m[1], m[0]))
        # QR only removes round-off; members are orthonormal already
        basis = fix_phase(np.linalg.qr(np.column_stack([m[3] for m in block]))[0])
        return DfsSubspace(
            label=label,
            c=c,
            basis=basis,
            energies=np.array([m[0] for m in block]),
            sectors=tuple(m[1] for m in block) if charges else None,
            c_normalized=(c / c_scale) if c_scale > 0 else None,
            kind=kind,
            freq_tol=freq_tol,
        )

    def sort_key(item):
        c, block = item
        sectors = sorted(m[1] for m in block)
        return (-len(block), c, sectors[0] if sectors else (), min(m[0] for m in block))

    subspaces.sort(key=sort_key)
    dark.sort(key=lambda item: (item[0], item[1][0][1], item[1][0][0]))
    return DfsDecomposition(
        subspaces=[make(c, b, f"q{k + 1}", "dfs") for k, (c, b) in enumerate(subspaces)],
        dark=[make(c, b, f"d{k + 1}", "dark") for k, (c, b) in enumerate(dark)],
        dim=dim,
    )


def bohr_frequencies(sub: DfsSubspace, tol: float = 1e-9) -> list:
    """Sorted distinct positive energy gaps inside ``sub`` (per charge sector)."""
    return _pair_frequencies(list(sub.energies), sub.sectors, tol)


def synchronized_eigenmode(model, sub: DfsSubspace, normalize: str = "unit-max") -> np.ndarray:
    """Per-site oscillation pattern of ``<sigma^z_j>`` inside a single-mode subspace.

    The pattern is the coefficient of the oscillating term of ``<sigma^z_j>(t)``
    for the equal superposition of the two energy eigenstates that carry the
    subspace's Bohr frequency.  Signs give relative phases; the first
    non-zero entry is made positive.

    ``normalize='unit-max'`` scales the largest entry to 1; ``'raw'`` keeps the
    physical amplitude of the oscillation.
    """
    freqs = sub.bohr_frequencies
    if len(freqs) != 1:
        raise UnsupportedModeError(
            f"subspace {sub.label} supports {len(freqs)} Bohr frequencies {freqs}; "
            "use spectral analysis of the trajectory instead"
        )
    i, j = sub.mode_pairs(freqs[0])[0]
    a, b = sub.basis[:, i], sub.basis[:, j]
    coeffs = np.array([np.vdot(a, sz @ b) for sz in model.site_z])
    biggest = coeffs[np.argmax(np.abs(coeffs))]
    coeffs = coeffs * (np.conj(biggest) / abs(biggest))
    pattern = coeffs.real
    pattern[np.abs(pattern) < 1e-12] = 0.0
    first = pattern[np.flatnonzero(pattern)[0]]
    pattern = pattern * np.sign(first)
    if normalize == "unit-max":
        pattern = pattern / np.max(np.abs(pattern))
    elif normalize != "raw":
        raise ValueError(f"unknown normalisation {normalize!r}")
    return pattern


def overlaps(state, dec: DfsDecomposition) -> list:
    """``Tr[rho Pi_k]`` for every block of ``dec`` followed by the complement."""
    rho = as_density(state)
    if rho.shape[0] != dec.dim:
        raise StructuralError(f"state dimension {rho.shape[0]} != {dec.dim}")
    values = []
    for s in dec.blocks():
        values.append(float(np.real(np.trace(s.basis.conj().T @ rho @ s.basis))))
    total = float(np.real(np.trace(rho)))
    values.append(total - sum(values))
    return values


def check_decomposition(dec: DfsDecomposition, H, L, tol: float = 1e-9) -> None:
    """Assert the documented invariants of a decomposition; raise on failure."""
    eye = np.eye(dec.dim)
    total = dec.complement_projector.copy()
    for s in dec.blocks():
        for k in range(s.dim):
            v = s.basis[:, k]
            if np.linalg.norm(L @ v - s.c * v) > tol:
                raise ContractViolation(f"{s.label}: L residual too large")
            if np.linalg.norm(H @ v - s.energies[k] * v) > tol:
                raise ContractViolation(f"{s.label}: H residual too large")
        p = s.projector
        if np.max(np.abs(p @ p - p)) > tol or abs(np.trace(p).real - s.dim) > tol:
            raise ContractViolation(f"{s.label}: projector is not idempotent")
        total = total + p
    if np.max(np.abs(total - eye)) > tol:
        raise ContractViolation("projectors do not resolve the identity")
    blocks = dec.blocks()
    for i, a in enumerate(blocks):
        for b in blocks[i + 1 :]:
            if np.max(np.abs(a.basis.conj().T @ b.basis), initial=0.0) > tol:
                raise ContractViolation(f"{a.label} and {b.label} are not orthogonal")

