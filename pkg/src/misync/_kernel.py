"""Compiled single-trajectory propagators used by :mod:`misync.engine`.

Operators are passed in a shared sparse row format (``rowptr``, ``cols`` and
one value array per operator) because the reduced operators are block
diagonal.  A trajectory state is ``K`` pure members with weights ``u``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

OK = 0
NORM_COLLAPSE = 1

QUANTUM = 0
HEUN = 1
MIDPOINT = 2


@njit(cache=True)
def _record(psi, u, starts, stops, zmats, s, ov, obs, obs_from, rho_acc, avg_from):
    K, d = psi.shape
    B = starts.shape[0]
    for b in range(B):
        acc = 0.0
        for i in range(starts[b], stops[b]):
            for k in range(K):
                v = psi[k, i]
                acc += u[k] * (v.real * v.real + v.imag * v.imag)
        ov[s, b] = acc
    if s >= obs_from:
        n = zmats.shape[0]
        for j in range(n):
            acc = 0.0
            for k in range(K):
                for a in range(d):
                    t = 0j
                    for c in range(d):
                        t += zmats[j, a, c] * psi[k, c]
                    t *= np.conj(psi[k, a])
                    acc += u[k] * t.real
            obs[s - obs_from, j] = acc
    if s >= avg_from:
        for k in range(K):
            for a in range(d):
                for c in range(d):
                    rho_acc[a, c] += u[k] * psi[k, a] * np.conj(psi[k, c])


@njit(cache=True)
def _purity(psi, u):
    K, d = psi.shape
    total = 0.0
    for k in range(K):
        for m in range(K):
            ov = 0j
            for a in range(d):
                ov += np.conj(psi[k, a]) * psi[m, a]
            total += u[k] * u[m] * (ov.real * ov.real + ov.imag * ov.imag)
    return total


@njit(cache=True)
def _solve_inplace(A, rhs, n, K):
    """Gaussian elimination with partial pivoting on the leading ``n x n`` block; result in ``rhs``."""
    for col in range(n):
        piv = col
        best = abs(A[col, col])
        for i in range(col + 1, n):
            if abs(A[i, col]) > best:
                best = abs(A[i, col])
                piv = i
        if piv != col:
            for j in range(col, n):
                A[col, j], A[piv, j] = A[piv, j], A[col, j]
            for k in range(K):
                rhs[col, k], rhs[piv, k] = rhs[piv, k], rhs[col, k]
        inv = 1.0 / A[col, col]
        for i in range(col + 1, n):
            f = A[i, col] * inv
            if f != 0:
                for j in range(col + 1, n):
                    A[i, j] -= f * A[col, j]
                for k in range(K):
                    rhs[i, k] -= f * rhs[col, k]
    for i in range(n - 1, -1, -1):
        for k in range(K):
            acc = rhs[i, k]
            for j in range(i + 1, n):
                acc -= A[i, j] * rhs[j, k]
            rhs[i, k] = acc / A[i, i]


@njit(cache=True)
def propagate(
    psi, u, rowptr, cols, a_vals, l_vals, h_vals, g_vals, z, dt, stride, n_samples,
    mode, renormalize, starts, stops, zmats, obs_from, avg_from, lo, hi,
):
    """Advance one trajectory over ``(n_samples - 1) * stride`` steps.

    Quantum mode uses ``a_vals`` (``-iH - L^2/2``) and ``l_vals`` (``L``).
    The Hamiltonian part (``h_vals``) gets its second-order Taylor term: plain Euler
    inflates each energy level by ``1 + E^2 dt^2`` per step, and after
    renormalisation that pumps population between levels of a DFS over long
    horizons.
    The classical modes use ``h_vals`` (``-iH``) and ``g_vals`` (``-iG``):
    ``HEUN`` is the explicit predictor-corrector, ``MIDPOINT`` the implicit
    midpoint (Cayley) step, solved block by block, which is exactly unitary.

    Member ``k`` is only updated on rows ``lo[k]:hi[k]``, which must cover
    every invariant block it has weight in.

    Returns ``(status, failed_step, overlaps, observables, rho_sum, purity_dev)``;
    ``psi`` and ``u`` are updated in place.
    """
    K, d = psi.shape
    B = starts.shape[0]
    n_obs = max(n_samples - obs_from, 0)
    ov = np.zeros((n_samples, B))
    obs = np.zeros((n_obs, zmats.shape[0]))
    rho_acc = np.zeros((d, d), dtype=np.complex128)
    sqdt = np.sqrt(dt)
    Lp = np.zeros((K, d), dtype=np.complex128)
    Ap = np.zeros((K, d), dtype=np.complex128)
    Hp = np.zeros(d, dtype=np.complex128)
    AAp = np.zeros(d, dtype=np.complex128)
    k1 = np.empty(d, dtype=np.complex128)
    k2 = np.empty(d, dtype=np.complex128)
    X = np.empty(K)
    logu = np.log(np.maximum(u, 1e-300))
    nnz = cols.shape[0]
    b_vals = np.empty(nnz, dtype=np.complex128)
    A = np.empty((d, d), dtype=np.complex128)
    rhs = np.empty((d, K), dtype=np.complex128)
    quantum = mode == QUANTUM
    purity0 = _purity(psi, u)
    purity_dev = 0.0

    _record(psi, u, starts, stops, zmats, 0, ov, obs, obs_from, rho_acc, avg_from)
    n_steps = (n_samples - 1) * stride
    for step in range(n_steps):
        dW = z[step] * sqdt
        if quantum:
            xbar = 0.0
            for k in range(K):
                x = 0.0
                for r in range(lo[k], hi[k]):
                    sl = 0j
                    sa = 0j
                    for p in range(rowptr[r], rowptr[r + 1]):
                        c = cols[p]
                        sl += l_vals[p] * psi[k, c]
                        sa += a_vals[p] * psi[k, c]
                    Lp[k, r] = sl
                    Ap[k, r] = sa
                    v = psi[k, r]
                    x += v.real * sl.real + v.imag * sl.imag
                X[k] = 2.0 * x
                xbar += u[k] * X[k]
            dY = xbar * dt + dW
            for k in range(K):
                xk = X[k]
                inn = dW if K == 1 else dY - xk * dt
                cl = 0.5 * xk * dt + inn
                cp = 1.0 - 0.125 * xk * xk * dt - 0.5 * xk * inn
                for r in range(lo[k], hi[k]):
                    sh = 0j
                    for p in range(rowptr[r], rowptr[r + 1]):
                        sh += h_vals[p] * psi[k, cols[p]]
                    Hp[r] = sh
                for r in range(lo[k], hi[k]):
                    s2 = 0j
                    for p in range(rowptr[r], rowptr[r + 1]):
                        s2 += h_vals[p] * Hp[cols[p]]
                    AAp[r] = s2
                for r in range(lo[k], hi[k]):
                    psi[k, r] = cp * psi[k, r] + (Ap[k, r] + 0.5 * dt * AAp[r]) * dt + cl * Lp[k, r]
            if K > 1:
                top = -1e300
                for k in range(K):
                    logu[k] += X[k] * dY - 0.5 * X[k] * X[k] * dt
                    if logu[k] > top:
                        top = logu[k]
                tot = 0.0
                for k in range(K):
                    logu[k] -= top
                    u[k] = np.exp(logu[k])
                    tot += u[k]
                for k in range(K):
                    u[k] /= tot
        elif mode == MIDPOINT:
            for p in range(nnz):
                b_vals[p] = 0.5 * (h_vals[p] * dt + g_vals[p] * dW)
            for b in range(B):
                lo_b = starts[b]
                n = stops[b] - lo_b
                if n == 0:
                    continue
                for i in range(n):
                    for j in range(n):
                        A[i, j] = 0.0
                    A[i, i] = 1.0
                    for k in range(K):
                        rhs[i, k] = psi[k, lo_b + i]
                for i in range(n):
                    r = lo_b + i
                    for p in range(rowptr[r], rowptr[r + 1]):
                        A[i, cols[p] - lo_b] -= b_vals[p]
                        for k in range(K):
                            rhs[i, k] += b_vals[p] * psi[k, cols[p]]
                _solve_inplace(A, rhs, n, K)
                for i in range(n):
                    for k in range(K):
                        psi[k, lo_b + i] = rhs[i, k]
        else:
            for p in range(nnz):
                b_vals[p] = h_vals[p] * dt + g_vals[p] * dW
            for k in range(K):
                for r in range(lo[k], hi[k]):
                    s1 = 0j
                    for p in range(rowptr[r], rowptr[r + 1]):
                        s1 += b_vals[p] * psi[k, cols[p]]
                    k1[r] = s1
                for r in range(lo[k], hi[k]):
                    s2 = 0j
                    for p in range(rowptr[r], rowptr[r + 1]):
                        c = cols[p]
                        s2 += b_vals[p] * (psi[k, c] + k1[c])
                    k2[r] = s2
                for r in range(lo[k], hi[k]):
                    psi[k, r] += 0.5 * (k1[r] + k2[r])
        sample_now = (step + 1) % stride == 0
        if renormalize or sample_now:
            for k in range(K):
                n2 = 0.0
                for r in range(d):
                    v = psi[k, r]
                    n2 += v.real * v.real + v.imag * v.imag
                if not (n2 > 1e-12) or not np.isfinite(n2):
                    return NORM_COLLAPSE, step + 1, ov, obs, rho_acc, purity_dev
                inv = 1.0 / np.sqrt(n2)
                for r in range(d):
                    psi[k, r] *= inv
        if sample_now:
            s = (step + 1) // stride
            _record(psi, u, starts, stops, zmats, s, ov, obs, obs_from, rho_acc, avg_from)
            if not quantum:
                dev = abs(_purity(psi, u) - purity0)
                if dev > purity_dev:
                    purity_dev = dev
    return OK, 0, ov, obs, rho_acc, purity_dev
