"""Numba kernels for the symmetric tridiagonal eigenproblem.

Eigenvalues come from implicit-shift QL (Wilkinson shift, no vectors), which
is O(n^2) overall.  Eigenvectors come from inverse iteration with a pivoted
tridiagonal LU, re-orthogonalized inside clusters of nearly equal eigenvalues.
"""
import math

import numpy as np
from numba import njit

EPS = np.finfo(np.float64).eps


@njit(cache=True)
def ql_eigenvalues(diag, off, max_sweeps):
    """Eigenvalues of tridiag(off, diag, off), ascending.

    Returns (values, status); status is 0 on success and otherwise the first
    index whose QL iteration did not converge within ``max_sweeps``.
    """
    n = diag.shape[0]
    d = diag.copy()
    e = np.zeros(n)
    for i in range(n - 1):
        e[i] = off[i]
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= EPS * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_sweeps:
                return np.sort(d), l + 1
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = 1.0
            c = 1.0
            p = 0.0
            underflow = False
            i = m - 1
            while i >= l:
                f = s * e[i]
                bb = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * bb
                p = s * r
                d[i + 1] = g + p
                g = c * r - bb
                i -= 1
            if underflow:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return np.sort(d), 0


@njit(cache=True)
def _factor(diag, off, shift, tiny):
    # pivoted LU of tridiag(off, diag - shift, off), as in LAPACK's gttrf
    n = diag.shape[0]
    d = diag - shift
    dl = off.copy()
    du = off.copy()
    du2 = np.zeros(max(n - 2, 0))
    piv = np.zeros(max(n - 1, 0), dtype=np.bool_)
    for i in range(n - 1):
        if abs(d[i]) >= abs(dl[i]):
            if d[i] == 0.0:
                d[i] = tiny
            fact = dl[i] / d[i]
            dl[i] = fact
            d[i + 1] -= fact * du[i]
        else:
            fact = d[i] / dl[i]
            d[i] = dl[i]
            dl[i] = fact
            tmp = du[i]
            du[i] = d[i + 1]
            d[i + 1] = tmp - fact * d[i + 1]
            if i < n - 2:
                du2[i] = du[i + 1]
                du[i + 1] = -fact * du[i + 1]
            piv[i] = True
    if d[n - 1] == 0.0:
        d[n - 1] = tiny
    return d, dl, du, du2, piv


@njit(cache=True)
def _solve(d, dl, du, du2, piv, x):
    n = d.shape[0]
    for i in range(n - 1):
        if piv[i]:
            tmp = x[i]
            x[i] = x[i + 1]
            x[i + 1] = tmp - dl[i] * x[i]
        else:
            x[i + 1] -= dl[i] * x[i]
    x[n - 1] /= d[n - 1]
    if n > 1:
        x[n - 2] = (x[n - 2] - du[n - 2] * x[n - 1]) / d[n - 2]
    for i in range(n - 3, -1, -1):
        x[i] = (x[i] - du[i] * x[i + 1] - du2[i] * x[i + 2]) / d[i]


@njit(cache=True)
def inverse_iteration(diag, off, w, cluster_tol, n_iter, seed):
    """Eigenvectors for ascending eigenvalues ``w`` as columns of a matrix.

    Vectors whose eigenvalues chain together with gaps below ``cluster_tol``
    are Gram-Schmidt orthogonalized against the earlier members of the chain.
    Each vector is signed so that its largest entry is positive.
    """
    n = diag.shape[0]
    z = np.zeros((n, n))
    if n == 1:
        z[0, 0] = 1.0
        return z
    norm = 0.0
    for i in range(n):
        a = abs(diag[i])
        if i > 0:
            a += abs(off[i - 1])
        if i < n - 1:
            a += abs(off[i])
        norm = max(norm, a)
    norm = max(norm, 1.0)
    tiny = EPS * norm
    sep = 10.0 * EPS * norm
    state = np.uint64(seed) * np.uint64(6364136223846793005) + np.uint64(1442695040888963407)
    x = np.zeros(n)
    first = 0
    shifted_prev = w[0]
    for k in range(n):
        lam = w[k]
        if k > 0:
            if w[k] - w[k - 1] > cluster_tol:
                first = k
            # nudge coincident shifts so the solves differ
            if lam - shifted_prev < sep:
                lam = shifted_prev + sep
        shifted_prev = lam
        d, dl, du, du2, piv = _factor(diag, off, lam, tiny)
        for i in range(n):
            state ^= state << np.uint64(13)
            state ^= state >> np.uint64(7)
            state ^= state << np.uint64(17)
            x[i] = (state >> np.uint64(11)) * (1.0 / 9007199254740992.0) - 0.5
        for _ in range(n_iter):
            _solve(d, dl, du, du2, piv, x)
            for q in range(first, k):
                dot = 0.0
                for i in range(n):
                    dot += z[i, q] * x[i]
                for i in range(n):
                    x[i] -= dot * z[i, q]
            s = 0.0
            for i in range(n):
                s += x[i] * x[i]
            s = math.sqrt(s)
            for i in range(n):
                x[i] /= s
        # second Gram-Schmidt pass keeps large clusters orthogonal
        if k > first:
            for q in range(first, k):
                dot = 0.0
                for i in range(n):
                    dot += z[i, q] * x[i]
                for i in range(n):
                    x[i] -= dot * z[i, q]
            s = 0.0
            for i in range(n):
                s += x[i] * x[i]
            s = math.sqrt(s)
            for i in range(n):
                x[i] /= s
        imax = 0
        for i in range(n):
            if abs(x[i]) > abs(x[imax]):
                imax = i
        sgn = 1.0 if x[imax] > 0 else -1.0
        for i in range(n):
            z[i, k] = sgn * x[i]
    return z
