"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``TOTALSTAB_DISABLE_NUMBA`` is
unset or ``0``.  Both paths are always importable as ``<name>_numpy`` and
``<name>_numba`` (the latter is ``None`` without numba) so they can be
compared directly.  ``TOTALSTAB_THREADS`` caps numba's worker count.
"""
import math
import os

import numpy as np

try:
    import numba
    from numba import njit, prange
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("TOTALSTAB_DISABLE_NUMBA", "0").lower() in ("", "0", "false", "no")

if HAS_NUMBA and "NUMBA_THREADING_LAYER" not in os.environ:
    # the default probe warns about old TBB builds
    numba.config.THREADING_LAYER = "workqueue"

if HAS_NUMBA and os.environ.get("TOTALSTAB_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["TOTALSTAB_THREADS"]),
                                     numba.config.NUMBA_NUM_THREADS)))

__all__ = ["USE_NUMBA", "counterexample_profile", "sublevel_runs", "lmi_margins",
           "quad_forms", "min_pair_distance", "spectral_norms"]


# ---------------------------------------------------------------------------
# radial profile of the piecewise Lyapunov function with disconnected sublevels

def counterexample_profile_numpy(r):
    r = np.abs(np.asarray(r, dtype=np.float64))
    out = np.zeros_like(r)
    pos = r > 0
    m, e = np.frexp(r[pos])
    base = np.ldexp(1.0, e - 1)  # 2^i with 2^i <= r < 2^(i+1)
    rp = r[pos]
    out[pos] = np.where(rp < 1.5 * base, 6.0 * rp - 5.0 * base, -4.0 * rp + 10.0 * base)
    return out


def _counterexample_profile_loop(r):
    out = np.zeros(r.shape[0])
    for k in range(r.shape[0]):
        v = abs(r[k])
        if v > 0.0:
            m, e = math.frexp(v)
            base = math.ldexp(1.0, e - 1)
            if v < 1.5 * base:
                out[k] = 6.0 * v - 5.0 * base
            else:
                out[k] = -4.0 * v + 10.0 * base
    return out


# ---------------------------------------------------------------------------
# maximal runs of grid values at or below a level

def sublevel_runs_numpy(values, c):
    inside = np.asarray(values) <= c
    if inside.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    padded = np.concatenate(([False], inside, [False])).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1) - 1
    return starts.astype(np.int64), stops.astype(np.int64)


def _sublevel_runs_loop(values, c):
    n = values.shape[0]
    starts = np.empty(n, np.int64)
    stops = np.empty(n, np.int64)
    count = 0
    inside = False
    for k in range(n):
        if values[k] <= c:
            if not inside:
                starts[count] = k
                inside = True
        elif inside:
            stops[count] = k - 1
            count += 1
            inside = False
    if inside:
        stops[count] = n - 1
        count += 1
    return starts[:count].copy(), stops[:count].copy()


# ---------------------------------------------------------------------------
# largest eigenvalue of the block matrix [[-r P, J'P], [P J, -P]] per sample

def lmi_margins_numpy(J, P, r):
    J = np.asarray(J, dtype=np.float64)
    N, n, _ = J.shape
    PJ = P @ J
    M = np.empty((N, 2 * n, 2 * n))
    M[:, :n, :n] = -r * P
    M[:, :n, n:] = np.transpose(PJ, (0, 2, 1))
    M[:, n:, :n] = PJ
    M[:, n:, n:] = -P
    return np.linalg.eigvalsh(M)[:, -1]


def _lmi_margins_loop(J, P, r):
    N = J.shape[0]
    n = J.shape[1]
    out = np.empty(N)
    for k in prange(N):
        PJ = P @ J[k]
        M = np.empty((2 * n, 2 * n))
        for i in range(n):
            for j in range(n):
                M[i, j] = -r * P[i, j]
                M[i, n + j] = PJ[j, i]
                M[n + i, j] = PJ[i, j]
                M[n + i, n + j] = -P[i, j]
        out[k] = np.linalg.eigvalsh(M)[-1]
    return out


# ---------------------------------------------------------------------------
# x' P x per row

def quad_forms_numpy(X, P):
    X = np.asarray(X, dtype=np.float64)
    return np.einsum("ni,ij,nj->n", X, P, X)


def _quad_forms_loop(X, P):
    N, n = X.shape
    out = np.empty(N)
    for k in range(N):
        acc = 0.0
        for i in range(n):
            row = 0.0
            for j in range(n):
                row += P[i, j] * X[k, j]
            acc += X[k, i] * row
        out[k] = acc
    return out


# ---------------------------------------------------------------------------
# smallest Euclidean distance between two point clouds

def min_pair_distance_numpy(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    best = np.inf
    for start in range(0, A.shape[0], 1024):
        chunk = A[start:start + 1024]
        d2 = ((chunk[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
        best = min(best, float(d2.min()))
    return float(np.sqrt(best))


def _min_pair_distance_loop(A, B):
    na = A.shape[0]
    per_row = np.empty(na)
    for i in prange(na):
        best = np.inf
        for j in range(B.shape[0]):
            acc = 0.0
            for d in range(A.shape[1]):
                t = A[i, d] - B[j, d]
                acc += t * t
            if acc < best:
                best = acc
        per_row[i] = best
    return np.sqrt(per_row.min())


# ---------------------------------------------------------------------------
# spectral norm of a stack of matrices

def spectral_norms_numpy(D):
    D = np.asarray(D, dtype=np.float64)
    if D.shape[0] == 0:
        return np.empty(0)
    return np.linalg.norm(D, ord=2, axis=(1, 2))


def _spectral_norms_loop(D):
    out = np.empty(D.shape[0])
    for k in prange(D.shape[0]):
        out[k] = np.linalg.svd(D[k])[1][0]
    return out


if HAS_NUMBA:
    _opts = dict(cache=True, nogil=True)
    counterexample_profile_numba = njit(**_opts)(_counterexample_profile_loop)
    sublevel_runs_numba = njit(**_opts)(_sublevel_runs_loop)
    lmi_margins_numba = njit(parallel=True, **_opts)(_lmi_margins_loop)
    quad_forms_numba = njit(**_opts)(_quad_forms_loop)
    min_pair_distance_numba = njit(parallel=True, **_opts)(_min_pair_distance_loop)
    spectral_norms_numba = njit(parallel=True, **_opts)(_spectral_norms_loop)
else:  # pragma: no cover
    counterexample_profile_numba = sublevel_runs_numba = lmi_margins_numba = None
    quad_forms_numba = min_pair_distance_numba = spectral_norms_numba = None


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def counterexample_profile(r):
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    if USE_NUMBA:
        return counterexample_profile_numba(_c(r.ravel())).reshape(r.shape)
    return counterexample_profile_numpy(r)


def sublevel_runs(values, c):
    """Start/stop indices (inclusive) of maximal runs with ``values <= c``."""
    if USE_NUMBA:
        return sublevel_runs_numba(_c(values), float(c))
    return sublevel_runs_numpy(values, c)


def lmi_margins(J, P, r):
    if USE_NUMBA:
        return lmi_margins_numba(_c(J), _c(P), float(r))
    return lmi_margins_numpy(J, P, r)


def quad_forms(X, P):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if USE_NUMBA:
        return quad_forms_numba(_c(X), _c(P))
    return quad_forms_numpy(X, P)


def min_pair_distance(A, B):
    if len(A) == 0 or len(B) == 0:
        return np.inf
    if USE_NUMBA:
        return float(min_pair_distance_numba(_c(A), _c(B)))
    return min_pair_distance_numpy(A, B)


def spectral_norms(D):
    if USE_NUMBA and len(D):
        return spectral_norms_numba(_c(D))
    return spectral_norms_numpy(D)
