"""Quadratic contraction certificates, generic Lyapunov functions, and the
piecewise radial Lyapunov function whose sublevel sets are disconnected.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .dynamics import SystemMap
from .expr import compile_map
from .sets import CompactSetSampler, batch_eval, radial_boundary, unit_directions

__all__ = [
    "StabilityError", "IllConditionedError", "NonRadialError",
    "QuadraticForm", "ContractionCertificate", "LyapunovFunction", "RadialPiecewiseV",
    "SublevelSet", "RadialComponents", "DecreaseCheck",
    "solve_stein", "default_decay", "spectral_radius", "lmi_margin", "lmi_margins",
    "find_epsilon", "counterexample_V", "counterexample_decrease", "radial_components",
    "sublevel_boundary_sampler",
]


class StabilityError(ValueError):
    """A stability precondition (spectral radius, LMI at the origin) fails."""


class IllConditionedError(ArithmeticError):
    pass


class NonRadialError(ValueError):
    pass


def spectral_radius(A) -> float:
    A = np.atleast_2d(np.asarray(A, float))
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


class QuadraticForm:
    """``x -> x' P x`` for a symmetric positive definite ``P``."""

    def __init__(self, P, tol: float = 1e-12):
        P = np.atleast_2d(np.asarray(P, float))
        if P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        if np.max(np.abs(P - P.T), initial=0.0) > tol * max(1.0, np.max(np.abs(P))):
            raise ValueError("P must be symmetric")
        self.P = 0.5 * (P + P.T)
        eig = np.linalg.eigvalsh(self.P)
        self.lam_min, self.lam_max = float(eig[0]), float(eig[-1])
        if self.lam_min <= 0:
            raise ValueError(f"P must be positive definite (lambda_min = {self.lam_min:g})")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def __call__(self, x) -> float:
        x = np.asarray(x, float).reshape(self.n)
        return float(x @ self.P @ x)

    def batch(self, X) -> np.ndarray:
        return _kernels.quad_forms(np.atleast_2d(X), self.P)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * self.P @ np.asarray(x, float).reshape(self.n)

    def __repr__(self) -> str:
        return f"QuadraticForm({self.P.tolist()})"


def _form(P) -> QuadraticForm:
    return P if isinstance(P, QuadraticForm) else QuadraticForm(P)


@dataclass
class ContractionCertificate:
    """Quadratic data ``(P, a, eps)`` with the sampled LMI holding on ``x' P x <= eps``."""

    form: QuadraticForm
    a: float
    eps: float
    worst_margin: float
    n_samples: int
    seed: int

    def __post_init__(self):
        if not 0 < self.a < 1:
            raise ValueError("decay a must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def to_dict(self) -> dict:
        return {"P": self.form.P.tolist(), "a": self.a, "eps": self.eps,
                "lambda_max_P": self.form.lam_max, "lambda_min_P": self.form.lam_min,
                "worst_lmi_margin": self.worst_margin,
                "estimate": f"sampled (N={self.n_samples}, seed={self.seed})"}


@dataclass
class LyapunovFunction:
    """A scalar function ``V`` with decrease factor ``rho`` on its domain.

    ``quadratic`` is set when ``V`` is a :class:`QuadraticForm`; some
    computations then use exact formulas instead of direction grids.
    """

    func: Callable
    dim: int
    rho: float = 0.5
    grad: Callable | None = None
    quadratic: QuadraticForm | None = None
    batch_func: Callable | None = None
    domain: str = ""

    @classmethod
    def from_quadratic(cls, P, rho: float) -> "LyapunovFunction":
        form = _form(P)
        return cls(form, form.n, rho, form.gradient, form, form.batch)

    @classmethod
    def from_expression(cls, expr: str, dim: int, rho: float, **kw) -> "LyapunovFunction":
        cm = compile_map([expr], dim, 1)
        return cls(lambda x: float(cm(x)[0]), dim, rho,
                   lambda x: cm.jacobian(x)[0], None, lambda X: cm.batch(X)[:, 0], **kw)

    def __call__(self, x) -> float:
        return float(self.func(np.asarray(x, float).reshape(self.dim)))

    def batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        if self.batch_func is not None:
            return np.asarray(self.batch_func(X), float).reshape(len(X))
        return np.array([self(x) for x in X])

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, float).reshape(self.dim)
        if self.grad is not None:
            return np.asarray(self.grad(x), float).reshape(self.dim)
        h = 1e-6 * max(1.0, float(np.linalg.norm(x)))
        g = np.empty(self.dim)
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = h
            g[j] = (self(x + e) - self(x - e)) / (2 * h)
        return g


@dataclass(frozen=True)
class SublevelSet:
    func: Callable
    c: float

    def contains(self, X) -> np.ndarray:
        return batch_eval(self.func, np.atleast_2d(X)) <= self.c


# ---------------------------------------------------------------------------
# linearization certificate

def solve_stein(A, a: float) -> QuadraticForm:
    """Solve ``A' P A - a P = -I`` by a Kronecker-vectorized linear solve.

    Raises
    ------
    StabilityError
        If ``spectral_radius(A)**2 >= a``.
    IllConditionedError
        If the vectorized system is numerically singular or the residual
        exceeds 1e-10.
    """
    A = np.atleast_2d(np.asarray(A, float))
    n = A.shape[0]
    if not 0 < a:
        raise ValueError("a must be positive")
    rho = spectral_radius(A)
    if rho ** 2 >= a:
        raise StabilityError(f"spectral radius {rho:.6g} does not satisfy rho^2 < a = {a:.6g}")
    # column-major vec: vec(A' P A) = kron(A', A') vec(P)
    K = np.kron(A.T, A.T) - a * np.eye(n * n)
    if np.linalg.cond(K) > 1e12:
        raise IllConditionedError("Stein system is ill-conditioned")
    vecP = np.linalg.solve(K, -np.eye(n).reshape(-1, order="F"))
    P = vecP.reshape(n, n, order="F")
    P = 0.5 * (P + P.T)
    residual = np.linalg.norm(A.T @ P @ A - a * P + np.eye(n), 2)
    if residual > 1e-10:
        raise IllConditionedError(f"Stein residual {residual:.3g} exceeds 1e-10")
    return QuadraticForm(P)


def default_decay(A) -> float:
    """``a = (rho(A)^2 + 1) / 2``, halfway between the linear rate and 1."""
    rho = spectral_radius(A)
    if rho >= 1:
        raise StabilityError(f"unstable linearization (spectral radius {rho:.6g})")
    return (rho ** 2 + 1) / 2


def lmi_margin(f: SystemMap, P, a: float, x) -> float:
    """Largest eigenvalue of ``[[-(1+a)/2 P, J'P], [P J, -P]]`` at ``x``.

    Nonpositive means ``J' P J <= (1+a)/2 P`` holds at ``x``.
    """
    form = _form(P)
    J = f.jacobian(x)[None, :, :]
    return float(_kernels.lmi_margins(J, form.P, (1 + a) / 2)[0])


def lmi_margins(f: SystemMap, P, a: float, X) -> np.ndarray:
    form = _form(P)
    return _kernels.lmi_margins(f.batch_jacobian(X), form.P, (1 + a) / 2)


def find_epsilon(f: SystemMap, P, a: float, r_max: float, n: int = 4096,
                 n_boundary: int = 1024, seed: int = 0, max_halvings: int = 60,
                 refine: int = 20) -> ContractionCertificate:
    """Largest level ``eps <= r_max`` with the sampled LMI holding on ``x' P x <= eps``.

    Levels ``r_max, r_max/2, ...`` are tried until one passes; the pass/fail
    pair is then refined by ``refine`` bisection steps.  Samples outside the
    map's declared C^1 region count as failures.
    """
    form = _form(P)
    origin = np.zeros(form.n)
    m0 = lmi_margin(f, form, a, origin)
    if m0 >= 0:
        raise StabilityError(f"LMI fails at the origin (margin {m0:.3g}); "
                             "linearization not contracting at rate a")
    unit = CompactSetSampler.ellipsoid(form.P, 1.0, n=n, n_boundary=n_boundary, seed=seed).draw()
    unit = np.vstack([origin, unit])

    def worst(eps: float) -> float:
        X = np.sqrt(eps) * unit
        if not np.all(f.in_c1(X)):
            return np.inf
        return float(np.max(lmi_margins(f, form, a, X)))

    eps, failed = float(r_max), None
    for _ in range(max_halvings):
        w = worst(eps)
        if w <= 0:
            break
        failed = eps
        eps /= 2
    else:
        raise StabilityError("no eps found: LMI fails arbitrarily close to the origin")
    if failed is not None:
        lo, hi = eps, failed
        for _ in range(refine):
            mid = 0.5 * (lo + hi)
            if worst(mid) <= 0:
                lo = mid
            else:
                hi = mid
        eps = lo
    return ContractionCertificate(form, a, eps, worst(eps), len(unit), seed)


# ---------------------------------------------------------------------------
# piecewise radial Lyapunov function for x+ = x / 2

def counterexample_V(x) -> float:
    """Radial piecewise-linear Lyapunov function of ``x+ = x/2``.

    With ``2^i <= |x| < 2^(i+1)``: ``6|x| - 5*2^i`` on the first half and a
    half of the shell, ``-4|x| + 5*2^(i+1)`` on the rest; ``V(0) = 0``.
    """
    r = float(np.linalg.norm(np.atleast_1d(np.asarray(x, float))))
    return float(_kernels.counterexample_profile(np.array([r]))[0])


class RadialPiecewiseV:
    """Callable wrapper of :func:`counterexample_V` with batch and profile access."""

    def __call__(self, x) -> float:
        return counterexample_V(x)

    def batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        return _kernels.counterexample_profile(np.linalg.norm(X, axis=1))

    def profile(self, r) -> np.ndarray:
        return _kernels.counterexample_profile(np.asarray(r, float))


@dataclass(frozen=True)
class DecreaseCheck:
    decrease: float
    bound: float
    branch: int
    shell: int

    @property
    def holds(self) -> bool:
        return self.decrease <= self.bound

    @property
    def strict(self) -> bool:
        return self.decrease < self.bound


def counterexample_decrease(x) -> DecreaseCheck:
    """``V(x/2) - V(x)`` with its per-branch bound.

    The bound is ``-2^(i-1)`` on the first branch of shell ``i`` and
    ``-2^i`` on the second.  The first-branch bound is attained at
    ``|x| = 2^i`` exactly and is strict elsewhere.
    """
    x = np.atleast_1d(np.asarray(x, float))
    r = float(np.linalg.norm(x))
    if r == 0:
        raise ValueError("x must be nonzero")
    _, e = np.frexp(r)
    i = int(e) - 1
    base = np.ldexp(1.0, i)
    decrease = counterexample_V(x / 2) - counterexample_V(x)
    if r < 1.5 * base:
        return DecreaseCheck(decrease, -base / 2, 1, i)
    return DecreaseCheck(decrease, -base, 2, i)


@dataclass
class RadialComponents:
    level: float
    intervals: list[tuple[float, float]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.intervals)

    @property
    def path_connected(self) -> bool:
        return self.count == 1 and self.intervals[0][0] == 0.0

    def to_dict(self) -> dict:
        return {"c": self.level, "count": self.count,
                "intervals": [list(iv) for iv in self.intervals],
                "path_connected": self.path_connected}


def _profile_fn(V, dim: int):
    prof = getattr(V, "profile", None)
    if prof is not None:
        return lambda r: prof(np.asarray(r, float))
    e1 = np.zeros(dim)
    e1[0] = 1.0
    return lambda r: batch_eval(V, np.asarray(r, float).reshape(-1, 1) * e1)


def check_radial(V, dim: int, r_max: float, n_radii: int = 16, n_dirs: int = 8,
                 seed: int = 0, tol: float = 1e-9) -> float:
    """Largest direction dependence of ``V`` on sampled spheres; raises above ``tol``."""
    rng = np.random.default_rng(seed)
    radii = r_max * rng.random(n_radii)
    dirs = unit_directions(n_dirs, dim, rng)
    e1 = np.zeros(dim)
    e1[0] = 1.0
    worst = 0.0
    for r in radii:
        ref = float(batch_eval(V, (r * e1)[None, :])[0])
        vals = batch_eval(V, r * dirs)
        worst = max(worst, float(np.max(np.abs(vals - ref))))
    if worst > tol:
        raise NonRadialError(f"V depends on direction (deviation {worst:.3g})")
    return worst


def radial_components(V, c: float, r_max: float, grid: int = 2 ** 17 + 1, dim: int = 2,
                      refine: bool = True, seed: int = 0) -> RadialComponents:
    """Maximal radius intervals in ``[0, r_max]`` where a radial ``V`` is ``<= c``.

    For a rotationally symmetric ``V`` in dimension ``dim >= 2`` the
    sublevel set is path-connected iff the only interval is the one
    containing ``r = 0``.  The grid is ``r_max * k / (grid - 1)``; with
    ``grid - 1`` a power of two every grid radius is exact in binary, so
    isolated touching points at dyadic radii are not missed.  Endpoints are
    refined by bisection on the profile.
    """
    check_radial(V, dim, r_max, seed=seed)
    prof = _profile_fn(V, dim)
    r = r_max * (np.arange(grid, dtype=float) / (grid - 1))
    vals = prof(r)
    starts, stops = _kernels.sublevel_runs(vals, c)
    intervals = []
    for s, t in zip(starts, stops):
        lo, hi = r[s], r[t]
        if refine and s > 0:
            lo = _bisect_crossing(prof, c, r[s - 1], r[s])
        if refine and t < grid - 1:
            hi = _bisect_crossing(prof, c, r[t + 1], r[t])
        intervals.append((float(lo), float(hi)))
    return RadialComponents(float(c), intervals)


def _bisect_crossing(prof, c, outside: float, inside: float, iters: int = 80) -> float:
    """Point between ``outside`` (V > c) and ``inside`` (V <= c) where V crosses c."""
    for _ in range(iters):
        mid = 0.5 * (outside + inside)
        if mid in (outside, inside):
            break
        if prof(np.array([mid]))[0] <= c:
            inside = mid
        else:
            outside = mid
    return inside


def sublevel_boundary_sampler(shape, c: float, N: int, seed: int = 0, dim: int | None = None,
                              r_max: float | None = None) -> CompactSetSampler:
    """Sampler of the level surface ``shape = c``.

    For a quadratic form (or matrix) the points satisfy ``x' P x = c``
    exactly up to rounding.  For a generic ``V`` each random direction is
    searched radially and bisected to ``|V - c| <= 1e-10``; use
    :func:`radial_boundary` directly to see directions with several roots.
    """
    if c <= 0:
        raise ValueError("level must be positive")
    if isinstance(shape, (QuadraticForm, np.ndarray, list)):
        form = _form(shape)
        return CompactSetSampler.ellipsoid(form.P, c, n=N, seed=seed, boundary_only=True)
    if isinstance(shape, LyapunovFunction) and shape.quadratic is not None:
        return CompactSetSampler.ellipsoid(shape.quadratic.P, c, n=N, seed=seed, boundary_only=True)
    if dim is None:
        dim = getattr(shape, "dim", None)
    if dim is None or r_max is None:
        raise ValueError("generic V needs dim and r_max")
    return CompactSetSampler.sublevel(shape, dim, c, r_max, n=N, seed=seed, boundary_only=True)


__all__ += ["check_radial", "radial_boundary"]
