"""Locate and certify the equilibrium of a perturbed map.

The checks here are sampled evidence: a pass means no violation was found
among the drawn points, not a proof.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dynamics import BLOWUP, C1RegionWarning, SystemMap, simulate, Trajectory
from .lyapunov import ContractionCertificate, LyapunovFunction, QuadraticForm, spectral_radius
from .sets import CompactSetSampler

__all__ = [
    "FixedPointError", "InvarianceResult", "ContractionResult", "UniquenessResult",
    "BasinResult", "EquilibriumReport", "find_fixed_point", "verify_invariance",
    "verify_local_contraction", "uniqueness_annulus", "basin_check", "analyze_equilibrium",
]


class FixedPointError(ArithmeticError):
    """The fixed-point solver did not converge."""


def _form(P) -> QuadraticForm:
    return P if isinstance(P, QuadraticForm) else QuadraticForm(P)


def find_fixed_point(f: SystemMap, x0, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Solve ``f(x) = x`` by damped Newton with a Picard fallback.

    The Newton step on ``g(x) = f(x) - x`` is halved until ``|g|`` decreases.
    When ``I - f'(x)`` has a singular value at or below 1e-12 a plain
    iteration ``x <- f(x)`` is taken instead.

    Raises
    ------
    FixedPointError
        After ``max_iter`` iterations or once ``|x| > 1e12``.
    """
    x = np.asarray(x0, float).reshape(f.n)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    I = np.eye(f.n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", C1RegionWarning)
        for _ in range(max_iter):
            g = f(x) - x
            ng = float(np.linalg.norm(g))
            if not np.isfinite(ng):
                raise FixedPointError(f"non-finite residual at x={x.tolist()}")
            if ng <= tol:
                return x
            K = I - f.jacobian(x)
            if np.linalg.svd(K, compute_uv=False)[-1] <= 1e-12:
                x = x + g
            else:
                d = np.linalg.solve(K, g)
                t = 1.0
                while t > 1e-10:
                    trial = x + t * d
                    gt = f(trial) - trial
                    if np.all(np.isfinite(gt)) and np.linalg.norm(gt) < ng:
                        break
                    t *= 0.5
                x = x + t * d
            if np.linalg.norm(x) > BLOWUP:
                raise FixedPointError("iteration diverged (|x| > 1e12)")
    raise FixedPointError(f"no convergence within {max_iter} iterations "
                          f"(residual {ng:.3e})")


@dataclass
class InvarianceResult:
    passed: bool
    worst_ratio: float
    witness: list
    n_samples: int
    seed: int

    def to_dict(self) -> dict:
        return {"passed": self.passed, "worst_ratio": self.worst_ratio, "witness": self.witness,
                "estimate": f"sampled (N={self.n_samples}, seed={self.seed})"}


def verify_invariance(f_hat: SystemMap, P, eps: float, n: int = 10_000, seed: int = 0) -> InvarianceResult:
    """Check that ``f_hat`` maps ``{x' P x <= eps/2}`` into itself.

    ``n`` boundary points and ``n`` interior points are tested; the ratio
    ``f_hat(x)' P f_hat(x) / (eps/2)`` must not exceed 1.
    """
    form = _form(P)
    X = CompactSetSampler.ellipsoid(form.P, eps / 2, n=n, n_boundary=n, seed=seed).draw()
    ratio = _kernels.quad_forms(f_hat.batch(X), form.P) / (eps / 2)
    i = int(np.argmax(ratio))
    worst = float(ratio[i])
    return InvarianceResult(bool(worst <= 1 + 1e-12), worst, X[i].tolist(), len(X), seed)


@dataclass
class ContractionResult:
    passed: bool
    worst_ratio: float
    bound: float
    spectral_radius: float
    witness: list
    n_samples: int
    seed: int

    def to_dict(self) -> dict:
        return {"passed": self.passed, "worst_ratio": self.worst_ratio, "bound": self.bound,
                "spectral_radius": self.spectral_radius, "witness": self.witness,
                "estimate": f"sampled (N={self.n_samples}, seed={self.seed})"}


def verify_local_contraction(f_hat: SystemMap, x_e, P, a: float, eps: float, n: int = 4096,
                             seed: int = 0, tol: float = 1e-9) -> ContractionResult:
    """Check ``V(f_hat(x) - x_e) <= (3+a)/4 V(x - x_e)`` on ``{x' P x <= eps}``.

    ``V`` is the quadratic form of ``P``.  Also requires the spectral radius of
    ``f_hat'(x_e)`` to be below 1.
    """
    form = _form(P)
    x_e = np.asarray(x_e, float).reshape(f_hat.n)
    X = CompactSetSampler.ellipsoid(form.P, eps, n=n, n_boundary=n // 4, seed=seed).draw()
    dx = X - x_e
    before = _kernels.quad_forms(dx, form.P)
    after = _kernels.quad_forms(f_hat.batch(X) - x_e, form.P)
    keep = before > 1e-300
    ratio = np.zeros(len(X))
    ratio[keep] = after[keep] / before[keep]
    i = int(np.argmax(ratio))
    bound = (3 + a) / 4
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", C1RegionWarning)
        sr = spectral_radius(f_hat.jacobian(x_e))
    worst = float(ratio[i])
    return ContractionResult(bool(worst <= bound + tol and sr < 1), worst, bound, sr,
                             X[i].tolist(), len(X), seed)


@dataclass
class UniquenessResult:
    passed: bool
    worst_decrease_ratio: float
    decrease_witness: list | None
    fixed_points: list
    outside_inner: list
    n_samples: int
    n_seeds: int
    seed: int
    vacuous: bool = False

    def to_dict(self) -> dict:
        return {"passed": self.passed, "vacuous": self.vacuous,
                "worst_decrease_ratio": self.worst_decrease_ratio,
                "decrease_witness": self.decrease_witness,
                "fixed_points": self.fixed_points, "outside_inner_level": self.outside_inner,
                "scope": "uniqueness only on the annulus; the inner sublevel set may hold several equilibria",
                "estimate": f"sampled (N={self.n_samples}, seeds={self.n_seeds}, seed={self.seed})"}


def _dedupe(points: list[np.ndarray], tol: float) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for p in points:
        if all(np.linalg.norm(p - q) > 10 * tol for q in out):
            out.append(p)
    return out


def uniqueness_annulus(f_hat: SystemMap, V: LyapunovFunction, c_lo: float, c_hi: float,
                       rho_tilde: float, n: int = 4096, n_seeds: int = 1000, seed: int = 0,
                       r_max: float | None = None, tol: float = 1e-10) -> UniquenessResult:
    """Rule out equilibria of ``f_hat`` in ``c_lo <= V <= c_hi``.

    Checks ``V(f_hat(x)) < rho_tilde V(x)`` on annulus samples, then runs
    Newton from ``n_seeds`` annulus seeds and requires every converged
    fixed point to satisfy ``V <= c_lo``.
    """
    from .bounds import _sublevel_points

    if c_lo >= c_hi:
        return UniquenessResult(True, 0.0, None, [], [], 0, 0, seed, vacuous=True)
    X = _sublevel_points(V, c_lo, c_hi, n, n // 4, seed, r_max)
    VX = V.batch(X)
    ratio = V.batch(f_hat.batch(X)) / (rho_tilde * VX)
    i = int(np.argmax(ratio))
    decrease_ok = bool(ratio[i] < 1)
    found = []
    for x0 in X[:n_seeds]:
        try:
            found.append(find_fixed_point(f_hat, x0, tol=tol))
        except FixedPointError:
            continue
    points = _dedupe(found, tol)
    outside = [p for p in points if V(p) > c_lo + 1e-9]
    return UniquenessResult(decrease_ok and not outside, float(ratio[i]),
                            None if decrease_ok else X[i].tolist(),
                            [p.tolist() for p in points], [p.tolist() for p in outside],
                            len(X), min(n_seeds, len(X)), seed)


@dataclass
class BasinResult:
    fraction: float
    n_seeds: int
    n_converged: int
    steps: int
    tol: float
    worst_distance: float
    witnesses: list
    worst_trajectory: Trajectory | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "n_seeds": self.n_seeds,
                "n_converged": self.n_converged, "steps": self.steps, "tol": self.tol,
                "worst_distance": self.worst_distance, "nonconvergent_witnesses": self.witnesses,
                "label": "sampled evidence"}


def basin_check(f_hat: SystemMap, x_e, seeds, N: int, tol: float = 1e-8) -> BasinResult:
    """Fraction of seeds whose state after ``N`` steps is within ``tol`` of ``x_e``.

    ``seeds`` is a :class:`CompactSetSampler` or an array of initial states.
    """
    X0 = seeds.draw() if isinstance(seeds, CompactSetSampler) else np.atleast_2d(np.asarray(seeds, float))
    x_e = np.asarray(x_e, float).reshape(f_hat.n)
    X = X0.copy()
    alive = np.ones(len(X), dtype=bool)
    with np.errstate(all="ignore"):
        for _ in range(N):
            X[alive] = f_hat.batch(X[alive])
            alive &= np.all(np.isfinite(X), axis=1) & (np.linalg.norm(X, axis=1) <= BLOWUP)
    dist = np.full(len(X), np.inf)
    dist[alive] = np.linalg.norm(X[alive] - x_e, axis=1)
    ok = dist <= tol
    worst = int(np.argmax(dist))
    traj = simulate(f_hat, X0[worst], N) if len(X0) else None
    return BasinResult(float(ok.mean()) if len(X0) else 1.0, len(X0), int(ok.sum()), N, tol,
                       float(dist[worst]) if len(X0) else 0.0,
                       X0[~ok][:5].tolist(), traj)


@dataclass
class EquilibriumReport:
    x_e: np.ndarray
    residual: float
    spectral_radius: float
    in_half_eps: bool
    in_inner_level: bool | None
    invariance: InvarianceResult
    contraction: ContractionResult
    uniqueness: UniquenessResult | None = None
    basin: BasinResult | None = None
    distances: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        ok = self.in_half_eps and self.invariance.passed and self.contraction.passed
        if self.uniqueness is not None:
            ok = ok and self.uniqueness.passed
        if self.basin is not None:
            ok = ok and self.basin.fraction == 1.0
        return bool(ok)

    def to_dict(self) -> dict:
        return {
            "x_e": self.x_e.tolist(), "residual": self.residual,
            "spectral_radius": self.spectral_radius, "in_half_eps": self.in_half_eps,
            "in_inner_level": self.in_inner_level,
            "invariance": self.invariance.to_dict(), "contraction": self.contraction.to_dict(),
            "uniqueness": None if self.uniqueness is None else self.uniqueness.to_dict(),
            "basin": None if self.basin is None else self.basin.to_dict(),
            "distances": self.distances, "passed": self.passed,
        }


def analyze_equilibrium(f_hat: SystemMap, cert: ContractionCertificate, x0=None,
                        n: int = 4096, seed: int = 0, basin_seeds=None, basin_steps: int = 200,
                        basin_tol: float = 1e-8, tol: float = 1e-10) -> EquilibriumReport:
    """Run the fixed-point solve and the invariance, contraction and basin checks."""
    x0 = np.zeros(f_hat.n) if x0 is None else x0
    x_e = find_fixed_point(f_hat, x0, tol=tol)
    residual = float(np.linalg.norm(f_hat(x_e) - x_e))
    inv = verify_invariance(f_hat, cert.form, cert.eps, n=n, seed=seed)
    con = verify_local_contraction(f_hat, x_e, cert.form, cert.a, cert.eps, n=n, seed=seed + 1)
    basin = None
    if basin_seeds is not None:
        basin = basin_check(f_hat, x_e, basin_seeds, basin_steps, basin_tol)
    return EquilibriumReport(x_e, residual, con.spectral_radius,
                             bool(cert.form(x_e) <= cert.eps / 2), None, inv, con, None, basin)
