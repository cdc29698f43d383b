"""Integral action under model mismatch.

Generalized integrators ``z+ = z + k(xi, y)``, the sampled mismatch
quantities between a nominal and a perturbed plant, the admissible
mismatch budgets, forwarding synthesis for SISO plants, and closed-loop
regulation runs.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .dynamics import (NumericalBlowUp, PlantModel, SampledSup, Trajectory, VectorFn,
                       ExtendedSystem, build_extended, simulate)
from .expr import compile_map
from .sets import CompactSetSampler

__all__ = [
    "ResonanceError", "SynthesisError", "GeneralizedIntegrator", "IntegratorCheck",
    "DeltaReport", "ControllerConstants", "MismatchBudget", "LinearMap", "PolynomialMap",
    "MFit", "ForwardingController", "RegulationVerdict",
    "check_integrator", "delta_quantities", "controller_constants", "prop2_budget",
    "prop3_budget", "solve_M_linear", "solve_M_numeric", "adaptive_simpson",
    "forwarding_control", "simulate_regulation",
]


class ResonanceError(np.linalg.LinAlgError):
    """``A - I`` is singular, so the linear M equation has no unique solution."""


class SynthesisError(ArithmeticError):
    """The implicit forwarding control could not be solved at a state."""


# ---------------------------------------------------------------------------
# generalized integrators

@dataclass
class GeneralizedIntegrator:
    """``k(xi, y)`` with Lipschitz moduli ``L1(xi)`` and ``L2(xi)`` in ``y``."""

    fn: VectorFn
    L1: Callable
    L2: Callable

    @property
    def q(self) -> int:
        return self.fn.arg_dims[0]

    @property
    def p(self) -> int:
        return self.fn.arg_dims[1]

    @classmethod
    def standard(cls, q: int, p: int) -> "GeneralizedIntegrator":
        """The plain integrator ``k(xi, y) = y`` with ``L1 = 1`` and ``L2 = 0``."""
        fn = VectorFn.linear([np.zeros((p, q)), np.eye(p)])
        return cls(fn, lambda xi: 1.0, lambda xi: 0.0)

    @classmethod
    def from_expressions(cls, exprs, q: int, p: int, L1="1", L2="0") -> "GeneralizedIntegrator":
        """``exprs`` use ``x1..xq`` for ``xi`` and ``u1..up`` for ``y``."""
        fn = VectorFn.from_expressions(exprs, [("x", q), ("u", p)])
        l1 = compile_map([str(L1)], q, 1)
        l2 = compile_map([str(L2)], q, 1)
        return cls(fn, lambda xi: float(l1(xi)[0]), lambda xi: float(l2(xi)[0]))


@dataclass
class IntegratorCheck:
    passed: bool
    zero_ok: bool
    nonzero_ok: bool
    lipschitz_ok: bool
    derivative_lipschitz_ok: bool
    witnesses: dict
    n_samples: int
    seed: int

    def to_dict(self) -> dict:
        return {"passed": self.passed, "k_zero_at_zero": self.zero_ok,
                "k_nonzero_off_zero": self.nonzero_ok, "L1_bound": self.lipschitz_ok,
                "L2_bound": self.derivative_lipschitz_ok, "witnesses": self.witnesses,
                "estimate": f"sampled (N={self.n_samples}, seed={self.seed})"}


def check_integrator(k: GeneralizedIntegrator, xi_sampler: CompactSetSampler,
                     y_radius: float = 1.0, seed: int = 0, tol: float = 1e-12) -> IntegratorCheck:
    """Check the integrator conditions on samples.

    For each sampled ``xi`` a pair ``(y_a, y_b)`` is drawn from the ball of
    radius ``y_radius``; the checks are ``k(xi, 0) = 0``, ``k(xi, y_a) != 0``
    and both Lipschitz bounds.
    """
    XI = xi_sampler.draw()
    rng = np.random.default_rng(seed)
    p = k.p
    ys = CompactSetSampler.ball(y_radius, p, n=2 * len(XI), seed=seed).draw()
    # include pairs symmetric around zero and on the boundary
    YA, YB = ys[:len(XI)], ys[len(XI):]
    YB[::2] = -YA[::2]
    rng.shuffle(YB)
    w: dict = {}
    zero_ok = nonzero_ok = lip_ok = dlip_ok = True
    for xi, ya, yb in zip(XI, YA, YB):
        k0 = np.linalg.norm(k.fn(xi, np.zeros(p)))
        if k0 > tol and zero_ok:
            zero_ok = False
            w["k_zero_at_zero"] = {"xi": xi.tolist(), "k": float(k0)}
        if np.linalg.norm(ya) > 0 and np.linalg.norm(k.fn(xi, ya)) <= tol and nonzero_ok:
            nonzero_ok = False
            w["k_nonzero_off_zero"] = {"xi": xi.tolist(), "y": ya.tolist()}
        dy = float(np.linalg.norm(ya - yb))
        lhs = float(np.linalg.norm(k.fn(xi, ya) - k.fn(xi, yb)))
        if lhs > k.L1(xi) * dy * (1 + 1e-9) + tol and lip_ok:
            lip_ok = False
            w["L1_bound"] = {"xi": xi.tolist(), "y_a": ya.tolist(), "y_b": yb.tolist(),
                             "lhs": lhs, "rhs": k.L1(xi) * dy}
        dlhs = float(np.linalg.norm(k.fn.partial(0, xi, ya) - k.fn.partial(0, xi, yb), 2))
        if dlhs > k.L2(xi) * dy * (1 + 1e-9) + tol and dlip_ok:
            dlip_ok = False
            w["L2_bound"] = {"xi": xi.tolist(), "y_a": ya.tolist(), "y_b": yb.tolist(),
                             "lhs": dlhs, "rhs": k.L2(xi) * dy}
    passed = zero_ok and nonzero_ok and lip_ok and dlip_ok
    return IntegratorCheck(passed, zero_ok, nonzero_ok, lip_ok, dlip_ok, w, len(XI), seed)


# ---------------------------------------------------------------------------
# mismatch quantities

_DELTA_NAMES = ("xi", "y", "z", "d_xi", "d_u", "d_y")


@dataclass
class DeltaReport:
    """Sampled suprema of the six mismatch quantities."""

    values: dict
    L: float

    def __getitem__(self, name: str) -> SampledSup:
        return self.values[name]

    @property
    def z_bound_holds(self) -> bool:
        return self.values["z"].value <= self.L * self.values["y"].value * (1 + 1e-12) + 1e-15

    def to_dict(self) -> dict:
        return {"deltas": {k: v.to_dict() for k, v in self.values.items()}, "L": self.L,
                "z_bound_holds": self.z_bound_holds}


def _sup(vals: list[float], X: np.ndarray, seed) -> SampledSup:
    if not len(vals):
        return SampledSup(0.0, None, 0, seed)
    i = int(np.argmax(vals))
    return SampledSup(float(vals[i]), X[i].copy(), len(vals), seed)


def delta_quantities(plant: PlantModel, plant_hat: PlantModel, alpha: VectorFn,
                     k: GeneralizedIntegrator, sampler: CompactSetSampler,
                     jac_sampler: CompactSetSampler | None = None) -> DeltaReport:
    """Mismatch suprema over ``x = (xi, z)``.

    Value terms use ``sampler``; Jacobian terms use ``jac_sampler`` (defaults
    to ``sampler``).  Matrix norms are spectral.
    """
    q, p = plant.q, plant.p
    X = sampler.draw()
    Xj = X if jac_sampler is None else jac_sampler.draw()
    d_xi, d_y, d_z, Ls = [], [], [], []
    for x in X:
        xi, z = x[:q], x[q:]
        u = alpha(xi, z)
        y, y_hat = plant.h(xi, u), plant_hat.h(xi, u)
        d_xi.append(np.linalg.norm(plant_hat.phi(xi) - plant.phi(xi) + plant_hat.g(xi, u) - plant.g(xi, u)))
        d_y.append(np.linalg.norm(y_hat - y))
        d_z.append(np.linalg.norm(k.fn(xi, y_hat) - k.fn(xi, y)))
        Ls.append(k.L1(xi))
    dd_xi, dd_u, dd_y = [], [], []
    for x in Xj:
        xi, z = x[:q], x[q:]
        u = alpha(xi, z)
        dd_xi.append(np.linalg.norm(plant_hat.phi.jacobian(xi) - plant.phi.jacobian(xi)
                                    + plant_hat.g.partial(0, xi, u) - plant.g.partial(0, xi, u), 2))
        dd_u.append(np.linalg.norm(plant_hat.g.partial(1, xi, u) - plant.g.partial(1, xi, u), 2))
        dd_y.append(np.linalg.norm(plant_hat.h.partial(0, xi, u) - plant.h.partial(0, xi, u), 2)
                    + np.linalg.norm(plant_hat.h.partial(1, xi, u), 2))
    seed, jseed = sampler.seed, (sampler if jac_sampler is None else jac_sampler).seed
    values = dict(zip(_DELTA_NAMES, [
        _sup(d_xi, X, seed), _sup(d_y, X, seed), _sup(d_z, X, seed),
        _sup(dd_xi, Xj, jseed), _sup(dd_u, Xj, jseed), _sup(dd_y, Xj, jseed)]))
    return DeltaReport(values, float(max(Ls, default=0.0)))


@dataclass
class ControllerConstants:
    L: float
    L_alpha: float
    L_k: float
    n_samples: int
    seed: int

    def to_dict(self) -> dict:
        return {"L": self.L, "L_alpha": self.L_alpha, "L_k": self.L_k,
                "estimate": f"sampled (N={self.n_samples}, seed={self.seed})"}


def controller_constants(alpha: VectorFn, k: GeneralizedIntegrator,
                         sampler: CompactSetSampler) -> ControllerConstants:
    """Sampled ``L = sup L1``, ``L_alpha`` (largest partial of alpha) and ``L_k = sup max(L1, L2)``."""
    q = k.q
    X = sampler.draw()
    L = La = Lk = 0.0
    for x in X:
        xi, z = x[:q], x[q:]
        l1, l2 = k.L1(xi), k.L2(xi)
        L, Lk = max(L, l1), max(Lk, l1, l2)
        La = max(La, np.linalg.norm(alpha.partial(0, xi, z), 2),
                 np.linalg.norm(alpha.partial(1, xi, z), 2))
    return ControllerConstants(float(L), float(La), float(Lk), len(X), sampler.seed)


# ---------------------------------------------------------------------------
# budgets (Euclidean/spectral norms, so both norm-equivalence constants are 1)

def prop2_budget(delta: float, L: float) -> float:
    """Mismatch budget for existence of a regulating equilibrium: ``delta / (1 + L)``."""
    if delta < 0 or L < 0:
        raise ValueError("delta and L must be nonnegative")
    return delta / (1 + L)


@dataclass
class MismatchBudget:
    ell: float
    ell_bar: float
    L: float
    L_alpha: float
    L_k: float
    mu: float
    delta3: float
    delta4: float | None
    safety: float
    delta_bar: float

    def to_dict(self) -> dict:
        return {"ell": self.ell, "ell_bar": self.ell_bar, "L": self.L, "L_alpha": self.L_alpha,
                "L_k": self.L_k, "mu": self.mu, "delta3": self.delta3, "delta4": self.delta4,
                "safety": self.safety, "delta_bar": self.delta_bar,
                "formula": "mu = max(1+L, 1+2(L_alpha+L_k+L_alpha*L_k)); "
                           "delta_bar = min(delta3, delta4)/mu * safety"}


def prop3_budget(delta3: float, delta4: float | None, L_alpha: float, L_k: float, L: float,
                 safety: float = 0.9) -> MismatchBudget:
    """Mismatch budget for a stable regulating equilibrium."""
    if min(L_alpha, L_k, L) < 0 or delta3 <= 0:
        raise ValueError("constants must be nonnegative and delta3 positive")
    if not 0 < safety <= 1:
        raise ValueError("safety factor must lie in (0, 1]")
    mu = max(1 + L, 1 + 2 * (L_alpha + L_k + L_alpha * L_k))
    base = delta3 if delta4 is None else min(delta3, delta4)
    return MismatchBudget(1.0, 1.0, L, L_alpha, L_k, mu, delta3, delta4, safety, base / mu * safety)


# ---------------------------------------------------------------------------
# the forwarding map M with M(phi(xi)) = M(xi) + k(xi, h(xi))

@dataclass
class LinearMap:
    K: np.ndarray

    def __call__(self, xi) -> np.ndarray:
        return self.K @ np.asarray(xi, float).reshape(self.K.shape[1])

    def gradient(self, xi) -> np.ndarray:
        return self.K.copy()


def _monomials(q: int, degree: int) -> list[tuple[int, ...]]:
    out = []
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(q), d):
            e = [0] * q
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


@dataclass
class PolynomialMap:
    """``M(xi) = C' B(xi)`` with ``B`` the monomials of degree 1..d."""

    exponents: np.ndarray  # (n_basis, q)
    coef: np.ndarray  # (n_basis, p)

    def basis(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        return np.prod(X[:, None, :] ** self.exponents[None, :, :], axis=2)

    def __call__(self, xi) -> np.ndarray:
        return self.basis(xi)[0] @ self.coef

    def gradient(self, xi) -> np.ndarray:
        xi = np.asarray(xi, float).reshape(-1)
        E = self.exponents
        dB = np.zeros((len(E), len(xi)))
        for j in range(len(xi)):
            Ej = E.copy()
            Ej[:, j] -= 1
            active = E[:, j] > 0
            dB[active, j] = E[active, j] * np.prod(xi ** Ej[active], axis=1)
        return self.coef.T @ dB

    def to_dict(self) -> dict:
        return {"exponents": self.exponents.tolist(), "coef": self.coef.tolist()}


@dataclass
class MFit:
    M: PolynomialMap
    rms_residual: float
    rank: int
    rank_deficient: bool
    n_samples: int
    seed: int | None

    def to_dict(self) -> dict:
        return {"M": self.M.to_dict(), "rms_residual": self.rms_residual, "rank": self.rank,
                "rank_deficient": self.rank_deficient,
                "estimate": f"sampled (N={self.n_samples}, seed={self.seed})"}


def solve_M_linear(A, C_k, tol: float = 1e-12) -> LinearMap:
    """Solve ``K A = K + C_k``, i.e. ``K = C_k (A - I)^{-1}``.

    Raises
    ------
    ResonanceError
        If ``A - I`` has a singular value at or below ``tol``.
    """
    A = np.atleast_2d(np.asarray(A, float))
    C = np.atleast_2d(np.asarray(C_k, float))
    D = A - np.eye(A.shape[0])
    if np.linalg.svd(D, compute_uv=False)[-1] <= tol:
        raise ResonanceError("resonance: 1 is an eigenvalue of A")
    K = np.linalg.solve(D.T, C.T).T
    if np.linalg.norm(K @ A - K - C) > 1e-10 * max(1.0, np.linalg.norm(K)):
        raise ResonanceError("M equation residual too large; A - I is ill-conditioned")
    return LinearMap(K)


def solve_M_numeric(phi: Callable, kh: Callable, q: int, degree: int = 3, points=None,
                    ridge: float = 1e-12) -> MFit:
    """Least-squares polynomial fit of ``M(phi(xi)) - M(xi) = k(xi, h(xi))``.

    ``points`` is a sampler or an array of ``xi``; the default is 256 points
    of the box ``[-1, 1]^q``.  The ridge term keeps the fit defined when the
    basis is rank deficient on the samples.
    """
    if points is None:
        points = CompactSetSampler.box(-np.ones(q), np.ones(q), n=256, seed=0)
    seed = points.seed if isinstance(points, CompactSetSampler) else None
    X = points.draw() if isinstance(points, CompactSetSampler) else np.atleast_2d(np.asarray(points, float))
    E = np.array(_monomials(q, degree), dtype=np.int64)
    shell = PolynomialMap(E, np.zeros((len(E), 1)))
    PX = np.array([np.asarray(phi(x), float).reshape(q) for x in X])
    Y = np.array([np.atleast_1d(np.asarray(kh(x), float)) for x in X])
    D = shell.basis(PX) - shell.basis(X)
    rank = int(np.linalg.matrix_rank(D))
    aug = np.vstack([D, math.sqrt(ridge) * np.eye(len(E))])
    rhs = np.vstack([Y, np.zeros((len(E), Y.shape[1]))])
    coef = np.linalg.lstsq(aug, rhs, rcond=None)[0]
    coef[np.abs(coef) < 1e-14] = 0.0
    rms = float(np.sqrt(np.mean((D @ coef - Y) ** 2)))
    return MFit(PolynomialMap(E, coef), rms, rank, rank < len(E), len(X), seed)


# ---------------------------------------------------------------------------
# implicit forwarding control

def adaptive_simpson(fn: Callable[[float], float], a: float, b: float, tol: float = 1e-10,
                     max_depth: int = 50) -> float:
    """Adaptive Simpson quadrature with Richardson correction."""
    if a == b:
        return 0.0

    def simpson(lo, flo, hi, fhi):
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        return mid, fm, (hi - lo) / 6 * (flo + 4 * fm + fhi)

    def rec(lo, flo, hi, fhi, mid, fm, whole, eps, depth):
        lm, flm, left = simpson(lo, flo, mid, fm)
        rm, frm, right = simpson(mid, fm, hi, fhi)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15 * eps:
            return left + right + delta / 15
        return (rec(lo, flo, mid, fm, lm, flm, left, eps / 2, depth - 1)
                + rec(mid, fm, hi, fhi, rm, frm, right, eps / 2, depth - 1))

    fa, fb = fn(a), fn(b)
    m, fm, whole = simpson(a, fa, b, fb)
    return rec(a, fa, b, fb, m, fm, whole, tol, max_depth)


def _grad(W, xi) -> np.ndarray:
    return np.asarray(W.gradient(xi), float).reshape(-1)


def _forwarding_parts(W, M, plant: PlantModel, k: GeneralizedIntegrator, xi, z):
    """Integrand ``v -> dV(zeta+(v))/dv`` for ``V = W(xi) + |eta|^2``."""
    xi = np.asarray(xi, float).reshape(plant.q)
    z = np.asarray(z, float).reshape(plant.p)
    kh = k.fn(xi, plant.h(xi, np.zeros(plant.m)))
    base = plant.phi(xi)

    def integrand(v: float) -> float:
        u = np.array([v])
        xi_p = base + plant.g(xi, u)
        eta_p = z + kh - M(xi_p)
        gu = plant.g.partial(1, xi, u)[:, 0]
        return float(_grad(W, xi_p) @ gu - 2 * eta_p @ (np.atleast_2d(M.gradient(xi_p)) @ gu))

    return integrand


def forwarding_control(W, M, plant: PlantModel, k: GeneralizedIntegrator, xi, z,
                       tol: float = 1e-12, max_iter: int = 100, u_max: float = 1e3,
                       quad_tol: float = 1e-10) -> float:
    """Solve ``u = -Q(u)/u`` with ``Q(u)`` the integral of the forwarding integrand.

    ``zeta+(v) = (phi(xi) + g(xi, v), z + k(xi, h(xi)) - M(phi(xi) + g(xi, v)))``
    and the integrand is ``dV/dzeta (zeta+(v)) . d zeta+/dv``.  ``-Q(u)/u``
    tends to minus the integrand at ``v = 0`` as ``u -> 0``.  A damped
    fixed-point iteration is tried first; bisection on ``u + Q(u)/u`` is the
    fallback.

    Raises
    ------
    SynthesisError
        If the plant is not SISO or no root is bracketed in ``[-u_max, u_max]``.
    """
    if plant.m != 1 or plant.p != 1:
        raise SynthesisError("forwarding synthesis supports only m = p = 1")
    integrand = _forwarding_parts(W, M, plant, k, xi, z)
    i0 = integrand(0.0)

    def F(u: float) -> float:
        if u == 0.0:
            return -i0
        return -adaptive_simpson(integrand, 0.0, u, quad_tol) / u

    u, omega, last = 0.0, 1.0, math.inf
    for _ in range(max_iter):
        step = omega * (F(u) - u)
        if not math.isfinite(step):
            break
        if abs(step) <= tol:
            return u + step
        if abs(step) >= last:
            omega *= 0.5
            step *= 0.5
        u, last = u + step, abs(step)
        if abs(u) > u_max:
            break

    def r(v: float) -> float:
        return v - F(v)

    grid = [0.0]
    for j in range(60):
        s = u_max * 2.0 ** -j
        grid += [s, -s]
    grid = sorted(set(grid))
    vals = [r(v) for v in grid]
    for v, fv in zip(grid, vals):
        if fv == 0.0:
            return v
    brackets = [(grid[i], grid[i + 1], vals[i], vals[i + 1]) for i in range(len(grid) - 1)
                if vals[i] * vals[i + 1] < 0]
    if not brackets:
        raise SynthesisError(f"no root of u + Q(u)/u bracketed within |u| <= {u_max}")
    lo, hi, flo, _ = min(brackets, key=lambda b: min(abs(b[0]), abs(b[1])))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = r(mid)
        if fm == 0.0 or hi - lo <= tol:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class ForwardingController:
    """``alpha(xi, z)`` from the implicit forwarding law, SISO only."""

    plant: PlantModel
    k: GeneralizedIntegrator
    M: object
    W: object
    tol: float = 1e-12
    u_max: float = 1e3

    def __call__(self, xi, z) -> float:
        return forwarding_control(self.W, self.M, self.plant, self.k, xi, z,
                                  tol=self.tol, u_max=self.u_max)

    def residual_M(self, points) -> float:
        """Max sampled ``|M(phi(xi)) - M(xi) - k(xi, h(xi))|``."""
        P = self.plant
        X = points.draw() if isinstance(points, CompactSetSampler) else np.atleast_2d(points)
        zero = np.zeros(P.m)
        return float(max(np.linalg.norm(self.M(P.phi(x)) - self.M(x) - self.k.fn(x, P.h(x, zero)))
                         for x in X))

    def as_vectorfn(self) -> VectorFn:
        q = self.plant.q
        return VectorFn(lambda v: np.array([self(v[:q], v[q:])]), [q, 1], 1)


# ---------------------------------------------------------------------------

@dataclass
class RegulationVerdict:
    passed: bool
    final_state: list
    final_output: list
    max_tail_output: float
    final_increment: float
    integrator_residual: float
    blew_up: bool
    steps: int
    y_tol: float
    trajectory: Trajectory | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "final_state": self.final_state,
                "final_output": self.final_output, "max_tail_output": self.max_tail_output,
                "final_increment": self.final_increment,
                "integrator_residual": self.integrator_residual, "blew_up": self.blew_up,
                "steps": self.steps, "y_tol": self.y_tol}


def simulate_regulation(ext: ExtendedSystem, x0, N: int, y_tol: float = 1e-8) -> RegulationVerdict:
    """Run the closed loop ``N`` steps.

    Passes iff no blow-up, ``|y_k| <= y_tol`` for every ``k >= N/2``, and the
    last state increment is at most ``y_tol``.
    """
    traj = simulate(ext.system, x0, N, output=ext.output)
    ys = np.linalg.norm(traj.outputs, axis=1)
    tail = ys[N // 2:] if not traj.blew_up else ys
    xf = traj.states[-1]
    inc = float(np.linalg.norm(traj.states[-1] - traj.states[-2])) if len(traj.states) > 1 else 0.0
    xi, _ = ext.split(xf) if np.all(np.isfinite(xf)) else (xf[:ext.plant.q], None)
    y_f = traj.outputs[-1]
    k_res = float(np.linalg.norm(ext.k(xi, y_f))) if np.all(np.isfinite(y_f)) else math.inf
    passed = (not traj.blew_up and len(tail) > 0 and float(np.max(tail)) <= y_tol
              and inc <= y_tol)
    return RegulationVerdict(bool(passed), xf.tolist(), y_f.tolist(), float(np.max(tail)),
                             inc, k_res, traj.blew_up, N, y_tol, traj)
