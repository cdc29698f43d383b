"""Explicit perturbation budgets.

``prop1_delta`` estimates the model-mismatch radius under which a perturbed
map keeps an equilibrium inside a sublevel set of a Lyapunov function.
``delta1``..``delta4`` and :func:`assemble_bounds` give the closed-form
budgets under which a locally exponentially stable equilibrium persists.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dynamics import SystemMap
from .lyapunov import ContractionCertificate, LyapunovFunction, QuadraticForm
from .sets import CompactSetSampler, radial_boundary, unit_directions

__all__ = [
    "CertificateError", "Prop1Budget", "GlobalLyapunovCertificate", "Delta4Result",
    "TotalStabilityBounds", "prop1_delta", "delta1", "delta2", "delta4",
    "validate_global_certificate", "assemble_bounds", "worst_quadratic_shift",
]

DEFAULT_SAFETY = 0.9


class CertificateError(ValueError):
    """A supplied Lyapunov certificate fails on samples."""


def delta1(eps: float, a: float, P) -> float:
    """Model-mismatch budget for invariance of ``x' P x <= eps/2``."""
    lam = P.lam_max if isinstance(P, QuadraticForm) else float(np.max(np.linalg.eigvalsh(np.atleast_2d(P))))
    return math.sqrt(eps * (1 - a) ** 2 / (8 * lam * (3 + a)))


def delta2(a: float) -> float:
    """Jacobian-mismatch budget for local contraction at rate ``(3+a)/4``."""
    return (1 - a) / (2 * math.sqrt(10 + 6 * a))


# ---------------------------------------------------------------------------
# existence budget from a generic Lyapunov function

@dataclass
class Prop1Budget:
    c_hi: float
    c_lo: float
    rho: float
    rho_tilde: float
    delta: float
    p_at_delta: float
    q_at_delta: float
    n_samples: int
    seed: int

    def to_dict(self) -> dict:
        return {"c_hi": self.c_hi, "c_lo": self.c_lo, "rho": self.rho,
                "rho_tilde": self.rho_tilde, "delta": self.delta,
                "p_at_delta": self.p_at_delta, "q_at_delta": self.q_at_delta,
                "estimate": f"sampled (N={self.n_samples}, seed={self.seed})"}


def worst_quadratic_shift(P: np.ndarray, Y: np.ndarray, s: float) -> np.ndarray:
    """``max_{|v|=1} (y + s v)' P (y + s v)`` for each row ``y`` of ``Y``.

    Solved exactly through the secular equation of the trust-region
    problem in the eigenbasis of ``P``.
    """
    Y = np.atleast_2d(Y)
    base = _kernels.quad_forms(Y, P)
    if s == 0:
        return base
    lam, Q = np.linalg.eigh(P)
    beta = (Y @ Q) * lam  # Q' P y
    top = lam[-1]
    # w_i = s beta_i / (mu - s^2 lam_i), sum w_i^2 = 1, mu > s^2 top
    def norm2(mu):
        return np.sum((s * beta / (mu[:, None] - s * s * lam)) ** 2, axis=1)

    lo = np.full(len(Y), s * s * top)
    hi = lo + s * np.linalg.norm(beta, axis=1) + 1e-300
    # norm2 is decreasing in mu; grow hi until norm2(hi) <= 1
    while True:
        bad = norm2(hi) > 1
        if not bad.any():
            break
        hi[bad] = lo[bad] + 2 * (hi[bad] - lo[bad])
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.all((mid == lo) | (mid == hi)):
            break
        big = norm2(mid) > 1
        lo = np.where(big, mid, lo)
        hi = np.where(big, hi, mid)
    mu = hi
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(np.isfinite(s * beta / (mu[:, None] - s * s * lam)),
                     s * beta / (mu[:, None] - s * s * lam), 0.0)
    # hard case: leftover mass goes to the top eigendirection
    missing = np.clip(1 - np.sum(w ** 2, axis=1), 0.0, None)
    sign = np.where(beta[:, -1] >= 0, 1.0, -1.0)
    w[:, -1] += sign * np.sqrt(missing)
    return base + 2 * s * np.sum(beta * w, axis=1) + s * s * np.sum(lam * w ** 2, axis=1)


def _direction_grid(dim: int, n_dirs: int, seed: int) -> np.ndarray:
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        t = 2 * np.pi * np.arange(n_dirs) / n_dirs
        return np.column_stack([np.cos(t), np.sin(t)])
    axes = np.vstack([np.eye(dim), -np.eye(dim)])
    return np.vstack([axes, unit_directions(n_dirs, dim, np.random.default_rng(seed))])


def _worst_shift(V: LyapunovFunction, Y: np.ndarray, s: float, dirs: np.ndarray) -> np.ndarray:
    if V.quadratic is not None:
        return worst_quadratic_shift(V.quadratic.P, Y, s)
    pts = (Y[:, None, :] + s * dirs[None, :, :]).reshape(-1, Y.shape[1])
    return V.batch(pts).reshape(len(Y), len(dirs)).max(axis=1)


def _sublevel_points(V: LyapunovFunction, c_lo: float, c_hi: float, n: int, n_boundary: int,
                     seed: int, r_max: float | None) -> np.ndarray:
    if V.quadratic is not None:
        P = V.quadratic.P
        if c_lo <= 0:
            s = CompactSetSampler.ellipsoid(P, c_hi, n=n, n_boundary=n_boundary, seed=seed)
        else:
            s = CompactSetSampler.annulus(P, c_lo, c_hi, n=n, n_boundary=n_boundary, seed=seed)
        return s.draw()
    if r_max is None:
        raise ValueError("generic V needs r_max to bound its sublevel sets")
    s = CompactSetSampler.sublevel(V, V.dim, c_hi, r_max, c_lo=c_lo, n=n,
                                   n_boundary=n_boundary, seed=seed)
    return s.draw()


def prop1_delta(V: LyapunovFunction, f: SystemMap, c_hi: float, c_lo: float, rho_tilde: float,
                n: int = 2048, n_boundary: int = 512, seed: int = 0, r_max: float | None = None,
                n_dirs: int = 64, iters: int = 60) -> Prop1Budget:
    """Largest ``s`` with sampled ``p(s) < 0`` and ``q(s) < 0``.

    ``p(s) = max V(f(x) + s v) - c_hi`` over ``V(x) <= c_hi`` and unit ``v``;
    ``q(s) = max V(f(x) + s v) - rho_tilde V(x)`` over the annulus
    ``c_lo <= V(x) <= c_hi``.  Both grow with ``s``, so the threshold is
    bracketed by doubling and refined by bisection.

    Raises
    ------
    ValueError
        If ``rho_tilde`` is not in ``(V.rho, 1)`` or the levels are invalid.
    CertificateError
        If ``V(f(x)) <= rho V(x)`` fails on samples, or ``p(0)``/``q(0)`` is
        not negative.
    """
    if not V.rho < rho_tilde < 1:
        raise ValueError(f"need rho < rho_tilde < 1 (rho={V.rho}, rho_tilde={rho_tilde})")
    if not 0 < c_lo <= c_hi:
        raise ValueError("need 0 < c_lo <= c_hi")
    X = _sublevel_points(V, 0.0, c_hi, n, n_boundary, seed, r_max)
    VX = V.batch(X)
    FX = f.batch(X)
    decrease = V.batch(FX) - V.rho * VX
    if np.max(decrease) > 1e-12 * max(1.0, c_hi):
        i = int(np.argmax(decrease))
        raise CertificateError(f"V(f(x)) <= rho V(x) fails at x={X[i].tolist()}")
    if c_lo < c_hi:
        A = _sublevel_points(V, c_lo, c_hi, n, n_boundary, seed + 1, r_max)
        VA, FA = V.batch(A), f.batch(A)
    else:
        A = np.empty((0, V.dim))
        VA, FA = np.empty(0), np.empty((0, V.dim))
    dirs = _direction_grid(V.dim, n_dirs, seed)

    def p(s):
        return float(np.max(_worst_shift(V, FX, s, dirs))) - c_hi

    def q(s):
        if len(A) == 0:
            return -np.inf
        return float(np.max(_worst_shift(V, FA, s, dirs) - rho_tilde * VA))

    def ok(s):
        return p(s) < 0 and q(s) < 0

    if not ok(0.0):
        raise CertificateError("delta collapses to 0: p(0) or q(0) is not negative")
    lo, hi = 0.0, math.sqrt(c_hi / V.quadratic.lam_max) if V.quadratic is not None else 1.0
    for _ in range(200):
        if not ok(hi):
            break
        lo, hi = hi, 2 * hi
    else:
        raise CertificateError("p and q stay negative for all tested s")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return Prop1Budget(c_hi, c_lo, V.rho, rho_tilde, lo, p(lo), q(lo), len(X) + len(A), seed)


# ---------------------------------------------------------------------------
# domain-of-attraction budget from a user-supplied global certificate

@dataclass
class GlobalLyapunovCertificate:
    """User-supplied composite Lyapunov function on the working region.

    ``V`` must decrease by ``rho`` on ``{V <= level}``; that region must be
    contained in the ball of radius ``r_max`` (used for sampling).
    """

    V: LyapunovFunction
    level: float
    r_max: float
    alpha1: object = None

    @property
    def rho(self) -> float:
        return self.V.rho


def _region_points(cert: GlobalLyapunovCertificate, n: int, n_boundary: int, seed: int):
    V = cert.V
    interior = CompactSetSampler.sublevel(V, V.dim, cert.level, cert.r_max, n=n, seed=seed).draw()
    dirs = unit_directions(n_boundary, V.dim, np.random.default_rng(seed + 7))
    bnd, radii, multi = radial_boundary(V, cert.level, dirs, cert.r_max)
    if np.any(~np.isfinite(radii)):
        raise CertificateError("level set {V = level} not reached within r_max in some direction")
    return interior, bnd, bool(multi.any())


def validate_global_certificate(cert: GlobalLyapunovCertificate, f: SystemMap, n: int = 4096,
                                n_boundary: int = 1024, seed: int = 0) -> dict:
    interior, bnd, multi = _region_points(cert, n, n_boundary, seed)
    X = np.vstack([interior, bnd])
    VX = cert.V.batch(X)
    gap = cert.V.batch(f.batch(X)) - cert.rho * VX
    nonzero = np.linalg.norm(X, axis=1) > 0
    v0 = cert.V(np.zeros(cert.V.dim))
    result = {
        "worst_decrease_gap": float(np.max(gap)),
        "V_at_origin": v0,
        "positive_off_origin": bool(np.all(VX[nonzero] > 0)),
        "star_shaped_boundary": not multi,
        "estimate": f"sampled (N={len(X)}, seed={seed})",
    }
    result["passed"] = bool(result["worst_decrease_gap"] <= 1e-12 and abs(v0) <= 1e-12
                            and result["positive_off_origin"])
    return result


@dataclass
class Delta4Result:
    v_lower: float
    separation: float
    gradient_term: float
    sup_gradient: float
    rho: float
    delta4: float
    n_samples: int
    seed: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"v_lower": self.v_lower, "separation_term": self.separation,
                "gradient_term": self.gradient_term, "sup_gradient": self.sup_gradient,
                "rho": self.rho, "delta4": self.delta4,
                "estimate": f"sampled (N={self.n_samples}, seed={self.seed})",
                "notes": list(self.notes)}


def delta4(cert: GlobalLyapunovCertificate, C_bar: CompactSetSampler, P, eps: float,
           n: int = 4096, n_boundary: int = 1024, seed: int = 0) -> Delta4Result:
    """Domain-of-attraction budget.

    ``min( dist({V = level}, boundary of C_bar),
    (1 - rho) v_lower / sup |grad V| )`` where ``v_lower`` is the largest
    level whose sampled sublevel set stays inside ``x' P x <= eps/2``.
    All three quantities are sampled estimates.
    """
    form = P if isinstance(P, QuadraticForm) else QuadraticForm(P)
    V = cert.V
    interior, bnd, multi = _region_points(cert, n, n_boundary, seed)
    ell = CompactSetSampler.ellipsoid(form.P, eps / 2, n=n_boundary, seed=seed + 3,
                                      boundary_only=True).draw()
    notes = ["separation is a minimum over sampled boundary pairs"]
    if multi:
        notes.append("level set {V = level} is not star-shaped along some directions")
    if np.max(V.batch(ell)) > cert.level:
        raise CertificateError("x' P x <= eps/2 is not inside {V <= level} on samples")
    # v_lower: smallest V among sampled points of the region outside x'Px < eps/2
    cand = np.vstack([interior, bnd, ell])
    outside = _kernels.quad_forms(cand, form.P) >= (eps / 2) * (1 - 1e-12)
    if not outside.any():
        raise CertificateError("v_lower not found: no samples on or outside x' P x = eps/2")
    v_lower = float(min(np.min(V.batch(cand[outside])), cert.level))
    if v_lower <= 0:
        raise CertificateError("v_lower not found (nonpositive)")
    cbar_in = C_bar.draw()
    cbar_bnd = C_bar.with_plan(boundary_only=True, n=max(C_bar.n_boundary, n_boundary)).draw()
    if np.any(V.batch(np.vstack([cbar_in, cbar_bnd])) >= cert.level):
        separation = 0.0
        notes.append("C_bar reaches {V >= level}: separation is zero")
    else:
        separation = _kernels.min_pair_distance(bnd, cbar_bnd)
    region = np.vstack([interior, bnd])
    grads = np.array([np.linalg.norm(V.gradient(x)) for x in region])
    sup_grad = float(np.max(grads))
    if not np.isfinite(sup_grad) or sup_grad <= 0:
        raise CertificateError("gradient of V unavailable on the region")
    grad_term = (1 - cert.rho) * v_lower / sup_grad
    return Delta4Result(v_lower, float(separation), grad_term, sup_grad, cert.rho,
                        float(min(separation, grad_term)), len(region) + len(ell), seed, notes)


# ---------------------------------------------------------------------------

@dataclass
class TotalStabilityBounds:
    delta1: float
    delta2: float
    delta3: float
    delta4: float | None
    delta: float
    safety: float
    ingredients: dict
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"delta1": self.delta1, "delta2": self.delta2, "delta3": self.delta3,
                "delta4": self.delta4, "delta": self.delta, "safety": self.safety,
                "formulas": {
                    "delta1": "sqrt(eps*(1-a)^2 / (8*lambda_max(P)*(3+a)))",
                    "delta2": "(1-a) / (2*sqrt(10+6a))",
                    "delta3": "min(delta1, delta2)",
                    "delta": "min(delta3, delta4) * safety",
                },
                "ingredients": self.ingredients, "notes": list(self.notes)}


def assemble_bounds(cert: ContractionCertificate, d4: Delta4Result | None = None,
                    safety: float = DEFAULT_SAFETY) -> TotalStabilityBounds:
    """Combine the budgets; without ``d4`` the basin claim covers only ``x' P x <= eps``."""
    if not 0 < safety <= 1:
        raise ValueError("safety factor must lie in (0, 1]")
    d1 = delta1(cert.eps, cert.a, cert.form)
    d2 = delta2(cert.a)
    d3 = min(d1, d2)
    ingredients = {"eps": cert.eps, "a": cert.a, "lambda_max_P": cert.form.lam_max}
    notes = []
    if d4 is None:
        final = d3 * safety
        notes.append("delta4 absent: basin claim limited to {x : x' P x <= eps}")
        d4_value = None
    else:
        d4_value = d4.delta4
        final = min(d3, d4_value) * safety
        ingredients.update(rho=d4.rho, v_lower=d4.v_lower, sup_gradient=d4.sup_gradient,
                           separation=d4.separation)
    return TotalStabilityBounds(d1, d2, d3, d4_value, final, safety, ingredients, notes)
