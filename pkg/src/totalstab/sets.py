"""Compact sets and deterministic samplers over them.

Every sampler is a pure description plus a sampling plan (count, seed,
boundary handling); ``draw`` always returns the same points for the same
description.  Sampled suprema computed from these points are lower
estimates of the true suprema.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import _kernels

__all__ = ["CompactSetSampler", "SamplingError", "unit_directions", "batch_eval",
           "radial_boundary"]

BOUNDARY_TOL = 1e-10


class SamplingError(RuntimeError):
    pass


def unit_directions(n_dirs: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random unit vectors, shape ``(n_dirs, dim)``."""
    if dim == 1:
        return rng.choice([-1.0, 1.0], size=(n_dirs, 1))
    d = rng.standard_normal((n_dirs, dim))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return d / norms


def batch_eval(V: Callable, X: np.ndarray) -> np.ndarray:
    """Evaluate a scalar function on each row of ``X``."""
    batch = getattr(V, "batch", None)
    if batch is not None:
        return np.asarray(batch(X), dtype=float).reshape(len(X))
    return np.array([float(V(x)) for x in X])


def radial_boundary(V: Callable, c: float, directions: np.ndarray, r_max: float,
                    scan: int = 256, tol: float = BOUNDARY_TOL):
    """Locate ``V = c`` along rays from the origin by scan plus bisection.

    Returns ``(points, radii, multi_root)``.  ``radii`` is NaN for directions
    where ``V`` stays at or below ``c`` up to ``r_max``; ``multi_root`` flags
    directions where ``V`` drops back below ``c`` after the first crossing,
    i.e. where the sublevel set is not star-shaped.
    """
    directions = np.atleast_2d(directions)
    m, dim = directions.shape
    t = np.linspace(0.0, r_max, scan + 1)
    pts = (t[None, :, None] * directions[:, None, :]).reshape(-1, dim)
    vals = batch_eval(V, pts).reshape(m, scan + 1)
    above = vals > c
    first = np.where(above.any(axis=1), above.argmax(axis=1), -1)
    radii = np.full(m, np.nan)
    multi = np.zeros(m, dtype=bool)
    for i in range(m):
        k = first[i]
        if k <= 0:
            continue
        multi[i] = bool(np.any(~above[i, k:]))
        lo, hi = t[k - 1], t[k]
        d = directions[i]
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            v = float(V(mid * d))
            if abs(v - c) <= tol or hi - lo <= 1e-15 * max(1.0, hi):
                lo = hi = mid
                break
            if v > c:
                hi = mid
            else:
                lo = mid
        radii[i] = 0.5 * (lo + hi)
    points = radii[:, None] * directions
    return points, radii, multi


@dataclass(frozen=True)
class CompactSetSampler:
    """A compact set with a deterministic sampling plan.

    Kinds and their ``params``:

    ``ball``       radius, center
    ``box``        lo, hi
    ``ellipsoid``  P, c, center   (set x' P x <= c around center)
    ``annulus``    P, c_lo, c_hi  (c_lo <= x' P x <= c_hi)
    ``sublevel``   V, c_lo, c_hi, r_max  (c_lo <= V(x) <= c_hi, generic V,
                   found by rejection from the ball of radius r_max)

    ``draw`` returns ``n`` interior points followed by ``n_boundary``
    boundary points, or only ``n`` boundary points if ``boundary_only``.
    """

    kind: str
    dim: int
    params: dict = field(default_factory=dict, compare=False)
    n: int = 1024
    seed: int = 0
    n_boundary: int = 0
    boundary_only: bool = False

    # -- constructors --------------------------------------------------
    @classmethod
    def ball(cls, radius: float, dim: int, center=None, **plan) -> "CompactSetSampler":
        center = np.zeros(dim) if center is None else np.asarray(center, float)
        return cls("ball", dim, {"radius": float(radius), "center": center}, **plan)

    @classmethod
    def box(cls, lo, hi, **plan) -> "CompactSetSampler":
        lo, hi = np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box needs lo <= hi with matching shapes")
        return cls("box", lo.size, {"lo": lo, "hi": hi}, **plan)

    @classmethod
    def ellipsoid(cls, P, c: float, center=None, **plan) -> "CompactSetSampler":
        P = np.atleast_2d(np.asarray(P, float))
        dim = P.shape[0]
        center = np.zeros(dim) if center is None else np.asarray(center, float)
        return cls("ellipsoid", dim, {"P": P, "c": float(c), "center": center}, **plan)

    @classmethod
    def annulus(cls, P, c_lo: float, c_hi: float, **plan) -> "CompactSetSampler":
        P = np.atleast_2d(np.asarray(P, float))
        if not 0 <= c_lo <= c_hi:
            raise ValueError("annulus needs 0 <= c_lo <= c_hi")
        return cls("annulus", P.shape[0], {"P": P, "c_lo": float(c_lo), "c_hi": float(c_hi)}, **plan)

    @classmethod
    def sublevel(cls, V: Callable, dim: int, c_hi: float, r_max: float, c_lo: float = 0.0,
                 **plan) -> "CompactSetSampler":
        return cls("sublevel", dim, {"V": V, "c_lo": float(c_lo), "c_hi": float(c_hi),
                                     "r_max": float(r_max)}, **plan)

    def with_plan(self, **changes) -> "CompactSetSampler":
        return replace(self, **changes)

    # -- geometry ------------------------------------------------------
    def describe(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim, "n": self.n, "seed": self.seed,
               "n_boundary": self.n_boundary, "boundary_only": self.boundary_only}
        for k, v in self.params.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
            elif isinstance(v, (int, float)):
                out[k] = v
        return out

    def contains(self, X, tol: float = 1e-9) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        p = self.params
        if self.kind == "ball":
            return np.linalg.norm(X - p["center"], axis=1) <= p["radius"] * (1 + tol) + tol
        if self.kind == "box":
            return np.all((X >= p["lo"] - tol) & (X <= p["hi"] + tol), axis=1)
        if self.kind == "ellipsoid":
            q = _kernels.quad_forms(X - p["center"], p["P"])
            return q <= p["c"] * (1 + tol) + tol
        if self.kind == "annulus":
            q = _kernels.quad_forms(X, p["P"])
            return (q >= p["c_lo"] * (1 - tol) - tol) & (q <= p["c_hi"] * (1 + tol) + tol)
        v = batch_eval(p["V"], X)
        return (v >= p["c_lo"] - tol) & (v <= p["c_hi"] + tol)

    def draw(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        if self.boundary_only:
            return self._boundary(self.n, rng)
        interior = self._interior(self.n, rng)
        if self.n_boundary:
            return np.vstack([interior, self._boundary(self.n_boundary, rng)])
        return interior

    def _interior(self, n: int, rng) -> np.ndarray:
        p, dim = self.params, self.dim
        if self.kind == "ball":
            d = unit_directions(n, dim, rng)
            r = p["radius"] * rng.random(n) ** (1.0 / dim)
            return p["center"] + r[:, None] * d
        if self.kind == "box":
            return p["lo"] + (p["hi"] - p["lo"]) * rng.random((n, dim))
        if self.kind == "ellipsoid":
            d = unit_directions(n, dim, rng)
            r = rng.random(n) ** (1.0 / dim)
            return p["center"] + _ellipsoid_map(p["P"], p["c"], r[:, None] * d)
        if self.kind == "annulus":
            d = unit_directions(n, dim, rng)
            lo, hi = p["c_lo"] ** (dim / 2), p["c_hi"] ** (dim / 2)
            level = (lo + (hi - lo) * rng.random(n)) ** (2.0 / dim)
            return _ellipsoid_map(p["P"], 1.0, np.sqrt(level)[:, None] * d)
        return self._rejection(n, rng)

    def _rejection(self, n: int, rng) -> np.ndarray:
        p, dim = self.params, self.dim
        out: list[np.ndarray] = []
        got = 0
        for _ in range(200):
            d = unit_directions(4 * n, dim, rng)
            r = p["r_max"] * rng.random(4 * n) ** (1.0 / dim)
            cand = r[:, None] * d
            v = batch_eval(p["V"], cand)
            keep = cand[(v >= p["c_lo"]) & (v <= p["c_hi"])]
            out.append(keep)
            got += len(keep)
            if got >= n:
                return np.vstack(out)[:n]
        raise SamplingError(f"rejection sampling accepted {got} of {n} points; "
                            "check r_max and the levels")

    def _boundary(self, n: int, rng) -> np.ndarray:
        p, dim = self.params, self.dim
        if n == 0:
            return np.empty((0, dim))
        if self.kind == "ball":
            return p["center"] + p["radius"] * unit_directions(n, dim, rng)
        if self.kind == "box":
            X = p["lo"] + (p["hi"] - p["lo"]) * rng.random((n, dim))
            axis = rng.integers(0, dim, n)
            side = rng.integers(0, 2, n)
            rows = np.arange(n)
            X[rows, axis] = np.where(side == 1, p["hi"][axis], p["lo"][axis])
            return X
        if self.kind == "ellipsoid":
            return p["center"] + _ellipsoid_map(p["P"], p["c"], unit_directions(n, dim, rng))
        if self.kind == "annulus":
            n_in = n // 2
            inner = _ellipsoid_map(p["P"], p["c_lo"], unit_directions(n_in, dim, rng))
            outer = _ellipsoid_map(p["P"], p["c_hi"], unit_directions(n - n_in, dim, rng))
            return np.vstack([inner, outer])
        # generic sublevel: radial roots of V = c on the outer (and inner) level
        parts = []
        levels = [p["c_hi"]] if p["c_lo"] <= 0 else [p["c_lo"], p["c_hi"]]
        per = -(-n // len(levels))
        for c in levels:
            pts, radii, _ = radial_boundary(p["V"], c, unit_directions(per, dim, rng), p["r_max"])
            parts.append(pts[np.isfinite(radii)])
        return np.vstack(parts)[:n]


def _ellipsoid_map(P: np.ndarray, c: float, Y: np.ndarray) -> np.ndarray:
    """Map points of the unit ball onto ``{x' P x <= c}`` (|y| = 1 to the boundary)."""
    L = np.linalg.cholesky(P)
    # x = sqrt(c) L^{-T} y  =>  x' P x = c |y|^2
    return np.sqrt(c) * np.linalg.solve(L.T, Y.T).T
