"""Discrete-time maps, the integrator-extended closed loop, and sampled distances."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .expr import CompiledMap, compile_map, default_variables
from .sets import CompactSetSampler

__all__ = [
    "NumericalBlowUp", "C1RegionWarning", "SystemMap", "VectorFn", "PlantModel",
    "ExtendedSystem", "Trajectory", "SampledSup", "step", "simulate", "jacobian",
    "fd_jacobian", "build_extended", "model_distance", "jacobian_distance",
    "check_plant",
]

BLOWUP = 1e12


class NumericalBlowUp(ArithmeticError):
    pass


class C1RegionWarning(UserWarning):
    pass


def fd_jacobian(func: Callable, x: np.ndarray, n_out: int | None = None) -> np.ndarray:
    """Central differences with step ``1e-6 * max(1, |x|)``."""
    x = np.asarray(x, dtype=float)
    h = 1e-6 * max(1.0, float(np.linalg.norm(x)))
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(func(x + e), float) - np.asarray(func(x - e), float)) / (2 * h))
    J = np.column_stack(cols) if cols else np.zeros((n_out or 0, 0))
    return J.reshape(-1, x.size)


@dataclass
class SystemMap:
    """A map ``x -> f(x)`` on ``R^n`` with Jacobian access.

    Build with :meth:`from_expressions` for analytic Jacobians or
    :meth:`from_callable` (finite-difference Jacobian unless ``jac`` is
    given).  ``c1_region`` is an optional predicate on an ``(N, n)`` array
    describing where ``f`` is known to be C^1.
    """

    n: int
    func: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray] | None = None
    c1_region: Callable[[np.ndarray], np.ndarray] | None = None
    batch_func: Callable[[np.ndarray], np.ndarray] | None = None
    batch_jac: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "f"

    @classmethod
    def from_expressions(cls, exprs: Sequence, n: int | None = None, **kw) -> "SystemMap":
        n = len(exprs) if n is None else n
        cm = exprs if isinstance(exprs, CompiledMap) else compile_map(list(exprs), n, n)
        if cm.n_in != cm.n_out:
            raise ValueError("system map must be square")
        return cls(cm.n_in, cm, cm.jacobian, batch_func=cm.batch, batch_jac=cm.batch_jacobian, **kw)

    @classmethod
    def from_callable(cls, func: Callable, n: int, jac: Callable | None = None, **kw) -> "SystemMap":
        return cls(n, func, jac, **kw)

    @classmethod
    def linear(cls, A, b=None, **kw) -> "SystemMap":
        A = np.atleast_2d(np.asarray(A, float))
        b = np.zeros(A.shape[0]) if b is None else np.asarray(b, float).reshape(-1)
        return cls(A.shape[0], lambda x: A @ np.asarray(x, float).reshape(-1) + b, lambda x: A.copy(),
                   batch_func=lambda X: np.atleast_2d(X) @ A.T + b,
                   batch_jac=lambda X: np.broadcast_to(A, (len(X),) + A.shape).copy(), **kw)

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.func(np.asarray(x, float).reshape(self.n)), float).reshape(self.n)

    def jacobian(self, x) -> np.ndarray:
        x = np.asarray(x, float).reshape(self.n)
        if self.c1_region is not None and not bool(self.c1_region(x[None, :])[0]):
            warnings.warn(f"{self.name}: Jacobian requested outside the declared C1 region",
                          C1RegionWarning, stacklevel=2)
        if self.jac is not None:
            return np.asarray(self.jac(x), float).reshape(self.n, self.n)
        return fd_jacobian(self.__call__, x)

    def batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        if self.batch_func is not None:
            return np.asarray(self.batch_func(X), float).reshape(len(X), self.n)
        return np.array([self(x) for x in X]).reshape(len(X), self.n)

    def batch_jacobian(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        if self.batch_jac is not None:
            return np.asarray(self.batch_jac(X), float).reshape(len(X), self.n, self.n)
        if self.jac is not None:
            return np.array([self.jac(x) for x in X]).reshape(len(X), self.n, self.n)
        return np.array([fd_jacobian(self.__call__, x) for x in X]).reshape(len(X), self.n, self.n)

    def in_c1(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        if self.c1_region is None:
            return np.ones(len(X), dtype=bool)
        return np.asarray(self.c1_region(X), dtype=bool)


@dataclass
class Trajectory:
    states: np.ndarray
    outputs: np.ndarray | None = None
    blew_up: bool = False

    def __len__(self) -> int:
        return len(self.states)

    def to_csv(self, path, prefix: str = "x") -> None:
        n = self.states.shape[1]
        cols = ["k"] + [f"{prefix}{i + 1}" for i in range(n)]
        data = [np.arange(len(self.states))[:, None], self.states]
        if self.outputs is not None:
            cols += [f"y{i + 1}" for i in range(self.outputs.shape[1])]
            data.append(self.outputs)
        table = np.hstack(data)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for row in table:
                fh.write(str(int(row[0])) + "," + ",".join(repr(float(v)) for v in row[1:]) + "\n")


def step(sys: SystemMap, x) -> np.ndarray:
    """One step ``x -> f(x)``; raises :class:`NumericalBlowUp` on non-finite output."""
    out = sys(x)
    if not np.all(np.isfinite(out)):
        raise NumericalBlowUp(f"{sys.name} produced a non-finite value")
    return out


def simulate(sys: SystemMap, x0, N: int, output: Callable | None = None) -> Trajectory:
    """Iterate ``sys`` for ``N`` steps from ``x0``.

    Stops early, with ``blew_up`` set, once a state is non-finite or its
    norm exceeds 1e12.
    """
    if N < 0:
        raise ValueError("N must be nonnegative")
    x = np.asarray(x0, float).reshape(sys.n)
    states = [x]
    blew_up = False
    for _ in range(N):
        x = sys(x)
        states.append(x)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > BLOWUP:
            blew_up = True
            break
    states = np.array(states)
    outputs = None
    if output is not None:
        outputs = np.array([np.atleast_1d(output(s)) for s in states])
    return Trajectory(states, outputs, blew_up)


def jacobian(sys: SystemMap, x) -> np.ndarray:
    return sys.jacobian(x)


# ---------------------------------------------------------------------------
# multi-argument maps for plant components

class VectorFn:
    """A map of several vector arguments, e.g. ``g(xi, u)``.

    Arguments are concatenated in order.  ``partial(i, *args)`` is the
    Jacobian block with respect to argument ``i``.
    """

    def __init__(self, func: Callable, arg_dims: Sequence[int], n_out: int,
                 jac: Callable | None = None):
        self.func = func
        self.arg_dims = tuple(int(d) for d in arg_dims)
        self.n_out = int(n_out)
        self._jac = jac
        self._offsets = np.cumsum((0,) + self.arg_dims)

    @classmethod
    def from_expressions(cls, exprs: Sequence[str], arg_specs: Sequence[tuple[str, int]]) -> "VectorFn":
        """``arg_specs`` such as ``[("x", q), ("u", m)]`` name the variable families."""
        variables = [v for prefix, d in arg_specs for v in default_variables(d, prefix)]
        cm = compile_map(list(exprs), len(variables), len(exprs), variables)
        fn = cls(cm, [d for _, d in arg_specs], cm.n_out, cm.jacobian)
        fn.compiled = cm
        return fn

    @classmethod
    def linear(cls, mats: Sequence, const=None) -> "VectorFn":
        mats = [np.atleast_2d(np.asarray(M, float)) for M in mats]
        full = np.hstack(mats)
        c = np.zeros(full.shape[0]) if const is None else np.asarray(const, float).reshape(-1)
        return cls(lambda v: full @ v + c, [M.shape[1] for M in mats], full.shape[0],
                   lambda v: full.copy())

    def _cat(self, args) -> np.ndarray:
        if len(args) != len(self.arg_dims):
            raise ValueError(f"expected {len(self.arg_dims)} arguments, got {len(args)}")
        parts = [np.asarray(a, float).reshape(d) for a, d in zip(args, self.arg_dims)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def __call__(self, *args) -> np.ndarray:
        return np.asarray(self.func(self._cat(args)), float).reshape(self.n_out)

    def jacobian(self, *args) -> np.ndarray:
        v = self._cat(args)
        if self._jac is not None:
            return np.asarray(self._jac(v), float).reshape(self.n_out, v.size)
        return fd_jacobian(lambda w: np.asarray(self.func(w), float), v).reshape(self.n_out, v.size)

    def partial(self, i: int, *args) -> np.ndarray:
        J = self.jacobian(*args)
        return J[:, self._offsets[i]:self._offsets[i + 1]]


@dataclass
class PlantModel:
    """Plant ``xi+ = phi(xi) + g(xi, u)``, output ``y = h(xi, u)``.

    The nominal output ignores ``u``; perturbed models may not.
    """

    q: int
    m: int
    p: int
    phi: VectorFn
    g: VectorFn
    h: VectorFn

    def __post_init__(self):
        if self.p > self.m:
            raise ValueError(f"need p <= m (got p={self.p}, m={self.m})")
        if self.phi.arg_dims != (self.q,) or self.phi.n_out != self.q:
            raise ValueError("phi must map R^q -> R^q")
        if self.g.arg_dims != (self.q, self.m) or self.g.n_out != self.q:
            raise ValueError("g must map R^q x R^m -> R^q")
        if self.h.arg_dims != (self.q, self.m) or self.h.n_out != self.p:
            raise ValueError("h must map R^q x R^m -> R^p")

    @classmethod
    def from_expressions(cls, q: int, m: int, p: int, phi, g, h) -> "PlantModel":
        return cls(q, m, p,
                   VectorFn.from_expressions(phi, [("x", q)]),
                   VectorFn.from_expressions(g, [("x", q), ("u", m)]),
                   VectorFn.from_expressions(h, [("x", q), ("u", m)]))


def check_plant(plant: PlantModel, sampler: CompactSetSampler, tol: float = 1e-12) -> dict:
    """Sampled check of ``h(0) = 0`` and ``g(xi, 0) = 0``."""
    zero_u = np.zeros(plant.m)
    h0 = float(np.linalg.norm(plant.h(np.zeros(plant.q), zero_u)))
    g0 = max((float(np.linalg.norm(plant.g(xi, zero_u))) for xi in sampler.draw()), default=0.0)
    return {"h_at_origin": h0, "max_g_at_zero_input": g0, "passed": h0 <= tol and g0 <= tol}


@dataclass
class ExtendedSystem:
    """Closed loop on ``x = (xi, z)`` under ``u = alpha(xi, z)``.

    ``xi+ = phi(xi) + g(xi, u)``, ``z+ = z + k(xi, h(xi, u))``.
    """

    plant: PlantModel
    k: VectorFn
    alpha: VectorFn
    system: SystemMap = field(init=False)

    def __post_init__(self):
        q, p = self.plant.q, self.plant.p
        self.system = SystemMap(q + p, self._step, self._jacobian, name="closed loop")

    def split(self, x):
        x = np.asarray(x, float).reshape(self.plant.q + self.plant.p)
        return x[:self.plant.q], x[self.plant.q:]

    def control(self, x) -> np.ndarray:
        xi, z = self.split(x)
        return self.alpha(xi, z)

    def output(self, x) -> np.ndarray:
        xi, z = self.split(x)
        return self.plant.h(xi, self.alpha(xi, z))

    def _step(self, x) -> np.ndarray:
        P = self.plant
        xi, z = self.split(x)
        u = self.alpha(xi, z)
        y = P.h(xi, u)
        return np.concatenate([P.phi(xi) + P.g(xi, u), z + self.k(xi, y)])

    def _jacobian(self, x) -> np.ndarray:
        P = self.plant
        xi, z = self.split(x)
        u = self.alpha(xi, z)
        y = P.h(xi, u)
        a_xi, a_z = self.alpha.partial(0, xi, z), self.alpha.partial(1, xi, z)
        g_xi, g_u = P.g.partial(0, xi, u), P.g.partial(1, xi, u)
        h_xi, h_u = P.h.partial(0, xi, u), P.h.partial(1, xi, u)
        k_xi, k_y = self.k.partial(0, xi, y), self.k.partial(1, xi, y)
        top = np.hstack([P.phi.jacobian(xi) + g_xi + g_u @ a_xi, g_u @ a_z])
        bottom = np.hstack([k_xi + k_y @ (h_xi + h_u @ a_xi), np.eye(P.p) + k_y @ h_u @ a_z])
        return np.vstack([top, bottom])


def build_extended(plant: PlantModel, k, alpha: VectorFn) -> ExtendedSystem:
    """Close the loop of ``plant`` with integrator ``k`` and controller ``alpha``.

    ``k`` may be a :class:`VectorFn` on ``(xi, y)`` or any object exposing
    one as ``.fn``.
    """
    k = getattr(k, "fn", k)
    q, m, p = plant.q, plant.m, plant.p
    if p > m:
        raise ValueError(f"need p <= m (got p={p}, m={m})")
    if k.arg_dims != (q, p) or k.n_out != p:
        raise ValueError(f"integrator must map R^{q} x R^{p} -> R^{p}")
    if alpha.arg_dims != (q, p) or alpha.n_out != m:
        raise ValueError(f"controller must map R^{q} x R^{p} -> R^{m}")
    return ExtendedSystem(plant, k, alpha)


# ---------------------------------------------------------------------------
# sampled distances

@dataclass
class SampledSup:
    """A supremum estimated as a maximum over samples."""

    value: float
    witness: np.ndarray | None
    n: int
    seed: int | None

    @property
    def label(self) -> str:
        return f"sampled (N={self.n}, seed={self.seed})"

    def to_dict(self) -> dict:
        return {"value": self.value,
                "witness": None if self.witness is None else np.asarray(self.witness).tolist(),
                "estimate": self.label}


def _points(where) -> tuple[np.ndarray, int | None]:
    if isinstance(where, CompactSetSampler):
        return where.draw(), where.seed
    return np.atleast_2d(np.asarray(where, float)), None


def _sup(values: np.ndarray, X: np.ndarray, seed) -> SampledSup:
    if len(values) == 0:
        return SampledSup(0.0, None, 0, seed)
    i = int(np.argmax(values))
    return SampledSup(float(values[i]), X[i].copy(), len(values), seed)


def model_distance(f: SystemMap, f_hat: SystemMap, where) -> SampledSup:
    """Max over samples of ``|f_hat(x) - f(x)|``."""
    if f.n != f_hat.n:
        raise ValueError("maps have different dimensions")
    X, seed = _points(where)
    d = np.linalg.norm(f_hat.batch(X) - f.batch(X), axis=1)
    return _sup(d, X, seed)


def jacobian_distance(f: SystemMap, f_hat: SystemMap, where) -> SampledSup:
    """Max over samples of the spectral norm of the Jacobian difference."""
    if f.n != f_hat.n:
        raise ValueError("maps have different dimensions")
    X, seed = _points(where)
    D = f_hat.batch_jacobian(X) - f.batch_jacobian(X)
    return _sup(_kernels.spectral_norms(D), X, seed)
