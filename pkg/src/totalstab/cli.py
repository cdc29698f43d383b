"""Command-line front end.

Every subcommand reads one JSON config, writes a JSON report (plus CSV data
where relevant) into ``--out`` and exits with 0 when all verdicts pass, 1
on a failed verdict, 2 on a config error and 3 on a numerical failure.
Reports contain no timestamps, so identical config and seed give
byte-identical output.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import (CertificateError, GlobalLyapunovCertificate, assemble_bounds, delta4,
                     validate_global_certificate)
from .dynamics import NumericalBlowUp, PlantModel, SystemMap, VectorFn, build_extended, jacobian_distance, model_distance
from .equilibrium import FixedPointError, analyze_equilibrium, uniqueness_annulus
from .expr import ExprError
from .lyapunov import (IllConditionedError, LyapunovFunction, QuadraticForm, RadialPiecewiseV,
                       StabilityError, counterexample_decrease, default_decay, find_epsilon,
                       radial_components, solve_stein, spectral_radius)
from .regulation import (ForwardingController, GeneralizedIntegrator, ResonanceError,
                         SynthesisError, controller_constants, delta_quantities, prop2_budget,
                         prop3_budget, simulate_regulation, solve_M_linear, solve_M_numeric)
from .sets import CompactSetSampler, SamplingError

log = logging.getLogger("totalstab")

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("analyze", "bounds", "equilibrium", "regulate", "counterexample", "distance")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; the message names the field."""


# ---------------------------------------------------------------------------
# config access

class Cfg:
    """Dict wrapper whose errors carry the dotted field path."""

    def __init__(self, data, path: str = ""):
        self.data = data
        self.path = path

    def _p(self, key) -> str:
        return f"{self.path}.{key}" if self.path else str(key)

    def has(self, key) -> bool:
        return isinstance(self.data, dict) and key in self.data and self.data[key] is not None

    def raw(self, key, default=...):
        if not self.has(key):
            if default is ...:
                raise ConfigError(f"{self._p(key)}: required field missing")
            return default
        return self.data[key]

    def sub(self, key, default=...) -> "Cfg":
        val = self.raw(key, default)
        if val is not None and not isinstance(val, dict):
            raise ConfigError(f"{self._p(key)}: expected an object")
        return Cfg(val if val is not None else {}, self._p(key))

    def num(self, key, default=..., positive: bool = False) -> float:
        val = self.raw(key, default)
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            raise ConfigError(f"{self._p(key)}: expected a finite number, got {val!r}")
        if positive and val <= 0:
            raise ConfigError(f"{self._p(key)}: must be positive")
        return float(val)

    def int(self, key, default=..., minimum: int = 0) -> int:
        val = self.raw(key, default)
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{self._p(key)}: expected an integer, got {val!r}")
        if val < minimum:
            raise ConfigError(f"{self._p(key)}: must be >= {minimum}")
        return val

    def strs(self, key, n: int | None = None, default=...) -> list[str]:
        val = self.raw(key, default)
        if isinstance(val, str):
            val = [val]
        if not isinstance(val, list) or not all(isinstance(s, str) for s in val):
            raise ConfigError(f"{self._p(key)}: expected a list of expression strings")
        if n is not None and len(val) != n:
            raise ConfigError(f"{self._p(key)}: expected {n} expressions, got {len(val)}")
        return val

    def array(self, key, shape=None, default=...) -> np.ndarray:
        val = self.raw(key, default)
        try:
            arr = np.asarray(val, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{self._p(key)}: expected a numeric array") from None
        if shape is not None:
            try:
                arr = arr.reshape(shape)
            except ValueError:
                raise ConfigError(f"{self._p(key)}: expected shape {shape}, got {arr.shape}") from None
        return arr


def _exprs(cfg: Cfg, key: str, build):
    try:
        return build(cfg.strs(key))
    except ExprError as e:
        raise ConfigError(f"{cfg._p(key)}: {e}") from None
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{cfg._p(key)}: {e}") from None


def _system(cfg: Cfg, key: str, dim: int) -> SystemMap:
    return _exprs(cfg, key, lambda ex: SystemMap.from_expressions(ex, dim, name=key)
                  if len(ex) == dim else _raise(f"expected {dim} expressions, got {len(ex)}"))


def _raise(msg):
    raise ValueError(msg)


def _sampler(cfg: Cfg, dim: int, n: int, n_boundary: int, seed: int) -> CompactSetSampler:
    kind = cfg.raw("kind")
    plan = dict(n=cfg.int("n", n, 1), n_boundary=cfg.int("n_boundary", n_boundary), seed=cfg.int("seed", seed))
    if kind == "ball":
        return CompactSetSampler.ball(cfg.num("radius", positive=True), dim,
                                      cfg.array("center", (dim,), None) if cfg.has("center") else None, **plan)
    if kind == "box":
        lo, hi = cfg.array("lo", (dim,)), cfg.array("hi", (dim,))
        if np.any(lo > hi):
            raise ConfigError(f"{cfg.path}: box needs lo <= hi")
        return CompactSetSampler.box(lo, hi, **plan)
    if kind == "ellipsoid":
        return CompactSetSampler.ellipsoid(cfg.array("P", (dim, dim)), cfg.num("c", positive=True), **plan)
    raise ConfigError(f"{cfg._p('kind')}: unknown set kind {kind!r} (ball, box, ellipsoid)")


# ---------------------------------------------------------------------------
# pipelines

class Run:
    def __init__(self, config: dict, args):
        self.cfg = Cfg(config)
        self.seed = args.seed if args.seed is not None else self.cfg.int("seed")
        self.samples = args.samples if args.samples is not None else self.cfg.int("samples", 4096, 1)
        self.boundary = self.cfg.int("boundary_samples", max(1, self.samples // 4), 0)
        self.safety = args.safety if args.safety is not None else self.cfg.num("safety", 0.9)
        if not 0 < self.safety <= 1:
            raise ConfigError("safety: must lie in (0, 1]")
        effective = copy.deepcopy(config)
        effective.update(seed=self.seed, samples=self.samples, safety=self.safety)
        canon = json.dumps(effective, sort_keys=True, separators=(",", ":"))
        self.config_hash = hashlib.sha256(canon.encode()).hexdigest()
        self.csv: dict[str, object] = {}

    def header(self, command: str) -> dict:
        return {"command": command, "version": __version__, "config_sha256": self.config_hash,
                "seed": self.seed, "samples": self.samples,
                "boundary_samples": self.boundary, "safety": self.safety}

    # -- nominal map and its certificate -------------------------------
    def system(self):
        s = self.cfg.sub("system")
        dim = s.int("dim", minimum=1)
        return s, dim, _system(s, "f", dim)

    def analyze(self):
        s, dim, f = self.system()
        a_cfg = self.cfg.sub("analyze", None)
        A = f.jacobian(np.zeros(dim))
        eig = np.linalg.eigvals(A)
        rho = spectral_radius(A)
        if rho >= 1:
            raise StabilityError(f"unstable linearization (spectral radius {rho:.6g})")
        a = a_cfg.num("decay", None) if a_cfg.has("decay") else default_decay(A)
        if a_cfg.has("P"):
            # user-supplied quadratic form; only the sampled LMI is checked
            if not 0 < a < 1:
                raise ConfigError(f"analyze.decay: need 0 < a < 1 (got {a})")
            try:
                P = QuadraticForm(a_cfg.array("P", (dim, dim)))
            except ValueError as e:
                raise ConfigError(f"analyze.P: {e}") from None
        else:
            if not rho ** 2 < a < 1:
                raise ConfigError(f"analyze.decay: need spectral_radius^2 < a < 1 (got {a})")
            P = solve_stein(A, a)
        cert = find_epsilon(f, P, a, a_cfg.num("r_max", 1.0, positive=True),
                            n=self.samples, n_boundary=self.boundary, seed=self.seed)
        eig_sorted = sorted(eig, key=lambda z: (round(z.real, 12), round(z.imag, 12)))
        report = {"eigenvalues": [[float(z.real), float(z.imag)] for z in eig_sorted],
                  "spectral_radius": rho, "certificate": cert.to_dict()}
        return f, cert, report

    def global_certificate(self, dim: int):
        if not self.cfg.has("global_certificate"):
            return None, None
        g = self.cfg.sub("global_certificate")
        V = _exprs(g, "V", lambda ex: LyapunovFunction.from_expression(ex[0], dim, g.num("rho")))
        if not 0 < V.rho < 1:
            raise ConfigError("global_certificate.rho: must lie in (0, 1)")
        cert = GlobalLyapunovCertificate(V, g.num("level", positive=True), g.num("r_max", positive=True))
        C_bar = _sampler(g.sub("C_bar"), dim, self.samples, self.boundary, self.seed + 11)
        return cert, C_bar

    def bounds(self):
        f, cert, report = self.analyze()
        g, C_bar = self.global_certificate(f.n)
        d4 = None
        if g is not None:
            check = validate_global_certificate(g, f, n=self.samples, n_boundary=self.boundary, seed=self.seed)
            report["global_certificate"] = check
            if not check["passed"]:
                raise CertificateError("global certificate fails on samples")
            d4 = delta4(g, C_bar, cert.form, cert.eps, n=self.samples,
                        n_boundary=self.boundary, seed=self.seed)
            report["delta4"] = d4.to_dict()
        tb = assemble_bounds(cert, d4, self.safety)
        report["bounds"] = tb.to_dict()
        return f, cert, tb, report

    # -- commands ------------------------------------------------------
    def cmd_analyze(self):
        _, _, report = self.analyze()
        return report, True

    def cmd_bounds(self):
        _, _, _, report = self.bounds()
        return report, True

    def _distances(self, f, f_hat, where):
        md = model_distance(f, f_hat, where)
        jd = jacobian_distance(f, f_hat, where)
        return md, jd

    def cmd_distance(self):
        f, cert, tb, report = self.bounds()
        s = self.cfg.sub("system")
        f_hat = _system(s, "f_hat", f.n)
        d = self.cfg.sub("distance", None)
        where = (_sampler(d.sub("set"), f.n, self.samples, self.boundary, self.seed + 5)
                 if d.has("set") else
                 CompactSetSampler.ellipsoid(cert.form.P, cert.eps, n=self.samples,
                                             n_boundary=self.boundary, seed=self.seed + 5))
        md, jd = self._distances(f, f_hat, where)
        within = md.value <= tb.delta1 and jd.value <= tb.delta2
        report["distance"] = {"model": md.to_dict(), "jacobian": jd.to_dict(), "set": where.describe(),
                              "within_delta1": md.value <= tb.delta1,
                              "within_delta2": jd.value <= tb.delta2}
        return report, bool(within)

    def cmd_equilibrium(self):
        f, cert, tb, report = self.bounds()
        s = self.cfg.sub("system")
        f_hat = _system(s, "f_hat", f.n)
        e = self.cfg.sub("equilibrium", None)
        x0 = e.array("x0", (f.n,), None) if e.has("x0") else None
        basin_seeds, steps, tol = None, 200, 1e-8
        if e.has("basin"):
            b = e.sub("basin")
            basin_seeds = _sampler(b.sub("set"), f.n, b.int("seeds", 1000, 1), 0, self.seed + 7)
            steps, tol = b.int("steps", 200), b.num("tol", 1e-8, positive=True)
        rep = analyze_equilibrium(f_hat, cert, x0=x0, n=self.samples, seed=self.seed,
                                  basin_seeds=basin_seeds, basin_steps=steps, basin_tol=tol)
        where = CompactSetSampler.ellipsoid(cert.form.P, cert.eps, n=self.samples,
                                            n_boundary=self.boundary, seed=self.seed + 5)
        md, jd = self._distances(f, f_hat, where)
        rep.distances = {"model": md.to_dict(), "jacobian": jd.to_dict(),
                         "within_delta1": md.value <= tb.delta1,
                         "within_delta2": jd.value <= tb.delta2}
        if e.has("uniqueness"):
            u = e.sub("uniqueness")
            V = LyapunovFunction.from_quadratic(cert.form, (1 + cert.a) / 2)
            rep.uniqueness = uniqueness_annulus(
                f_hat, V, u.num("c_lo", positive=True), u.num("c_hi", positive=True),
                u.num("rho_tilde"), n=self.samples, n_seeds=u.int("seeds", 1000, 1), seed=self.seed)
            rep.in_inner_level = bool(V(rep.x_e) <= u.num("c_lo"))
        report["equilibrium"] = rep.to_dict()
        if rep.basin is not None and rep.basin.worst_trajectory is not None:
            self.csv["basin_worst.csv"] = rep.basin.worst_trajectory
        return report, rep.passed

    def _plant(self, r: Cfg, key: str, q: int, m: int, p: int) -> PlantModel:
        pc = r.sub(key)
        try:
            return PlantModel.from_expressions(q, m, p, pc.strs("phi", q), pc.strs("g", q), pc.strs("h", p))
        except (ExprError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{pc.path}: {e}") from None

    def cmd_regulate(self):
        r = self.cfg.sub("regulation")
        q, m, p = r.int("q", minimum=1), r.int("m", minimum=1), r.int("p", minimum=1)
        if p > m:
            raise ConfigError("regulation: need p <= m")
        plant = self._plant(r, "plant", q, m, p)
        plant_hat = self._plant(r, "plant_hat", q, m, p) if r.has("plant_hat") else plant
        if r.has("k"):
            k = _exprs(r, "k", lambda ex: GeneralizedIntegrator.from_expressions(
                ex, q, p, r.raw("L1", "1"), r.raw("L2", "0")))
        else:
            k = GeneralizedIntegrator.standard(q, p)
        report: dict = {}
        if r.has("forwarding"):
            fw = r.sub("forwarding")
            W = QuadraticForm(fw.array("W", (q, q)))
            if fw.raw("M", "linear") == "linear":
                A = plant.phi.jacobian(np.zeros(q))
                Ck = k.fn.partial(1, np.zeros(q), np.zeros(p)) @ plant.h.partial(0, np.zeros(q), np.zeros(m)) \
                    + k.fn.partial(0, np.zeros(q), np.zeros(p))
                M = solve_M_linear(A, Ck)
                report["M"] = {"kind": "linear", "K": M.K.tolist()}
            else:
                deg = fw.int("degree", 3, 1)
                zero = np.zeros(m)
                fit = solve_M_numeric(plant.phi, lambda x: k.fn(x, plant.h(x, zero)), q, deg,
                                      CompactSetSampler.box(-np.ones(q), np.ones(q), n=256, seed=self.seed),
                                      fw.num("ridge", 1e-12))
                M = fit.M
                report["M"] = {"kind": "polynomial", **fit.to_dict()}
            ctrl = ForwardingController(plant, k, M, W, u_max=fw.num("u_max", 1e3, positive=True))
            alpha = ctrl.as_vectorfn()
            report["alpha_at_origin"] = float(alpha(np.zeros(q), np.zeros(p))[0])
        else:
            alpha = _exprs(r, "alpha", lambda ex: VectorFn.from_expressions(ex, [("x", q), ("u", p)]))
            if alpha.n_out != m:
                raise ConfigError(f"regulation.alpha: expected {m} expressions")
        ext = build_extended(plant, k, alpha)
        ext_hat = build_extended(plant_hat, k, alpha)
        n = q + p
        s_cfg = r.sub("set", None)
        region = (_sampler(s_cfg, n, min(self.samples, 512), 0, self.seed + 3) if r.has("set")
                  else CompactSetSampler.box(-np.ones(n), np.ones(n), n=min(self.samples, 512), seed=self.seed + 3))
        deltas = delta_quantities(plant, plant_hat, alpha, k, region)
        consts = controller_constants(alpha, k, region)
        report.update(deltas=deltas.to_dict(), constants=consts.to_dict(),
                      linearization_spectral_radius=spectral_radius(ext.system.jacobian(np.zeros(n))))
        if r.has("budget"):
            bcfg = r.sub("budget")
            d3 = bcfg.num("delta3", positive=True)
            d4 = bcfg.num("delta4", None) if bcfg.has("delta4") else None
            budget = prop3_budget(d3, d4, consts.L_alpha, consts.L_k, consts.L, self.safety)
            report["budget"] = budget.to_dict()
            report["existence_budget"] = prop2_budget(min(d3, d4) if d4 is not None else d3, consts.L)
            worst = max(deltas["xi"].value + deltas["y"].value,
                        deltas["d_xi"].value + deltas["d_u"].value + deltas["d_y"].value)
            report["within_budget"] = bool(worst <= budget.delta_bar)
        x0 = r.array("x0", (n,), [0.0] * n)
        verdict = simulate_regulation(ext_hat, x0, r.int("steps", 400, 1), r.num("y_tol", 1e-8, positive=True))
        report["simulation"] = verdict.to_dict()
        self.csv["trajectory.csv"] = verdict.trajectory
        return report, verdict.passed

    def cmd_counterexample(self):
        c = self.cfg.sub("counterexample", None)
        dim = c.int("dim", 2, 1)
        r_max = c.num("r_max", 4.0, positive=True)
        grid = c.int("grid", 2 ** 17 + 1, 3)
        levels = [float(v) for v in c.raw("levels", [])]
        V = RadialPiecewiseV()
        npts = c.int("profile_points", 1025, 2)
        r = r_max * np.arange(npts) / (npts - 1)
        self.csv["profile.csv"] = ("r,V", np.column_stack([r, V.profile(r)]))
        intervals = [radial_components(V, lv, r_max, grid=grid, dim=dim, seed=self.seed).to_dict()
                     for lv in levels]
        shells = c.int("shells", 8, 1)
        per = c.int("per_shell", 64, 1)
        table, all_hold = [], True
        for i in range(-shells, shells):
            base = 2.0 ** i
            worst = {1: -math.inf, 2: -math.inf}
            holds = True
            for t in np.arange(per) / per:
                chk = counterexample_decrease(np.array([base * (1 + t)] + [0.0] * (dim - 1)))
                worst[chk.branch] = max(worst[chk.branch], chk.decrease - chk.bound)
                holds &= chk.holds
            all_hold &= holds
            table.append({"shell": i, "max_gap_branch1": worst[1], "max_gap_branch2": worst[2],
                          "holds": bool(holds)})
        disconnected = all(not iv["path_connected"] for iv in intervals)
        return {"levels": intervals, "decrease_table": table, "dim": dim, "r_max": r_max,
                "grid": grid}, bool(all_hold and disconnected)


# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def write_report(path: Path, report: dict) -> None:
    path.write_text(json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n")


def _write_csvs(out: Path, csvs: dict) -> None:
    for name, item in csvs.items():
        if isinstance(item, tuple):
            header, table = item
            with open(out / name, "w", newline="") as fh:
                fh.write(header + "\n")
                for row in table:
                    fh.write(",".join(repr(float(v)) for v in row) + "\n")
        else:
            item.to_csv(out / name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="totalstab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path, help="JSON configuration file")
        sp.add_argument("--out", type=Path, default=Path("."), help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--samples", type=int, help="override the sample count")
        sp.add_argument("--safety", type=float, help="override the safety factor")
        sp.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        text = args.config.read_text()
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = json.loads(text)
    except json.JSONDecodeError as e:
        print(f"config error: {args.config}:{e.lineno}:{e.colno}: {e.msg}", file=sys.stderr)
        return EXIT_CONFIG
    if not isinstance(config, dict):
        print("config error: top level must be an object", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        run = Run(config, args)
        header = run.header(args.command)
        log.info("running %s (seed=%d, samples=%d)", args.command, run.seed, run.samples)
        result, passed = getattr(run, f"cmd_{args.command}")()
        code = EXIT_OK if passed else EXIT_VERDICT
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StabilityError, CertificateError) as e:
        result, passed, code = {"error": f"{type(e).__name__}: {e}"}, False, EXIT_VERDICT
        header = run.header(args.command)
    except (IllConditionedError, FixedPointError, NumericalBlowUp, SynthesisError,
            ResonanceError, SamplingError, ArithmeticError, np.linalg.LinAlgError) as e:
        result, passed, code = {"error": f"{type(e).__name__}: {e}"}, False, EXIT_NUMERIC
        header = run.header(args.command)
    report = {**header, "passed": bool(passed), "result": result}
    write_report(out / f"{args.command}.json", report)
    _write_csvs(out, run.csv)
    log.info("wrote %s", out / f"{args.command}.json")
    print(f"{args.command}: {'pass' if passed else 'fail'} -> {out / (args.command + '.json')}")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
