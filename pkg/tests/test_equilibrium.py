import math

import numpy as np
import pytest

from totalstab.bounds import delta1, delta2
from totalstab.dynamics import SystemMap, jacobian_distance, model_distance, simulate
from totalstab.equilibrium import (FixedPointError, analyze_equilibrium, basin_check,
                                   find_fixed_point, uniqueness_annulus, verify_invariance,
                                   verify_local_contraction)
from totalstab.lyapunov import ContractionCertificate, LyapunovFunction, QuadraticForm
from totalstab.sets import CompactSetSampler

ONE = np.eye(1)


def affine(expr):
    return SystemMap.from_expressions([expr])


class TestFixedPoint:
    def test_affine(self):
        x = find_fixed_point(affine("0.5*x1 + 0.01"), [0.0])
        assert x[0] == pytest.approx(0.02, abs=1e-12)

    def test_origin(self):
        assert find_fixed_point(affine("0.5*x1"), [1.0])[0] == pytest.approx(0.0, abs=1e-10)

    def test_translation_has_none(self):
        with pytest.raises(FixedPointError):
            find_fixed_point(affine("x1 + 1"), [0.0])

    def test_linear_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(1, 6))
            A = rng.normal(size=(n, n))
            A *= 0.9 / max(abs(np.linalg.eigvals(A)))
            b = rng.normal(size=n)
            x = find_fixed_point(SystemMap.linear(A, b), np.zeros(n))
            np.testing.assert_allclose(x, np.linalg.solve(np.eye(n) - A, b), atol=1e-9)

    def test_rerun_is_stationary(self):
        f = SystemMap.from_expressions(["0.4*x1 + 0.1*sin(x2) + 0.03", "0.2*x1^2 - 0.3*x2 + 0.01"])
        x = find_fixed_point(f, [0.5, 0.5])
        assert np.linalg.norm(f(x) - x) <= 1e-10
        np.testing.assert_allclose(find_fixed_point(f, x), x, atol=1e-14)

    def test_picard_fallback(self):
        # the reported Jacobian makes the Newton matrix singular
        g = SystemMap.from_callable(lambda x: np.array([0.5 * x[0] + 0.1]), 1,
                                    jac=lambda x: np.array([[1.0]]))
        assert find_fixed_point(g, [0.0])[0] == pytest.approx(0.2, abs=1e-9)


class TestInvariance:
    def test_small_shift(self):
        r = verify_invariance(affine("0.5*x1 + 0.1"), ONE, 1.0)
        s = math.sqrt(0.5)
        oracle = max((0.5 * s + 0.1) ** 2, (-0.5 * s + 0.1) ** 2) / 0.5
        assert r.passed
        assert r.worst_ratio == pytest.approx(oracle, abs=1e-12)
        assert r.witness[0] == pytest.approx(s)

    def test_nominal(self):
        r = verify_invariance(affine("0.5*x1"), ONE, 1.0)
        assert r.passed and r.worst_ratio == pytest.approx(0.25, abs=1e-12)

    def test_large_shift_fails(self):
        r = verify_invariance(affine("0.5*x1 + 0.5"), ONE, 1.0)
        assert not r.passed
        assert r.worst_ratio == pytest.approx((0.5 * math.sqrt(0.5) + 0.5) ** 2 / 0.5, abs=1e-12)
        assert r.witness[0] == pytest.approx(math.sqrt(0.5))


class TestContraction:
    def test_shifted(self):
        r = verify_local_contraction(affine("0.5*x1 + 0.01"), [0.02], ONE, 0.25, 1.0)
        assert r.passed and r.worst_ratio == pytest.approx(0.25, abs=1e-12)
        assert r.bound == 0.8125

    def test_weak(self):
        r = verify_local_contraction(affine("0.95*x1"), [0.0], ONE, 0.25, 1.0)
        assert not r.passed and r.worst_ratio == pytest.approx(0.9025, abs=1e-12)
        assert r.spectral_radius == pytest.approx(0.95)


class TestUniqueness:
    V = LyapunovFunction.from_quadratic(ONE, 0.25)

    def test_affine_unique(self):
        r = uniqueness_annulus(affine("0.5*x1 + 0.01"), self.V, 0.25, 1.0, 0.5, n_seeds=200)
        assert r.passed
        assert len(r.fixed_points) == 1 and r.fixed_points[0][0] == pytest.approx(0.02)

    def test_planted_root(self):
        r = uniqueness_annulus(affine("x1 - (x1^2 - 0.49)"), self.V, 0.25, 1.0, 0.5, n_seeds=200)
        assert not r.passed
        assert r.decrease_witness is not None
        assert any(abs(p[0] - 0.7) < 1e-8 for p in r.outside_inner)

    def test_empty_annulus(self):
        r = uniqueness_annulus(affine("x1 + 1"), self.V, 1.0, 1.0, 0.5)
        assert r.passed and r.vacuous


class TestBasin:
    def test_contractive(self):
        seeds = CompactSetSampler.box([-1.0], [1.0], n=500, n_boundary=2, seed=1)
        r = basin_check(affine("0.5*x1 + 0.01"), [0.02], seeds, 100)
        assert r.fraction == 1.0

    def test_expansive(self):
        seeds = np.array([[0.0], [0.3], [-0.7], [1.0]])
        r = basin_check(affine("2*x1"), [0.0], seeds, 50)
        assert r.fraction == 0.25 and r.n_converged == 1

    def test_zero_steps(self):
        seeds = np.array([[0.0], [1e-9], [0.5]])
        assert basin_check(affine("0.5*x1"), [0.0], seeds, 0).fraction == pytest.approx(2 / 3)


def random_perturbation(rng, d1, d2):
    """``0.5 x + c0 + c1 sin(w x + phase)`` inside the value and Jacobian budgets."""
    w = rng.uniform(1, 5)
    c1 = rng.uniform(-1, 1) * min(d2 / w, d1)
    c0 = rng.uniform(-1, 1) * (d1 - abs(c1))
    return affine(f"0.5*x1 + {c0!r} + {c1!r}*sin({w!r}*x1 + {rng.uniform(0, 6)!r})")


class TestTransfer:
    f = affine("0.5*x1")
    cert = ContractionCertificate(QuadraticForm(ONE), 0.25, 1.0, -0.2, 1, 0)

    def test_random_family(self):
        rng = np.random.default_rng(11)
        d1, d2 = 0.9 * delta1(1.0, 0.25, ONE), 0.9 * delta2(0.25)
        region = CompactSetSampler.ball(1.0, 1, n=2000, n_boundary=2, seed=5)
        seeds = CompactSetSampler.box([-1.0], [1.0], n=300, n_boundary=2, seed=6)
        for _ in range(20):
            fh = random_perturbation(rng, d1, d2)
            assert model_distance(self.f, fh, region).value <= d1
            assert jacobian_distance(self.f, fh, region).value <= d2
            rep = analyze_equilibrium(fh, self.cert, n=1000, basin_seeds=seeds, basin_steps=100)
            assert rep.in_half_eps and rep.invariance.passed and rep.contraction.passed
            assert rep.basin.fraction == 1.0
            assert rep.passed

    def test_monotone_after_entry(self):
        rng = np.random.default_rng(3)
        d1, d2 = 0.9 * delta1(1.0, 0.25, ONE), 0.9 * delta2(0.25)
        for _ in range(5):
            fh = random_perturbation(rng, d1, d2)
            xe = find_fixed_point(fh, [0.0])
            for x0 in np.linspace(-math.sqrt(0.5), math.sqrt(0.5), 20):
                s = simulate(fh, [x0], 30).states[:, 0] - xe[0]
                assert np.all(np.diff(s ** 2) <= 1e-15)
