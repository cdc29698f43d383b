import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from totalstab.bounds import (CertificateError, GlobalLyapunovCertificate, assemble_bounds,
                              delta1, delta2, delta4, prop1_delta, validate_global_certificate,
                              worst_quadratic_shift)
from totalstab.dynamics import SystemMap
from totalstab.lyapunov import ContractionCertificate, LyapunovFunction, QuadraticForm
from totalstab.sets import CompactSetSampler

mpmath.mp.dps = 50


def mp_delta1(eps, a, lam):
    eps, a, lam = mpmath.mpf(eps), mpmath.mpf(a), mpmath.mpf(lam)
    return float(mpmath.sqrt(eps * (1 - a) ** 2 / (8 * lam * (3 + a))))


def mp_delta2(a):
    a = mpmath.mpf(a)
    return float((1 - a) / (2 * mpmath.sqrt(10 + 6 * a)))


class TestClosedForms:
    def test_delta1_examples(self):
        assert delta1(1, 0, np.eye(1)) == pytest.approx(math.sqrt(1 / 24), abs=1e-12)
        assert delta1(1, 0.25, np.eye(1)) == pytest.approx(mp_delta1(1, 0.25, 1), abs=1e-15)
        assert delta1(1, 1 - 1e-12, np.eye(1)) < 1e-12

    def test_delta2_examples(self):
        assert delta2(0) == pytest.approx(1 / (2 * math.sqrt(10)), abs=1e-15)
        assert delta2(0.5) == pytest.approx(mp_delta2(0.5), abs=1e-15)
        assert delta2(1 - 1e-12) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 10), st.floats(0.01, 0.99), st.floats(0.1, 10))
    def test_against_mpmath(self, eps, a, lam):
        assert delta1(eps, a, lam * np.eye(1)) == pytest.approx(mp_delta1(eps, a, lam), rel=1e-12)
        assert delta2(a) == pytest.approx(mp_delta2(a), rel=1e-12)

    def test_monotonicity(self):
        eps = np.linspace(0.1, 5, 20)
        a = np.linspace(0.01, 0.99, 20)
        lam = np.linspace(0.5, 10, 20)
        assert np.all(np.diff([delta1(e, 0.3, np.eye(1)) for e in eps]) > 0)
        assert np.all(np.diff([delta1(1, x, np.eye(1)) for x in a]) < 0)
        assert np.all(np.diff([delta1(1, 0.3, l * np.eye(1)) for l in lam]) < 0)
        assert np.all(np.diff([delta2(x) for x in a]) < 0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 100))
    def test_scale_invariance(self, kappa):
        P = np.diag([1.0, 3.0])
        assert delta1(kappa * 0.7, 0.4, kappa * P) == pytest.approx(delta1(0.7, 0.4, P), rel=1e-12)


class TestWorstShift:
    def test_against_direction_grid(self):
        rng = np.random.default_rng(0)
        P = np.array([[3.0, 0.5], [0.5, 1.0]])
        Y = rng.normal(size=(50, 2))
        t = np.linspace(0, 2 * np.pi, 20001)
        D = np.column_stack([np.cos(t), np.sin(t)])
        for s in (0.0, 0.1, 1.0, 5.0):
            exact = worst_quadratic_shift(P, Y, s)
            pts = Y[:, None, :] + s * D[None]
            brute = np.einsum("nki,ij,nkj->nk", pts, P, pts).max(axis=1)
            assert np.all(exact >= brute - 1e-10)
            np.testing.assert_allclose(exact, brute, rtol=1e-6)

    def test_hard_case(self):
        # y on the minor axis: the worst direction is along the major axis
        P = np.diag([4.0, 1.0])
        val = worst_quadratic_shift(P, np.array([[0.0, 0.1]]), 1.0)[0]
        assert val == pytest.approx(4.0 + 0.01, abs=0.05)
        t = np.linspace(0, 2 * np.pi, 200001)
        pts = np.array([0.0, 0.1]) + np.column_stack([np.cos(t), np.sin(t)])
        assert val == pytest.approx(np.max(4 * pts[:, 0] ** 2 + pts[:, 1] ** 2), rel=1e-8)


def prop1_oracle(c_lo, c_hi=1.0, rho_t=0.5):
    """Dense-grid bisection for f = 0.5x, V = x^2 (scalar)."""
    xs = np.linspace(-np.sqrt(c_hi), np.sqrt(c_hi), 200001)
    ann = xs[(xs ** 2 >= c_lo) & (xs ** 2 <= c_hi)]

    def ok(s):
        p = np.max((0.5 * np.abs(xs) + s) ** 2) - c_hi
        q = np.max((0.5 * np.abs(ann) + s) ** 2 - rho_t * ann ** 2) if len(ann) else -1
        return p < 0 and q < 0

    lo, hi = 0.0, 2.0
    for _ in range(60):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


class TestProp1:
    f = SystemMap.from_expressions(["0.5*x1"])
    V = LyapunovFunction.from_quadratic(np.eye(1), 0.25)

    def test_annulus_binds(self):
        b = prop1_delta(self.V, self.f, 1.0, 0.25, 0.5)
        assert b.delta == pytest.approx(prop1_oracle(0.25), abs=1e-6)
        assert b.delta == pytest.approx((-0.5 + math.sqrt(0.5)) / 2, abs=1e-6)

    def test_only_p_binds(self):
        assert prop1_delta(self.V, self.f, 1.0, 1.0, 0.5).delta == pytest.approx(0.5, abs=1e-9)

    def test_rho_tilde_range(self):
        with pytest.raises(ValueError):
            prop1_delta(self.V, self.f, 1.0, 0.25, 0.2)
        with pytest.raises(ValueError):
            prop1_delta(self.V, self.f, 1.0, 0.25, 1.0)

    def test_certificate_failure(self):
        with pytest.raises(CertificateError):
            prop1_delta(self.V, SystemMap.from_expressions(["0.9*x1"]), 1.0, 0.25, 0.5)

    def test_generic_V_matches_quadratic(self):
        Vg = LyapunovFunction.from_expression("x1^2", 1, 0.25)
        b = prop1_delta(Vg, self.f, 1.0, 0.25, 0.5, r_max=2.0)
        assert b.delta == pytest.approx(prop1_oracle(0.25), abs=1e-6)

    def test_resampling_keeps_sign(self):
        P = np.diag([1.0, 2.0])
        V = LyapunovFunction.from_quadratic(P, 0.3)
        f = SystemMap.from_expressions(["0.5*x1 + 0.1*x2", "-0.1*x1 + 0.4*x2"])
        b = prop1_delta(V, f, 1.0, 0.3, 0.6, seed=0)
        s = 0.99 * b.delta
        X = CompactSetSampler.ellipsoid(P, 1.0, n=4000, n_boundary=1000, seed=123).draw()
        A = CompactSetSampler.annulus(P, 0.3, 1.0, n=4000, n_boundary=1000, seed=124).draw()
        p = np.max(worst_quadratic_shift(P, f.batch(X), s)) - 1.0
        VA = np.einsum("ni,ij,nj->n", A, P, A)
        q = np.max(worst_quadratic_shift(P, f.batch(A), s) - 0.6 * VA)
        assert p < 0 and q < 0


class TestDelta4:
    f = SystemMap.from_expressions(["0.5*x1"])

    def cert(self, rho=0.25):
        return GlobalLyapunovCertificate(LyapunovFunction.from_expression("x1^2", 1, rho), 1.0, 2.0)

    def test_scalar_example(self):
        C = CompactSetSampler.box([-0.8], [0.8], n=500, n_boundary=50)
        r = delta4(self.cert(), C, np.eye(1), 1.0)
        assert r.v_lower == pytest.approx(0.5, abs=1e-9)
        assert r.separation == pytest.approx(0.2, abs=1e-8)
        assert r.gradient_term == pytest.approx(0.1875, abs=1e-8)
        assert r.delta4 == pytest.approx(0.1875, abs=1e-8)

    def test_touching(self):
        C = CompactSetSampler.box([-1.0], [1.0], n=500, n_boundary=50)
        assert delta4(self.cert(), C, np.eye(1), 1.0).delta4 == 0.0

    def test_rho_to_one(self):
        C = CompactSetSampler.box([-0.8], [0.8], n=500, n_boundary=50)
        assert delta4(self.cert(1 - 1e-9), C, np.eye(1), 1.0).gradient_term < 1e-9

    def test_ellipsoid_not_inside(self):
        C = CompactSetSampler.box([-0.8], [0.8], n=500, n_boundary=50)
        with pytest.raises(CertificateError):
            delta4(self.cert(), C, np.eye(1), 4.0)

    def test_validation(self):
        assert validate_global_certificate(self.cert(), self.f)["passed"]
        assert not validate_global_certificate(self.cert(), SystemMap.from_expressions(["0.9*x1"]))["passed"]


class TestAssemble:
    cert = ContractionCertificate(QuadraticForm(np.eye(1)), 0.25, 1.0, -0.2785, 1, 0)

    def test_without_delta4(self):
        tb = assemble_bounds(self.cert)
        assert tb.delta3 == pytest.approx(mp_delta2(0.25), abs=1e-12)
        assert tb.delta == pytest.approx(0.9 * tb.delta3)
        assert tb.delta4 is None
        assert any("basin claim limited" in n for n in tb.notes)

    def test_with_delta4(self):
        C = CompactSetSampler.box([-0.8], [0.8], n=500, n_boundary=50)
        g = GlobalLyapunovCertificate(LyapunovFunction.from_expression("x1^2", 1, 0.25), 1.0, 2.0)
        tb = assemble_bounds(self.cert, delta4(g, C, np.eye(1), 1.0))
        assert tb.delta == pytest.approx(0.9 * min(mp_delta2(0.25), 0.1875), abs=1e-10)
        assert tb.delta == pytest.approx(0.0995, abs=1e-4)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 10), st.floats(0.1, 1.0))
    def test_never_exceeds_parts(self, a, eps, safety):
        tb = assemble_bounds(ContractionCertificate(QuadraticForm(np.eye(2)), a, eps, -1, 1, 0), None, safety)
        assert tb.delta <= min(tb.delta1, tb.delta2) + 1e-15
        assert tb.delta3 == min(tb.delta1, tb.delta2)

    def test_bad_safety(self):
        with pytest.raises(ValueError):
            assemble_bounds(self.cert, None, 0.0)
