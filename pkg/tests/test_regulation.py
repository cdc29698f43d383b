import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from totalstab.bounds import delta2
from totalstab.dynamics import PlantModel, VectorFn, build_extended
from totalstab.lyapunov import QuadraticForm, default_decay, spectral_radius
from totalstab.regulation import (ForwardingController, GeneralizedIntegrator, ResonanceError,
                                  SynthesisError, adaptive_simpson, check_integrator,
                                  controller_constants, delta_quantities, forwarding_control,
                                  prop2_budget, prop3_budget, simulate_regulation,
                                  solve_M_linear, solve_M_numeric)
from totalstab.sets import CompactSetSampler

from oracles import forwarding_grid_oracle

ALPHA = VectorFn.from_expressions(["-0.2*x1 - 0.1*u1"], [("x", 1), ("u", 1)])
XI_SET = CompactSetSampler.box([-1.0], [1.0], n=200, seed=0)
X_SET = CompactSetSampler.box([-1.0, -1.0], [1.0, 1.0], n=300, seed=1)


def plant(phi="0.5*x1", g="u1", h="x1"):
    return PlantModel.from_expressions(1, 1, 1, [phi], [g], [h])


class TestIntegrator:
    def test_identity(self, integrator):
        assert check_integrator(integrator, XI_SET).passed

    def test_tanh(self):
        k = GeneralizedIntegrator.from_expressions(["tanh(u1)"], 1, 1)
        assert check_integrator(k, XI_SET).passed

    def test_square_fails(self):
        k = GeneralizedIntegrator.from_expressions(["u1^2"], 1, 1)
        r = check_integrator(k, XI_SET)
        assert not r.passed and not r.lipschitz_ok
        w = r.witnesses["L1_bound"]
        assert w["lhs"] > w["rhs"]

    def test_xi_dependent_needs_L2(self):
        k = GeneralizedIntegrator.from_expressions(["u1*(1 + 0.5*sin(x1))"], 1, 1, L1="1.5")
        assert not check_integrator(k, XI_SET).derivative_lipschitz_ok
        k2 = GeneralizedIntegrator.from_expressions(["u1*(1 + 0.5*sin(x1))"], 1, 1, L1="1.5", L2="0.5")
        assert check_integrator(k2, XI_SET).passed


class TestDeltas:
    def test_identical(self, linear_plant, integrator):
        r = delta_quantities(linear_plant, linear_plant, ALPHA, integrator, X_SET)
        assert all(r[name].value == 0 for name in ("xi", "y", "z", "d_xi", "d_u", "d_y"))

    def test_constant_offset(self, linear_plant, integrator):
        r = delta_quantities(linear_plant, plant("0.5*x1 + 0.01"), ALPHA, integrator, X_SET)
        assert r["xi"].value == pytest.approx(0.01, abs=1e-15)
        assert all(r[name].value == 0 for name in ("y", "z", "d_xi", "d_u", "d_y"))

    def test_output_bias(self, linear_plant, integrator):
        r = delta_quantities(linear_plant, plant(h="x1 + 0.02"), ALPHA, integrator, X_SET)
        assert r["y"].value == pytest.approx(0.02, abs=1e-15)
        assert r["z"].value <= r.L * r["y"].value + 1e-15
        assert r.z_bound_holds

    def test_z_bound_nonlinear_k(self, linear_plant):
        k = GeneralizedIntegrator.from_expressions(["tanh(u1)"], 1, 1)
        r = delta_quantities(linear_plant, plant(h="x1 + 0.1*sin(3*x1) + 0.05*u1"), ALPHA, k, X_SET)
        assert r.z_bound_holds and r["d_y"].value > 0

    def test_jacobian_terms(self, linear_plant, integrator):
        r = delta_quantities(linear_plant, plant(phi="0.5*x1 + 0.1*sin(x1)", g="1.1*u1"),
                             ALPHA, integrator, X_SET)
        assert r["d_u"].value == pytest.approx(0.1, abs=1e-12)
        assert r["d_xi"].value == pytest.approx(0.1, abs=1e-3)


class TestBudgets:
    def test_prop2(self):
        assert prop2_budget(0.1, 1) == pytest.approx(0.05)
        assert prop2_budget(0.1, 0) == 0.1
        assert prop2_budget(0.0, 3) == 0.0

    def test_prop3_examples(self):
        b = prop3_budget(0.110585, None, 0.2, 1, 1)
        assert b.mu == pytest.approx(3.8)
        assert b.delta_bar == pytest.approx(0.110585 / 3.8 * 0.9, abs=1e-12)
        assert b.delta_bar == pytest.approx(0.02619, abs=1e-5)
        z = prop3_budget(0.1, 0.05, 0, 0, 0)
        assert z.mu == 1 and z.delta_bar == pytest.approx(0.045)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 1))
    def test_mu_monotone(self, La, Lk, L, h):
        base = prop3_budget(0.1, None, La, Lk, L).mu
        assert prop3_budget(0.1, None, La + h, Lk, L).mu >= base
        assert prop3_budget(0.1, None, La, Lk + h, L).mu >= base
        assert prop3_budget(0.1, None, La, Lk, L + h).mu >= base

    def test_constants(self, integrator):
        c = controller_constants(ALPHA, integrator, X_SET)
        assert (c.L, c.L_alpha, c.L_k) == pytest.approx((1.0, 0.2, 1.0))


class TestMSolve:
    def test_linear_scalar(self):
        assert solve_M_linear([[0.5]], [[1.0]]).K[0, 0] == -2.0

    def test_linear_zero(self):
        assert np.all(solve_M_linear([[0.5]], [[0.0]]).K == 0)

    def test_resonance(self):
        with pytest.raises(ResonanceError):
            solve_M_linear(np.eye(2), np.ones((1, 2)))

    def test_linear_matrix(self):
        rng = np.random.default_rng(2)
        A = 0.4 * rng.normal(size=(3, 3))
        C = rng.normal(size=(1, 3))
        K = solve_M_linear(A, C).K
        np.testing.assert_allclose(K @ A, K + C, atol=1e-12)

    def test_numeric_linear(self):
        fit = solve_M_numeric(lambda x: 0.5 * x, lambda x: x, 1, degree=1)
        assert fit.M.coef[0, 0] == pytest.approx(-2.0, abs=1e-8)

    def test_numeric_cubic(self):
        fit = solve_M_numeric(lambda x: 0.5 * x, lambda x: x ** 3, 1, degree=3)
        np.testing.assert_allclose(fit.M.coef[:, 0], [0, 0, -8 / 7], atol=1e-8)
        assert fit.rms_residual < 1e-10

    def test_numeric_zero(self):
        fit = solve_M_numeric(lambda x: 0.5 * x, lambda x: 0 * x, 1, degree=3)
        assert np.all(fit.M.coef == 0)

    def test_polynomial_gradient(self):
        fit = solve_M_numeric(lambda x: 0.5 * x, lambda x: np.array([x[0] ** 2 + x[0] * x[1]]), 2, 2)
        x = np.array([0.3, -0.4])
        h = 1e-6
        fd = [(fit.M(x + h * e) - fit.M(x - h * e))[0] / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(fit.M.gradient(x)[0], fd, atol=1e-8)


class TestQuadrature:
    def test_polynomial_exact(self):
        assert adaptive_simpson(lambda v: 3 * v ** 2 - v, -1.0, 2.0) == pytest.approx(7.5, abs=1e-12)

    def test_smooth(self):
        assert adaptive_simpson(math.sin, 0.0, math.pi) == pytest.approx(2.0, abs=1e-10)
        assert adaptive_simpson(math.exp, 1.0, 0.0) == pytest.approx(1 - math.e, abs=1e-10)


class TestForwarding:
    W = QuadraticForm(np.eye(1))
    M = solve_M_linear([[0.5]], [[1.0]])

    def test_origin(self, linear_plant, integrator):
        assert forwarding_control(self.W, self.M, linear_plant, integrator, [0.0], [0.0]) == 0.0

    def test_matches_oracle(self, linear_plant, integrator):
        rng = np.random.default_rng(4)
        for xi, z in rng.uniform(-0.4, 0.4, size=(5, 2)):
            u = forwarding_control(self.W, self.M, linear_plant, integrator, [xi], [z])
            assert u == pytest.approx(forwarding_grid_oracle(1.0, xi, z), abs=1e-6)

    def test_zero_input_gain(self, integrator):
        dead = plant(g="0*u1")
        assert forwarding_control(self.W, self.M, dead, integrator, [0.3], [0.2]) == 0.0

    def test_not_siso(self):
        mimo = PlantModel.from_expressions(1, 2, 1, ["0.5*x1"], ["u1 + u2"], ["x1"])
        with pytest.raises(SynthesisError):
            forwarding_control(self.W, self.M, mimo, GeneralizedIntegrator.standard(1, 1), [0.1], [0.0])

    def test_closed_loop_stable(self, linear_plant, integrator):
        ctl = ForwardingController(linear_plant, integrator, self.M, self.W)
        ext = build_extended(linear_plant, integrator, ctl.as_vectorfn())
        J = ext.system.jacobian(np.zeros(2))
        np.testing.assert_allclose(J, [[-1, -2 / 3], [1, 1]], atol=1e-5)
        assert spectral_radius(J) < 1
        assert ctl.residual_M(XI_SET) < 1e-12
        v = simulate_regulation(build_extended(plant("0.5*x1 + 0.02"), integrator, ctl.as_vectorfn()),
                                [0.3, -0.2], 200)
        assert v.passed


class TestSimulation:
    def test_disturbance_rejected(self, disturbed_plant, integrator):
        v = simulate_regulation(build_extended(disturbed_plant, integrator, ALPHA), [0, 0], 400)
        assert v.passed
        np.testing.assert_allclose(v.final_state, [0, 0.5], atol=1e-8)
        assert v.max_tail_output < 1e-8
        assert v.integrator_residual <= 1e-10

    def test_eigenvalues(self, disturbed_plant, integrator):
        J = build_extended(disturbed_plant, integrator, ALPHA).system.jacobian([0.0, 0.5])
        np.testing.assert_allclose(sorted(np.linalg.eigvals(J).real), [0.5, 0.8], atol=1e-10)

    def test_no_disturbance(self, linear_plant, integrator):
        v = simulate_regulation(build_extended(linear_plant, integrator, ALPHA), [0, 0], 50)
        assert v.passed and v.final_state == [0, 0]
        assert np.all(v.trajectory.outputs == 0)

    def test_open_loop_drift(self, disturbed_plant, integrator):
        zero = VectorFn.from_expressions(["0"], [("x", 1), ("u", 1)])
        v = simulate_regulation(build_extended(disturbed_plant, integrator, zero), [0, 0], 400)
        assert not v.passed and v.final_state[1] > 10

    def test_transfer_random_family(self, linear_plant, integrator):
        A = build_extended(linear_plant, integrator, ALPHA).system.jacobian([0.0, 0.0])
        d3 = delta2(default_decay(A))
        c = controller_constants(ALPHA, integrator, X_SET)
        budget = prop3_budget(d3, None, c.L_alpha, c.L_k, c.L).delta_bar
        rng = np.random.default_rng(9)
        for _ in range(20):
            w = rng.uniform(1, 4)
            a1 = rng.uniform(-1, 1) * budget / (2 * w)
            d = rng.uniform(-1, 1) * budget / 2
            e = rng.uniform(-1, 1) * budget
            hat = plant(f"0.5*x1 + {d!r} + {a1!r}*sin({w!r}*x1)", h=f"x1 + {e!r}")
            r = delta_quantities(linear_plant, hat, ALPHA, integrator, X_SET)
            assert max(r[n].value for n in ("xi", "y", "z", "d_xi", "d_u", "d_y")) <= budget
            v = simulate_regulation(build_extended(hat, integrator, ALPHA), [0, 0], 400)
            assert v.passed
            # integrator-equilibrium identity: z+ = z forces the output to vanish
            assert abs(v.final_output[0]) <= 1e-10
