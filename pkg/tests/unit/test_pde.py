"""
Unit tests for the semigroup, log-Laplace and moment solvers.
"""
import numpy as np
import pytest
from scipy.integrate import simpson, solve_ivp

from src.exceptions import DiscretizationError, RegimeError, SolverError, TruncationError
from src.models.config import InitialMeasureSpec, ModelConfig
from src.services import pde
from src.services.pde import (
    FlowResult,
    SplitStepper,
    backward_solve,
    expectation_flow,
    expectation_semigroup,
    laplace_functional,
    loglaplace_solve,
    transformed_semigroup,
    variance_test_integral,
    variance_weighted_mass,
)
from src.services.registry import dirichlet_box, super_bm
from src.utils.grid import GridFunction
from src.utils.measures import FiniteMeasure

from tests.conftest import analytic_triple


def sine(size=201, ell=np.pi):
    return GridFunction.from_callable(lambda x: np.sin(np.pi * x / ell), 0.0, ell, size)


class TestExpectationSemigroup:

    def test_heat_decay_of_the_ground_state(self, box_model):
        u = expectation_semigroup(box_model.quadruple(), sine(), 1.0)
        assert u(np.pi / 2) == pytest.approx(np.exp(-0.5), rel=1e-3)

    def test_constant_potential_grows(self):
        Q = dirichlet_box(beta=1.0).quadruple()
        u = expectation_semigroup(Q, sine(), 2.0)
        assert u(np.pi / 2) == pytest.approx(np.exp(0.5 * 2.0), rel=1e-3)

    def test_flow_snapshots_follow_times(self, box_model):
        flow = expectation_flow(box_model.quadruple(), sine(), [0.0, 0.5, 1.0])
        assert flow.times.tolist() == [0.0, 0.5, 1.0]
        centre = [snapshot(np.pi / 2) for snapshot in flow.snapshots]
        assert centre[0] == pytest.approx(1.0)
        assert centre[0] > centre[1] > centre[2]
        assert flow.diagnostics["steps"] > 0

    def test_negative_time_rejected(self, box_model):
        with pytest.raises(SolverError):
            expectation_semigroup(box_model.quadruple(), sine(), -1.0)


class TestSplitStepper:

    def test_quench_is_exact(self, wf_model):
        nodes = np.linspace(0.0, 1.0, 11)
        stepper = SplitStepper(wf_model.quadruple(), nodes)
        u = np.full(9, 3.0)
        np.testing.assert_allclose(stepper.quench(u, 0.0, 0.1), 3.0 / (1.0 + 2.0 * 3.0 * 0.1))

    def test_linear_step_matches_semigroup_without_alpha(self, box_model):
        Q = box_model.quadruple()
        g = sine(101)
        linear = expectation_semigroup(Q, g, 0.5, dt=0.01)
        stepper = SplitStepper(Q, g.nodes, nonlinear=False)
        u = np.array(g.interior)
        for k in range(50):
            u = stepper.step(u, 0.01 * k, 0.01)
        np.testing.assert_allclose(u, linear.interior, rtol=1e-3)


class TestLogLaplace:

    def test_solution_between_zero_and_expectation(self, box_model):
        Q = box_model.quadruple()
        g = sine()
        u = loglaplace_solve(Q, g, 1.0).final
        mean = expectation_semigroup(Q, g, 1.0)
        assert np.all(u.values >= 0)
        assert np.all(u.values <= mean.values + 1e-10)
        assert u(np.pi / 2) < mean(np.pi / 2)

    def test_monotone_in_initial_datum(self, box_model):
        Q = box_model.quadruple()
        small = loglaplace_solve(Q, sine(), 0.5).final
        large = loglaplace_solve(Q, sine().with_values(2 * sine().values), 0.5).final
        assert np.all(large.values >= small.values - 1e-12)

    def test_negative_datum_rejected(self, box_model):
        with pytest.raises(SolverError):
            loglaplace_solve(box_model.quadruple(), sine().with_values(-sine().values), 1.0)

    def test_small_truncations_disagree(self):
        model = ModelConfig(name="narrow", a="1", beta="0", alpha="1", domain=(-np.inf, np.inf),
                            truncations=[(-0.5, 0.5), (-1.0, 1.0)],
                            initial=InitialMeasureSpec(positions=[0.0]))
        g = GridFunction.from_callable(lambda x: np.ones_like(x), -1.0, 1.0, 101)
        with pytest.raises(TruncationError):
            loglaplace_solve(model.quadruple(), g, 2.0, mu=FiniteMeasure.atoms([0.0]), grid_size=101)

    def test_backward_solve_matches_forward_when_homogeneous(self, box_model):
        Q = box_model.quadruple()
        forward = loglaplace_solve(Q, sine(), 1.0).final
        backward = backward_solve(Q, sine(), 0.0, 1.0)
        np.testing.assert_allclose(backward.values, forward.values)

    def test_backward_solve_needs_r_below_t(self, box_model):
        with pytest.raises(SolverError):
            backward_solve(box_model.quadruple(), sine(), 1.0, 1.0)


def flat_model(beta, alpha="1"):
    return ModelConfig(name="flat", a="1", beta=beta, alpha=alpha, domain=(-np.inf, np.inf),
                       truncations=[(-10.0, 10.0), (-20.0, 20.0)])


def ones(left=-20.0, right=20.0, size=401):
    return GridFunction.from_callable(lambda x: np.ones_like(x), left, right, size)


class TestInvariants:

    def test_flat_logistic_closed_form(self):
        beta, alpha, t = 1.0, 0.5, 1.0
        u = loglaplace_solve(flat_model("1", "0.5").quadruple(), ones(), t).final
        grow = np.exp(beta * t)
        expected = beta * grow / (beta + alpha * (grow - 1.0))
        assert u(0.0) == pytest.approx(expected, rel=1e-4)

    def test_backward_solve_with_oscillating_rate(self):
        t = 2.0
        u = backward_solve(flat_model("sin(t)").quadruple(), ones(), 0.0, t, dt=5e-4)
        oracle = solve_ivp(lambda s, v: np.sin(t - s) * v - v ** 2, (0.0, t), [1.0], rtol=1e-11, atol=1e-13)
        assert u(0.0) == pytest.approx(oracle.y[0, -1], abs=1e-6)

    def test_transformed_semigroup_contracts(self, wf_model, wf_triple):
        g = GridFunction.from_callable(lambda x: x, 0.0, 1.0, 201)
        phi, phi_tilde = wf_triple.phi_c, wf_triple.phi_tilde_c
        target = float(simpson(g.values * phi.values * phi_tilde.values, x=phi.nodes))
        assert target == pytest.approx(0.5, abs=1e-4)
        x = np.linspace(0.2, 0.8, 13)
        early = transformed_semigroup(wf_model.quadruple(), wf_triple, g, 1.0)
        late = transformed_semigroup(wf_model.quadruple(), wf_triple, g, 8.0)
        np.testing.assert_allclose(early(x), target + (x - 0.5) * np.exp(-1.0), atol=1e-2)
        np.testing.assert_allclose(late(x), target, atol=5e-3)
        assert np.ptp(late(x)) < np.ptp(early(x))

    def test_truncation_solutions_increase(self):
        Q = super_bm(beta=1.0).quadruple()
        g = GridFunction.from_callable(lambda x: np.exp(-x ** 2), -4.0, 4.0, 401)
        x = np.linspace(-0.9, 0.9, 19)
        values = [loglaplace_solve(Q, g, 1.0, truncations=[A], grid_size=401).final(x)
                  for A in [(-1.0, 1.0), (-2.0, 2.0), (-4.0, 4.0)]]
        for smaller, larger in zip(values, values[1:]):
            assert np.all(smaller <= larger + 1e-6)
        assert values[0][9] < values[1][9]

    def test_no_branching_variance_is_the_expectation(self):
        Q = dirichlet_box(beta=0.5, alpha=0.0).quadruple()
        u = loglaplace_solve(Q, sine(), 1.0).final
        mean = expectation_semigroup(Q, sine(), 1.0)
        np.testing.assert_allclose(u.values, mean.values, rtol=0.0, atol=1e-10)

    def test_non_monotone_truncations_rejected(self, box_model, monkeypatch):
        solve_on = pde._solve_on

        def inflated(Q, g, nodes, times, dt, nonlinear):
            result = solve_on(Q, g, nodes, times, dt, nonlinear)
            if nodes[-1] - nodes[0] < 3.0:
                return FlowResult(result.times, [s.with_values(2.0 * s.values) for s in result.snapshots],
                                  result.diagnostics)
            return result

        monkeypatch.setattr(pde, "_solve_on", inflated)
        with pytest.raises(DiscretizationError):
            loglaplace_solve(box_model.quadruple(), sine(), 0.5)


class TestLaplaceFunctional:

    def test_trivial_cases(self, box_model):
        Q = box_model.quadruple()
        assert laplace_functional(Q, FiniteMeasure.zero(), sine(), 1.0) == 1.0
        mu = FiniteMeasure.atoms([np.pi / 2], [2.0])
        assert laplace_functional(Q, mu, sine(), 0.0) == pytest.approx(np.exp(-2.0))

    def test_value_is_a_probability(self, box_model):
        mu = FiniteMeasure.atoms([np.pi / 2])
        value = laplace_functional(box_model.quadruple(), mu, sine(), 1.0)
        assert np.exp(-np.exp(-0.5)) < value < 1.0


class TestMomentFormulas:

    def test_variance_grows_below_bound(self, wf_model, wf_triple):
        Q = wf_model.quadruple()
        mu = FiniteMeasure.atoms([0.5])
        values = [variance_weighted_mass(Q, wf_triple, mu, t).value for t in (0.5, 1.0, 2.0)]
        result = variance_weighted_mass(Q, wf_triple, mu, 2.0, limit_horizon=20.0)
        assert variance_weighted_mass(Q, wf_triple, mu, 0.0).value == 0.0
        assert values[0] < values[1] < values[2]
        assert values[2] <= result.bound
        assert values[2] <= result.limit <= result.bound * (1 + 1e-6)

    def test_variance_needs_growth(self, box_model):
        triple = analytic_triple(box_model, 201)
        with pytest.raises(RegimeError) as exc:
            variance_weighted_mass(box_model.quadruple(), triple, FiniteMeasure.atoms([1.0]), 1.0)
        assert exc.value.hypothesis == "lambda_c > 0"

    def test_transformed_semigroup_fixes_constants(self, wf_model, wf_triple):
        ones = wf_triple.phi_c.with_values(np.ones(wf_triple.phi_c.size), "none")
        result = transformed_semigroup(wf_model.quadruple(), wf_triple, ones, 1.0)
        x = np.linspace(0.2, 0.8, 13)
        np.testing.assert_allclose(result(x), 1.0, atol=1e-2)

    def test_test_integral_below_its_bound(self, wf_model):
        triple = analytic_triple(wf_model, 101)
        Q = wf_model.quadruple()
        nu = FiniteMeasure.atoms([0.5])
        g = GridFunction.from_callable(lambda x: np.exp(-((x - 0.5) / 0.1) ** 2), 0.0, 1.0, 101)
        integral = variance_test_integral(Q, triple, nu, g, 1.0, 1.0, nodes=5)
        assert 0.0 < integral.value <= integral.bound
        assert integral.tail_bound(0.5) == pytest.approx(integral.bound / 0.25)
        later = variance_test_integral(Q, triple, nu, g, 1.0, 2.0, nodes=5)
        assert later.bound == pytest.approx(integral.bound * np.exp(-1.0))
