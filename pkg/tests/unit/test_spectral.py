"""
Unit tests for the principal eigenpair, criticality and growth-rate estimators.
"""
from types import SimpleNamespace

import numpy as np
import pytest

from src.exceptions import ConvergenceError, DomainError, InsufficientDataError
from src.services.registry import dirichlet_box, super_bm, wright_fisher
from src.services.spectral import (
    Criticality,
    SpectralTriple,
    classify_criticality,
    lambda_feynman_kac,
    local_growth_rate,
    override_residual,
    principal_eigenpair,
    triple_from_overrides,
)
from src.utils.grid import GridFunction
from src.utils.measures import FiniteMeasure


@pytest.fixture(scope="module")
def wf_numeric():
    return principal_eigenpair(wright_fisher(2.0).quadruple(), 401)


class TestPrincipalEigenpair:

    def test_wright_fisher_growth_rate(self, wf_numeric):
        assert wf_numeric.lambda_c == pytest.approx(1.0, abs=1e-2)
        assert wf_numeric.criticality == Criticality.PRODUCT_CRITICAL

    def test_wright_fisher_ground_state_shape(self, wf_numeric):
        phi = wf_numeric.phi_c
        assert np.max(phi.values) == pytest.approx(1.0)
        x = np.linspace(0.1, 0.9, 17)
        np.testing.assert_allclose(phi(x), 4 * x * (1 - x), atol=1e-2)
        np.testing.assert_allclose(wf_numeric.phi_tilde_c(x), 1.5, atol=2e-2)
        assert wf_numeric.normalization == pytest.approx(1.0, rel=1e-9)

    def test_truncation_table_is_monotone(self, wf_numeric):
        lambdas = [row["lambda"] for row in wf_numeric.truncation_rows()]
        assert len(lambdas) == 4
        assert all(b >= a for a, b in zip(lambdas, lambdas[1:]))

    def test_subcritical_wright_fisher(self):
        triple = principal_eigenpair(wright_fisher(0.5).quadruple(), 401)
        assert triple.lambda_c == pytest.approx(-0.5, abs=1e-2)

    def test_dirichlet_box_control(self):
        triple = principal_eigenpair(dirichlet_box(beta=0.0).quadruple(), 801)
        assert triple.lambda_c == pytest.approx(-0.5, abs=1e-3)
        x = triple.phi_c.nodes
        assert np.max(np.abs(triple.phi_c.values - np.sin(x))) < 1e-3

    def test_payload_round_trip_preserves_triple(self, wf_numeric):
        restored = SpectralTriple.from_payload(wf_numeric.to_payload())
        assert restored.lambda_c == wf_numeric.lambda_c
        assert restored.criticality == wf_numeric.criticality
        np.testing.assert_array_equal(restored.phi_c.values, wf_numeric.phi_c.values)
        assert len(restored.table) == len(wf_numeric.table)

    def test_summary_fields(self, wf_numeric):
        summary = wf_numeric.summary()
        assert set(summary) == {"lambda_c", "residual", "criticality", "truncation_table"}
        assert summary["criticality"] == "product-critical"

    def test_truncation_outside_domain(self):
        with pytest.raises(DomainError):
            principal_eigenpair(wright_fisher(2.0).quadruple(), 101, truncations=[(0.1, 0.9), (-0.5, 1.0)])

    def test_time_dependent_rejected(self):
        model = wright_fisher(2.0).model_copy(update={"beta": "gamma + t"})
        with pytest.raises(DomainError):
            principal_eigenpair(model.quadruple(), 101)


class TestCriticality:

    @staticmethod
    def rows(*integrals):
        return [SimpleNamespace(product_integral=value) for value in integrals]

    def test_stable_integrals_are_product_critical(self):
        assert classify_criticality(self.rows(1.0, 1.2, 1.25, 1.25)) == Criticality.PRODUCT_CRITICAL

    def test_growing_integrals(self):
        assert classify_criticality(self.rows(1.0, 2.0, 4.0)) == Criticality.CRITICAL_NON_PRODUCT

    def test_shrinking_integrals(self):
        assert classify_criticality(self.rows(4.0, 2.0, 1.0)) == Criticality.SUBCRITICAL_LIKE

    def test_bounded_domain_is_product_critical(self):
        assert classify_criticality(self.rows(1.0, 2.0, 4.0), bounded=True) == Criticality.PRODUCT_CRITICAL

    def test_needs_three_truncations(self):
        with pytest.raises(InsufficientDataError):
            classify_criticality(self.rows(1.0, 2.0))


class TestOverrides:

    def test_wright_fisher_override_accepted(self, wf_triple):
        assert wf_triple.lambda_c == 1.0
        assert wf_triple.residual < 1e-3
        assert wf_triple.normalization == pytest.approx(1.0)
        assert wf_triple.phi_tilde_c(0.5) == pytest.approx(1.5, rel=1e-3)

    def test_wrong_override_rejected(self, wf_model):
        with pytest.raises(ConvergenceError):
            triple_from_overrides(wf_model.quadruple(), 0.5, wf_model.coefficient("4*x*(1-x)"),
                                  wf_model.coefficient("1"), 201)


class TestGrowthEstimators:

    def test_feynman_kac_with_constant_potential(self):
        Q = super_bm(beta=0.7).quadruple()
        estimate = lambda_feynman_kac(Q, 0.0, (-1.0, 1.0), 1.0, paths=200, dt=0.01, seed=3,
                                      boundary="reflect", batch_paths=50, n_resamples=50)
        assert estimate.estimate == pytest.approx(0.7, abs=1e-9)
        assert estimate.survival_fraction == 1.0
        assert not estimate.all_exited

    def test_feynman_kac_all_paths_exit(self):
        Q = super_bm(beta=0.0).quadruple()
        estimate = lambda_feynman_kac(Q, 0.0, (-0.05, 0.05), 5.0, paths=50, dt=1e-3, seed=1)
        assert estimate.all_exited
        assert estimate.estimate == -np.inf

    def test_feynman_kac_start_outside(self):
        with pytest.raises(DomainError):
            lambda_feynman_kac(super_bm().quadruple(), 2.0, (-1.0, 1.0), 1.0, 10, 0.01, 0)

    def test_local_growth_rate_in_a_box(self):
        model = dirichlet_box(beta=0.0)
        mu = FiniteMeasure.atoms([np.pi / 2])
        rates = local_growth_rate(model.quadruple(), mu, (1.0, 2.0), [1.0, 2.0, 4.0], grid_size=201)
        assert rates.rates.shape == (3,)
        assert np.all(np.isfinite(rates.rates))
        assert np.all(np.diff(rates.pairings) < 0)
        assert rates.rates[-1] < 0

    def test_local_growth_rate_of_wright_fisher(self):
        Q = wright_fisher(2.0).quadruple()
        rates = local_growth_rate(Q, FiniteMeasure.atoms([0.5]), (0.25, 0.75), [2.0, 5.0, 10.0], grid_size=201)
        assert rates.rates[-1] == pytest.approx(1.0, abs=0.1)
        assert np.all(np.diff(rates.pairings) > 0)

    @pytest.mark.slow
    def test_feynman_kac_matches_truncation_eigenvalue(self):
        Q = wright_fisher(2.0).quadruple()
        A, t = (0.05, 0.95), 6.0
        eigen = principal_eigenpair(Q, 401, truncations=[A])
        overlap = eigen.phi_c(0.5) * eigen.phi_tilde_c.integral()
        expected = eigen.lambda_c + np.log(overlap) / t
        estimate = lambda_feynman_kac(Q, 0.5, A, t, paths=20000, dt=2e-3, seed=11)
        assert not estimate.all_exited
        assert abs(estimate.estimate - expected) <= 3 * estimate.standard_error + 0.05


class TestGridRefinement:

    def test_eigenvalue_error_is_second_order(self):
        Q = dirichlet_box(beta=0.0).quadruple()
        errors = [abs(principal_eigenpair(Q, size, truncations=[(0.0, np.pi)]).lambda_c + 0.5)
                  for size in (101, 201, 401)]
        assert 3.5 < errors[0] / errors[1] < 4.5
        assert 3.5 < errors[1] / errors[2] < 4.5

    def test_ground_state_residual_is_second_order(self):
        Q = dirichlet_box(beta=0.0).quadruple()
        residuals = [override_residual(Q, -0.5, GridFunction.from_callable(np.sin, 0.0, np.pi, size, "none"))
                     for size in (101, 201, 401)]
        assert 3.5 < residuals[0] / residuals[1] < 4.5
        assert 3.5 < residuals[1] / residuals[2] < 4.5

    @pytest.mark.slow
    @pytest.mark.parametrize("gamma, low, high", [(2.0, 0.95, 1.05), (0.5, -0.55, -0.45)])
    def test_wright_fisher_on_a_fine_grid(self, gamma, low, high):
        triple = principal_eigenpair(wright_fisher(gamma).quadruple(), 2000)
        assert low <= triple.lambda_c <= high
