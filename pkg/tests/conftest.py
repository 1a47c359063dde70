"""
Shared fixtures: registry models with analytic ground states on small grids.
"""
import pytest

from src.services.registry import dirichlet_box, super_bm, wright_fisher
from src.services.spectral import Criticality, triple_from_overrides


def analytic_triple(model, grid_size, criticality=Criticality.PRODUCT_CRITICAL):
    return triple_from_overrides(
        model.quadruple(),
        model.lambda_override,
        model.coefficient(model.phi_override),
        model.coefficient(model.phi_tilde_override),
        grid_size,
        criticality,
    )


@pytest.fixture
def wf_model():
    return wright_fisher(2.0)


@pytest.fixture
def wf_triple(wf_model):
    return analytic_triple(wf_model, 201)


@pytest.fixture
def bm_model():
    return super_bm(beta=0.0, alpha=1.0)


@pytest.fixture
def bm_triple(bm_model):
    return analytic_triple(bm_model, 401, Criticality.CRITICAL_NON_PRODUCT)


@pytest.fixture
def box_model():
    return dirichlet_box(beta=0.0)
