"""
Built-in models and the model service.
Orchestrates spectral solves and the Redis cache.
"""
import logging
from typing import Dict, List, Optional

import numpy as np

from src.config import settings
from src.exceptions import ConfigError
from src.models.config import InitialMeasureSpec, ModelConfig
from src.services.cache import cache_service
from src.services.spectral import SpectralTriple, principal_eigenpair, triple_from_overrides
from src.utils.ensemble import stable_hash

logger = logging.getLogger(__name__)


def wright_fisher(gamma: float = 2.0) -> ModelConfig:
    return ModelConfig(
        name="wright-fisher",
        a="x*(1-x)",
        b="x-0.5",
        beta="gamma",
        alpha="gamma",
        parameters={"gamma": gamma},
        domain=(0.0, 1.0),
        truncations=[(0.2, 0.8), (0.1, 0.9), (0.05, 0.95), (0.0, 1.0)],
        initial=InitialMeasureSpec(positions=[0.5]),
        lambda_override=gamma - 1.0,
        phi_override="4*x*(1-x)",
        phi_tilde_override="1.5",
        expected_lambda=gamma - 1.0,
        provenance="Wright-Fisher example: mass in (0,1) grows at rate gamma - 1; limiting density uniform",
        product_critical=True,
    )


def super_bm(beta: float = 1.0, alpha: float = 1.0) -> ModelConfig:
    return ModelConfig(
        name="super-bm",
        a="1",
        b="0",
        beta="beta",
        alpha="alpha",
        parameters={"beta": beta, "alpha": alpha},
        domain=(-np.inf, np.inf),
        truncations=[(-5.0, 5.0), (-10.0, 10.0), (-20.0, 20.0), (-40.0, 40.0)],
        initial=InitialMeasureSpec(positions=[0.0]),
        lambda_override=beta,
        phi_override="1",
        phi_tilde_override="1",
        expected_lambda=beta,
        provenance="supercritical super-Brownian motion: lambda_c = beta, not product-critical",
        product_critical=False,
    )


def dirichlet_box(beta: float = 0.0, alpha: float = 1.0, ell: float = float(np.pi)) -> ModelConfig:
    return ModelConfig(
        name="dirichlet-box",
        a="1",
        b="0",
        beta="beta",
        alpha="alpha",
        parameters={"beta": beta, "alpha": alpha, "ell": ell},
        domain=(0.0, ell),
        truncations=[(ell / 8, 7 * ell / 8), (ell / 16, 15 * ell / 16), (ell / 32, 31 * ell / 32), (0.0, ell)],
        initial=InitialMeasureSpec(positions=[ell / 2]),
        lambda_override=beta - np.pi ** 2 / (2 * ell ** 2),
        phi_override="sin(pi*x/ell)",
        phi_tilde_override="sin(pi*x/ell)",
        expected_lambda=beta - np.pi ** 2 / (2 * ell ** 2),
        provenance="1/2 Laplacian with Dirichlet ends: lambda_c = beta - pi^2 / (2 ell^2), sine ground state",
        product_critical=True,
    )


BUILDERS = {
    "wright-fisher": wright_fisher,
    "super-bm": super_bm,
    "dirichlet-box": dirichlet_box,
}


def registry() -> List[ModelConfig]:
    """Built-in models at their default parameters."""
    return [builder() for builder in BUILDERS.values()]


def build_model(name: str, parameters: Optional[Dict[str, float]] = None) -> ModelConfig:
    if name not in BUILDERS:
        raise ConfigError(f"unknown model '{name}'; choose one of {', '.join(BUILDERS)}")
    try:
        return BUILDERS[name](**(parameters or {}))
    except TypeError as e:
        raise ConfigError(f"bad parameters for model '{name}': {e}") from e


class ModelService:
    """Spectral solves behind a cache-aside lookup."""

    @staticmethod
    def cache_key(model: ModelConfig, grid_size: int) -> str:
        return stable_hash({
            "model": model.model_dump(mode="json"),
            "grid_size": grid_size,
            "eigen_tol": settings.eigen_tol,
        })

    @staticmethod
    def spectral(model: ModelConfig, grid_size: Optional[int] = None) -> SpectralTriple:
        """
        Numeric triple of a model.
        1. Check cache first
        2. On miss, run the eigensolver
        3. Store the payload in cache
        """
        grid_size = grid_size or settings.grid_size
        key = ModelService.cache_key(model, grid_size)
        cached = cache_service.get_triple(key)
        if cached:
            try:
                return SpectralTriple.from_payload(cached)
            except (KeyError, TypeError, ValueError) as e:
                logger.warning(f"Discarding unreadable cached triple {key[:12]}: {e}")
                cache_service.invalidate(key)

        triple = principal_eigenpair(model.quadruple(), grid_size)
        cache_service.set_triple(key, triple.to_payload())
        return triple

    @staticmethod
    def ground_state(model: ModelConfig, grid_size: Optional[int] = None,
                     analytic: bool = False) -> SpectralTriple:
        """The numeric triple, or the analytic overrides checked against the same discretization."""
        triple = ModelService.spectral(model, grid_size)
        if not analytic:
            return triple
        if not model.has_overrides:
            raise ConfigError(f"model '{model.name}' carries no analytic overrides")
        phi = model.coefficient(model.phi_override)
        phi_tilde = model.coefficient(model.phi_tilde_override or model.phi_override)
        return triple_from_overrides(model.quadruple(), model.lambda_override, phi, phi_tilde,
                                     grid_size, triple.criticality)


# Global service instance
model_service = ModelService()
