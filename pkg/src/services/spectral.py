"""
Generalized principal eigenvalue, ground states and criticality.

Eigenpairs come from shifted inverse power iteration on the tridiagonal Dirichlet
matrix of L + beta over each truncation; the truncations share the node spacing of
the largest one, so nested matrices are principal submatrices of each other.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.stats import bootstrap

from src.config import settings
from src.exceptions import (
    ConvergenceError,
    DiscretizationError,
    DomainError,
    InsufficientDataError,
)
from src.services.operators import BranchingQuadruple, Coefficient, apply_operator, interior_matrix
from src.services.particles import move_particles
from src.utils.ensemble import batch_rng, ordered_map, replicate_batches
from src.utils.grid import GridFunction, nested_grids
from src.utils.measures import FiniteMeasure

logger = logging.getLogger(__name__)

FEYNMAN_KAC_STREAM = 7


class Criticality(str, Enum):
    SUBCRITICAL_LIKE = "subcritical-like"
    CRITICAL_NON_PRODUCT = "critical-non-product"
    PRODUCT_CRITICAL = "product-critical"


@dataclass(frozen=True)
class DiscretizedOperator:
    """Dirichlet discretization of L + beta on one truncation (interior unknowns)."""

    nodes: np.ndarray
    matrix: sparse.csc_matrix
    spacing: float

    @classmethod
    def build(cls, Q: BranchingQuadruple, nodes: np.ndarray) -> "DiscretizedOperator":
        nodes = np.asarray(nodes, dtype=float)
        return cls(nodes, interior_matrix(Q.L, nodes, 0.0, Q.beta), float(nodes[1] - nodes[0]))

    @property
    def norm(self) -> float:
        return float(abs(self.matrix).sum(axis=1).max())


@dataclass(frozen=True)
class TruncationEigen:
    """Principal eigenpair on one truncation, both vectors scaled to maximum 1."""

    truncation: Tuple[float, float]
    lambda_c: float
    lambda_adjoint: float
    phi: GridFunction
    phi_tilde: GridFunction
    product_integral: float
    residual: float
    backward_error: float
    iterations: int


@dataclass(frozen=True)
class SpectralTriple:
    lambda_c: float
    phi_c: GridFunction
    phi_tilde_c: GridFunction
    criticality: Criticality
    residual: float
    backward_error: float = 0.0
    table: Tuple[TruncationEigen, ...] = field(default=(), repr=False)

    @property
    def normalization(self) -> float:
        return self.phi_c.with_values(self.phi_c.values * self.phi_tilde_c.values).integral()

    def truncation_rows(self) -> List[dict]:
        return [
            {
                "left": row.truncation[0],
                "right": row.truncation[1],
                "lambda": row.lambda_c,
                "integral_phi_phi_tilde": row.product_integral,
            }
            for row in self.table
        ]

    def summary(self) -> dict:
        return {
            "lambda_c": self.lambda_c,
            "residual": self.residual,
            "criticality": self.criticality.value,
            "truncation_table": self.truncation_rows(),
        }

    def to_payload(self) -> dict:
        def grid(g: GridFunction) -> dict:
            return {"values": g.values.tolist(), "left": g.left, "right": g.right, "boundary": g.boundary}

        return {
            "lambda_c": self.lambda_c,
            "phi_c": grid(self.phi_c),
            "phi_tilde_c": grid(self.phi_tilde_c),
            "criticality": self.criticality.value,
            "residual": self.residual,
            "backward_error": self.backward_error,
            "table": [
                {
                    "truncation": list(row.truncation),
                    "lambda_c": row.lambda_c,
                    "lambda_adjoint": row.lambda_adjoint,
                    "phi": grid(row.phi),
                    "phi_tilde": grid(row.phi_tilde),
                    "product_integral": row.product_integral,
                    "residual": row.residual,
                    "backward_error": row.backward_error,
                    "iterations": row.iterations,
                }
                for row in self.table
            ],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "SpectralTriple":
        def grid(data: dict) -> GridFunction:
            return GridFunction(np.array(data["values"]), data["left"], data["right"], data["boundary"])

        table = tuple(
            TruncationEigen(
                truncation=tuple(row["truncation"]),
                lambda_c=row["lambda_c"],
                lambda_adjoint=row["lambda_adjoint"],
                phi=grid(row["phi"]),
                phi_tilde=grid(row["phi_tilde"]),
                product_integral=row["product_integral"],
                residual=row["residual"],
                backward_error=row["backward_error"],
                iterations=row["iterations"],
            )
            for row in payload["table"]
        )
        return cls(
            lambda_c=payload["lambda_c"],
            phi_c=grid(payload["phi_c"]),
            phi_tilde_c=grid(payload["phi_tilde_c"]),
            criticality=Criticality(payload["criticality"]),
            residual=payload["residual"],
            backward_error=payload["backward_error"],
            table=table,
        )


@dataclass(frozen=True)
class FeynmanKacEstimate:
    estimate: float
    standard_error: float
    survival_fraction: float
    all_exited: bool
    paths: int
    horizon: float


@dataclass(frozen=True)
class GrowthRates:
    times: np.ndarray
    pairings: np.ndarray
    rates: np.ndarray
    conclusive: bool


def _inverse_power(op: DiscretizedOperator, shift: float, tol: float, max_iter: int,
                   transpose: bool = False) -> Tuple[float, np.ndarray, int, float]:
    matrix = op.matrix.transpose().tocsc() if transpose else op.matrix
    size = matrix.shape[0]
    lu = splu((matrix - shift * sparse.identity(size, format="csc")).tocsc())
    norm = op.norm
    vector = np.full(size, 1.0 / np.sqrt(size))
    lam_previous = np.inf
    best = np.inf
    stalled = 0
    backward = np.inf
    lam = shift
    for iteration in range(1, max_iter + 1):
        w = lu.solve(vector)
        w = w / w[np.argmax(np.abs(w))]
        mw = matrix @ w
        lam = float(w @ mw / (w @ w))
        backward = float(np.max(np.abs(mw - lam * w)) / (norm * np.max(np.abs(w))))
        vector = w
        if backward <= tol and abs(lam - lam_previous) <= 10 * tol * max(1.0, abs(lam)):
            return lam, vector, iteration, backward
        if backward < best:
            best, stalled = backward, 0
        else:
            stalled += 1
        if stalled > 200 and backward <= np.sqrt(tol):
            logger.warning(f"Inverse iteration stalled at backward error {backward:.2e}; accepting")
            return lam, vector, iteration, backward
        lam_previous = lam
        logger.debug(f"iteration {iteration}: lambda={lam:.12f} backward={backward:.2e}")
    raise ConvergenceError(f"inverse power iteration did not converge in {max_iter} iterations", backward)


def _positive(vector: np.ndarray) -> np.ndarray:
    vector = vector / vector[np.argmax(np.abs(vector))]
    if np.min(vector) < -1e-8:
        raise DiscretizationError("principal eigenvector changes sign; refine the grid")
    return np.where(vector > 0, vector, np.finfo(float).tiny)


def _solve_truncation(Q: BranchingQuadruple, nodes: np.ndarray, tol: float, max_iter: int) -> TruncationEigen:
    op = DiscretizedOperator.build(Q, nodes)
    shift = float(np.max(Q.beta(nodes[1:-1]))) + 1.0
    lam, phi, iterations, backward = _inverse_power(op, shift, tol, max_iter)
    lam_adj, phi_tilde, _, _ = _inverse_power(op, shift, tol, max_iter, transpose=True)
    if abs(lam - lam_adj) > 1e-10 * max(1.0, abs(lam)):
        logger.warning(f"adjoint eigenvalue {lam_adj:.12f} differs from {lam:.12f}")
    phi, phi_tilde = _positive(phi), _positive(phi_tilde)
    residual = float(np.max(np.abs(op.matrix @ phi - lam * phi)) / np.max(phi))

    def embed(vector: np.ndarray) -> GridFunction:
        return GridFunction(np.concatenate([[0.0], vector, [0.0]]), nodes[0], nodes[-1], "dirichlet")

    phi_grid, phi_tilde_grid = embed(phi), embed(phi_tilde)
    product = phi_grid.with_values(phi_grid.values * phi_tilde_grid.values).integral()
    logger.info(f"Truncation ({nodes[0]:.4g}, {nodes[-1]:.4g}): lambda={lam:.8f} after {iterations} iterations")
    return TruncationEigen((float(nodes[0]), float(nodes[-1])), lam, lam_adj, phi_grid, phi_tilde_grid,
                           product, residual, backward, iterations)


def classify_criticality(table: Sequence[TruncationEigen], bounded: bool = False,
                         threshold: Optional[float] = None) -> Criticality:
    """Numeric proxy for the criticality class from nested truncations."""
    if len(table) < 3:
        raise InsufficientDataError("criticality needs eigenpairs on at least 3 truncations")
    if bounded:
        return Criticality.PRODUCT_CRITICAL
    threshold = threshold or settings.criticality_threshold
    integrals = [row.product_integral for row in table]
    if abs(integrals[-1] - integrals[-2]) <= threshold * abs(integrals[-2]):
        return Criticality.PRODUCT_CRITICAL
    if integrals[-1] > integrals[-2] > integrals[-3]:
        return Criticality.CRITICAL_NON_PRODUCT
    return Criticality.SUBCRITICAL_LIKE


def principal_eigenpair(Q: BranchingQuadruple, grid_size: Optional[int] = None,
                        truncations: Optional[Sequence[Tuple[float, float]]] = None,
                        tol: Optional[float] = None, max_iter: Optional[int] = None) -> SpectralTriple:
    """lambda_c, phi_c and phi~_c from the nested Dirichlet problems."""
    if Q.time_dependent:
        raise DomainError("principal_eigenpair needs a time-homogeneous quadruple")
    grid_size = grid_size or settings.grid_size
    truncations = list(truncations or Q.domain.truncations)
    for lo, hi in truncations:
        if not Q.domain.contains(lo, hi):
            raise DomainError(f"truncation ({lo}, {hi}) leaves the domain")
    tol = tol or settings.eigen_tol
    max_iter = max_iter or settings.eigen_max_iter
    grids = nested_grids(truncations, grid_size)
    Q.check_on_grid(grids[-1])

    table = ordered_map(lambda nodes: _solve_truncation(Q, nodes, tol, max_iter), grids)
    for smaller, larger in zip(table, table[1:]):
        if larger.lambda_c < smaller.lambda_c - 1e-9 * max(1.0, abs(smaller.lambda_c)):
            raise DiscretizationError(
                f"eigenvalue decreased from {smaller.lambda_c} to {larger.lambda_c} on a larger truncation"
            )

    final = table[-1]
    phi_tilde = final.phi_tilde.with_values(final.phi_tilde.values / final.product_integral)
    if len(table) >= 3:
        criticality = classify_criticality(table, Q.domain.bounded)
    else:
        criticality = Criticality.PRODUCT_CRITICAL if Q.domain.bounded else Criticality.SUBCRITICAL_LIKE
    triple = SpectralTriple(final.lambda_c, final.phi, phi_tilde, criticality, final.residual,
                            final.backward_error, tuple(table))
    logger.info(f"lambda_c={triple.lambda_c:.8f} ({criticality.value}), residual={triple.residual:.2e}")
    return triple


def override_residual(Q: BranchingQuadruple, lambda_c: float, phi: GridFunction) -> float:
    """||(L + beta - lambda) phi||_inf / ||phi||_inf on interior nodes of phi's grid."""
    applied = apply_operator(Q.L, phi.with_values(phi.values, "none"))
    nodes = phi.nodes[1:-1]
    residual = applied.interior + (Q.beta(nodes) - lambda_c) * phi.interior
    return float(np.max(np.abs(residual)) / phi.sup_norm())


def triple_from_overrides(Q: BranchingQuadruple, lambda_c: float, phi: Coefficient, phi_tilde: Coefficient,
                          grid_size: Optional[int] = None, criticality: Optional[Criticality] = None,
                          tolerance: float = 1e-3) -> SpectralTriple:
    """A triple from analytic (lambda_c, phi_c, phi~_c), accepted only if its residual is small."""
    grid_size = grid_size or settings.grid_size
    lo, hi = Q.domain.largest
    phi_grid = GridFunction.from_callable(phi, lo, hi, grid_size, "none")
    phi_grid = phi_grid.with_values(phi_grid.values / phi_grid.sup_norm())
    residual = override_residual(Q, lambda_c, phi_grid)
    if residual > tolerance:
        raise ConvergenceError("analytic override fails the eigen-residual check", residual)
    tilde_grid = GridFunction.from_callable(phi_tilde, lo, hi, grid_size, "none")
    product = phi_grid.with_values(phi_grid.values * tilde_grid.values).integral()
    tilde_grid = tilde_grid.with_values(tilde_grid.values / product)
    if criticality is None:
        criticality = Criticality.PRODUCT_CRITICAL if Q.domain.bounded else Criticality.SUBCRITICAL_LIKE
    return SpectralTriple(float(lambda_c), phi_grid, tilde_grid, criticality, residual)


def lambda_feynman_kac(Q: BranchingQuadruple, x: float, A: Tuple[float, float], t: float, paths: int,
                       dt: float, seed: int, boundary: str = "absorb", batch_paths: int = 5000,
                       n_resamples: int = 200) -> FeynmanKacEstimate:
    """(1/t) log E^x[exp(int_0^t beta(xi_s) ds); tau_A > t] by Euler-Maruyama paths."""
    lo, hi = A
    if not (lo < x < hi) or not Q.domain.contains(lo, hi):
        raise DomainError(f"start {x} must lie in A=({lo}, {hi}) inside the domain")
    sample_points = np.linspace(lo, hi, 101)
    relaxation = (hi - lo) ** 2 / (100.0 * max(float(np.max(Q.L.a(sample_points))), 1e-300))
    if dt >= relaxation:
        logger.warning(f"dt={dt} is not below the relaxation scale {relaxation:.3g} of A")
    steps = max(int(np.ceil(t / dt - 1e-9)), 1)
    dt = t / steps

    def run(indexed) -> np.ndarray:
        batch_index, block = indexed
        rng = batch_rng(seed, batch_index, FEYNMAN_KAC_STREAM)
        positions = np.full(len(block), float(x))
        integral = np.zeros(len(block))
        alive = np.ones(len(block), dtype=bool)
        for step in range(steps):
            now = step * dt
            index = np.nonzero(alive)[0]
            if index.size == 0:
                break
            integral[index] += Q.beta(positions[index], now) * dt
            moved, keep = move_particles(positions[index], Q.L, now, dt, rng, A, boundary)
            positions[index] = moved
            alive[index[~keep]] = False
        return np.where(alive, np.exp(integral), 0.0)

    weights = np.concatenate(ordered_map(run, list(enumerate(replicate_batches(paths, batch_paths)))))
    survival = float(np.mean(weights > 0))
    mean = float(np.mean(weights))
    if mean <= 0:
        logger.warning("all Feynman-Kac paths exited A; estimate is -inf")
        return FeynmanKacEstimate(-np.inf, np.inf, 0.0, True, paths, t)
    estimate = np.log(mean) / t

    def statistic(sample, axis):
        with np.errstate(divide="ignore"):
            return np.log(np.mean(sample, axis=axis)) / t

    result = bootstrap((weights,), statistic, n_resamples=n_resamples, vectorized=True, method="percentile",
                       random_state=batch_rng(seed, 0, FEYNMAN_KAC_STREAM + 1))
    standard_error = float(result.standard_error)
    if not np.isfinite(standard_error):
        standard_error = np.inf
    logger.info(f"Feynman-Kac estimate {estimate:.5f} +/- {standard_error:.5f} (survival {survival:.3f})")
    return FeynmanKacEstimate(float(estimate), standard_error, survival, False, paths, t)


def local_growth_rate(Q: BranchingQuadruple, mu: FiniteMeasure, B: Tuple[float, float], t_grid: Sequence[float],
                      grid_size: Optional[int] = None, dt: Optional[float] = None) -> GrowthRates:
    """(1/t) log <mu, S_t 1_B> along t_grid."""
    from src.services.pde import expectation_flow

    grid_size = grid_size or settings.grid_size
    lo, hi = Q.domain.largest
    if not (lo <= B[0] < B[1] <= hi):
        raise DomainError(f"B={B} must lie inside the truncation ({lo}, {hi})")
    indicator = GridFunction.from_callable(
        lambda x: ((x >= B[0]) & (x <= B[1])).astype(float), lo, hi, grid_size, "dirichlet")
    times = np.asarray(sorted(t_grid), dtype=float)
    flow = expectation_flow(Q, indicator, times, dt)
    pairings = np.array([mu.pair(snapshot) for snapshot in flow.snapshots])
    with np.errstate(divide="ignore"):
        rates = np.log(pairings) / times
    conclusive = True
    if times.size >= 2 and abs(rates[-1] - rates[-2]) > 0.05:
        conclusive = False
        trend = "increasing" if rates[-1] > rates[-2] else "decreasing"
        logger.warning(f"growth rate still {trend} at t={times[-1]} ({rates[-2]:.4f} -> {rates[-1]:.4f}); "
                       f"extend t_grid")
    return GrowthRates(times, pairings, rates, conclusive)
