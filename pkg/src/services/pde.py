"""
Expectation semigroup, log-Laplace equation and the moment formulas.

Linear parts are integrated by Crank-Nicolson (banded solves) after a Rannacher
start; the semilinear equation u_t = (L + beta) u - alpha u^2 is Strang split with
the exact per-node solution of u' = -alpha u^2 as the nonlinear substep.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import simpson
from scipy.linalg import solve_banded

from src.config import settings
from src.exceptions import DiscretizationError, DomainError, RegimeError, SolverError, TruncationError
from src.services.operators import (
    BranchingQuadruple,
    Coefficient,
    EllipticOperator,
    interior_matrix,
    stencil,
)
from src.services.spectral import SpectralTriple
from src.utils.ensemble import ordered_map
from src.utils.grid import GridFunction, nested_grids
from src.utils.measures import FiniteMeasure

logger = logging.getLogger(__name__)

RANNACHER_STEPS = 2
NEGATIVE_TOL = 1e-8


@dataclass(frozen=True)
class FlowResult:
    times: np.ndarray
    snapshots: List[GridFunction]
    diagnostics: dict = field(default_factory=dict)

    @property
    def final(self) -> GridFunction:
        return self.snapshots[-1]


@dataclass(frozen=True)
class VarianceFormula:
    """2 int_0^t e^{-2 lambda s} <mu, S_s[alpha phi^2]> ds, its t = infinity limit and closed bound."""

    value: float
    bound: float
    limit: Optional[float] = None


@dataclass(frozen=True)
class TestIntegral:
    """Quadrature of the fourth-moment integral behind the Chebyshev bound."""
    __test__ = False

    value: float
    bound: float
    constant: float

    def tail_bound(self, epsilon: float) -> float:
        return self.bound / (epsilon * epsilon)


class SplitStepper:
    """One Dirichlet grid; steps u_t = (L + beta) u - alpha u^2 with alpha switched off if linear."""

    def __init__(self, Q: BranchingQuadruple, nodes: np.ndarray, nonlinear: bool = True):
        self.Q = Q
        self.nodes = np.asarray(nodes, dtype=float)
        self.inner = self.nodes[1:-1]
        self.nonlinear = nonlinear
        linear_varies = Q.L.time_dependent or Q.beta.time_dependent
        self._bands = None if linear_varies else stencil(Q.L, self.nodes, 0.0, Q.beta)
        self._alpha = None if Q.alpha.time_dependent else Q.alpha(self.inner)
        if nonlinear:
            alpha = self.alpha(0.0)
            if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
                raise SolverError("alpha must be nonnegative and finite on the grid")

    def bands(self, t: float):
        if self._bands is not None:
            return self._bands
        return stencil(self.Q.L, self.nodes, t, self.Q.beta)

    def alpha(self, t: float) -> np.ndarray:
        return self._alpha if self._alpha is not None else self.Q.alpha(self.inner, t)

    def linear(self, u: np.ndarray, t: float, dt: float, theta: float) -> np.ndarray:
        """theta-scheme step of u_t = (L + beta) u; theta = 1/2 is Crank-Nicolson."""
        lower, diag, upper = self.bands(t + 0.5 * dt)
        applied = diag * u
        applied[1:] += lower[1:] * u[:-1]
        applied[:-1] += upper[:-1] * u[1:]
        ab = np.zeros((3, u.size))
        ab[0, 1:] = -theta * dt * upper[:-1]
        ab[1] = 1.0 - theta * dt * diag
        ab[2, :-1] = -theta * dt * lower[1:]
        return solve_banded((1, 1), ab, u + (1.0 - theta) * dt * applied)

    def quench(self, u: np.ndarray, t: float, tau: float) -> np.ndarray:
        """Exact flow of u' = -alpha u^2 over tau.

        This is the logistic substep u' = beta u - alpha u^2 with beta moved into the linear
        step, whose stencil already carries it. The Strang split stays second order.
        """
        return u / (1.0 + self.alpha(t) * u * tau)

    def step(self, u: np.ndarray, t: float, dt: float, theta: float = 0.5) -> np.ndarray:
        if self.nonlinear:
            u = self.quench(u, t, 0.5 * dt)
        u = self.linear(u, t, dt, theta)
        if self.nonlinear:
            u = self.quench(u, t + dt, 0.5 * dt)
        return u


def default_dt(spacing: float, horizon: float) -> float:
    return min(spacing, 1e-3 * horizon) if horizon > 0 else spacing


def _integrate(stepper: SplitStepper, u0: np.ndarray, times: Sequence[float], dt: float,
               nonnegative: bool) -> Tuple[List[np.ndarray], dict]:
    if dt <= 0:
        raise SolverError("dt must be positive")
    u = np.array(u0, dtype=float)
    now, done = 0.0, 0
    out = []
    clipped = 0
    for target in times:
        span = target - now
        steps = int(np.ceil(span / dt - 1e-9)) if span > 0 else 0
        tau = span / steps if steps else 0.0
        for _ in range(steps):
            if done < RANNACHER_STEPS:
                u = stepper.step(u, now, 0.5 * tau, theta=1.0)
                u = stepper.step(u, now + 0.5 * tau, 0.5 * tau, theta=1.0)
            else:
                u = stepper.step(u, now, tau)
            now += tau
            done += 1
            if not np.all(np.isfinite(u)):
                raise SolverError(f"solution blew up at t={now:.4g}; is beta bounded above on the grid?")
            if nonnegative:
                floor = np.min(u)
                if floor < 0:
                    if floor < -NEGATIVE_TOL * max(np.max(np.abs(u)), 1e-300):
                        raise SolverError(f"solution lost nonnegativity at t={now:.4g} (min {floor:.3e})")
                    clipped += int(np.sum(u < 0))
                    u = np.maximum(u, 0.0)
        now = target
        out.append(u.copy())
    return out, {"steps": done, "dt": dt, "clipped": clipped}


def _initial(g: GridFunction, nodes: np.ndarray) -> np.ndarray:
    if np.isclose(g.left, nodes[0]) and np.isclose(g.right, nodes[-1]) and g.size == nodes.size:
        return np.array(g.interior)
    return np.asarray(g(nodes[1:-1]), dtype=float)


def _solve_on(Q: BranchingQuadruple, g: GridFunction, nodes: np.ndarray, times: Sequence[float],
              dt: Optional[float], nonlinear: bool) -> FlowResult:
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or np.any(times < 0):
        raise SolverError("snapshot times must be nonnegative and sorted")
    if not Q.domain.contains(nodes[0], nodes[-1]):
        raise DomainError(f"grid [{nodes[0]}, {nodes[-1]}] leaves the domain")
    step = dt if dt is not None else default_dt(nodes[1] - nodes[0], float(times[-1]) if times.size else 0.0)
    u0 = _initial(g, nodes)
    stepper = SplitStepper(Q, nodes, nonlinear)
    states, diagnostics = _integrate(stepper, u0, times, step, nonnegative=bool(np.min(u0) >= 0))
    snapshots = [GridFunction(np.concatenate([[0.0], state, [0.0]]), nodes[0], nodes[-1], "dirichlet")
                 for state in states]
    return FlowResult(times, snapshots, diagnostics)


def expectation_flow(Q: BranchingQuadruple, g: GridFunction, times: Sequence[float],
                     dt: Optional[float] = None) -> FlowResult:
    """S_s g at every s in ``times`` on g's grid."""
    return _solve_on(Q, g, g.nodes, sorted(times), dt, nonlinear=False)


def expectation_semigroup(Q: BranchingQuadruple, g: GridFunction, t: float, dt: Optional[float] = None) -> GridFunction:
    """S_t g with E^mu <X_t, g> = <mu, S_t g>."""
    if t < 0:
        raise SolverError("t must be nonnegative")
    return expectation_flow(Q, g, [t], dt).final


def loglaplace_solve(Q: BranchingQuadruple, g: GridFunction, t: float, dt: Optional[float] = None,
                     truncations: Optional[Sequence[Tuple[float, float]]] = None,
                     mu: Optional[FiniteMeasure] = None, grid_size: Optional[int] = None,
                     times: Optional[Sequence[float]] = None) -> FlowResult:
    """Minimal nonnegative solution of u_t = L u + beta u - alpha u^2, u(0) = g, on the largest truncation."""
    if t < 0:
        raise SolverError("t must be nonnegative")
    if np.min(g.values) < 0:
        raise SolverError("initial datum g must be nonnegative")
    truncations = list(truncations or Q.domain.truncations)
    largest = truncations[-1]
    if grid_size is None:
        spans_largest = np.isclose(g.left, largest[0]) and np.isclose(g.right, largest[1])
        grid_size = g.size if spans_largest else settings.grid_size
    times = sorted(set(times or []) | {t})
    grids = nested_grids(truncations, grid_size)
    results = ordered_map(lambda nodes: _solve_on(Q, g, nodes, times, dt, nonlinear=True), grids)

    final = results[-1]
    parent = final.final
    for smaller, larger in zip(results, results[1:]):
        excess = float(np.max(smaller.final.extend(larger.final).values - larger.final.values))
        scale = max(parent.sup_norm(), 1e-300)
        if excess > settings.truncation_tol * scale:
            raise DiscretizationError(
                f"truncation solutions not monotone (excess {excess:.2e}); refine the grid or the step"
            )
        if excess > 1e-8 * scale:
            logger.warning(f"truncation monotonicity slack {excess:.2e} within tolerance")

    exhausted = Q.domain.bounded and tuple(largest) == (float(Q.domain.left), float(Q.domain.right))
    if len(results) >= 2 and not exhausted:
        inner, outer = results[-2].final.extend(parent), parent
        if mu is not None:
            a, b = mu.pair(inner), mu.pair(outer)
        else:
            a, b = inner.sup_norm(), outer.sup_norm()
        if abs(b - a) > settings.truncation_tol * max(abs(b), 1e-300):
            raise TruncationError(
                f"solutions on the two largest truncations differ by {abs(b - a):.3e}; enlarge the truncations"
            )
    logger.info(f"log-Laplace solve to t={t:g} on {len(grids)} truncations ({final.diagnostics['steps']} steps)")
    return final


def _reverse(c: Coefficient, t: float) -> Coefficient:
    if not c.time_dependent:
        return c
    return Coefficient(lambda x, s: c(x, t - s), time_dependent=True,
                       dx=lambda x, s: c.derivative(x, t - s), label=f"{c.label} reversed")


def backward_solve(Q: BranchingQuadruple, g: GridFunction, r: float, t: float, dt: Optional[float] = None,
                   truncations: Optional[Sequence[Tuple[float, float]]] = None,
                   mu: Optional[FiniteMeasure] = None, grid_size: Optional[int] = None) -> GridFunction:
    """u(., r; t, g) for time-dependent coefficients, via the time-reversed forward equation."""
    if not r < t:
        raise SolverError(f"backward solve needs r < t, got r={r}, t={t}")
    L = EllipticOperator(_reverse(Q.L.a, t), _reverse(Q.L.b, t), Q.L.domain)
    reversed_q = BranchingQuadruple(L, _reverse(Q.beta, t), _reverse(Q.alpha, t), Q.domain)
    return loglaplace_solve(reversed_q, g, t - r, dt, truncations, mu, grid_size).final


def laplace_functional(Q: BranchingQuadruple, mu: FiniteMeasure, g: GridFunction, t: float,
                       dt: Optional[float] = None, grid_size: Optional[int] = None) -> float:
    """E^mu exp(-<X_t, g>) = exp(-<mu, u(., t)>)."""
    if mu.total_mass == 0 or np.max(g.values) == 0:
        return 1.0
    if t == 0:
        return float(np.exp(-mu.pair(g)))
    if Q.time_dependent:
        u = backward_solve(Q, g, 0.0, t, dt, mu=mu, grid_size=grid_size)
    else:
        u = loglaplace_solve(Q, g, t, dt, mu=mu, grid_size=grid_size).final
    return float(np.exp(-mu.pair(u)))


def _simpson_nodes(t: float, count: int) -> np.ndarray:
    count = max(count, 3)
    return np.linspace(0.0, t, count + 1 - count % 2)


def _require_growth(triple: SpectralTriple) -> None:
    if triple.lambda_c <= 0:
        raise RegimeError("lambda_c > 0", f"lambda_c = {triple.lambda_c:.6g}")


def variance_weighted_mass(Q: BranchingQuadruple, triple: SpectralTriple, mu: FiniteMeasure, t: float,
                           dt: Optional[float] = None, nodes: int = 41,
                           limit_horizon: Optional[float] = None) -> VarianceFormula:
    """Var ||X^H_t|| for H = e^{-lambda_c t} phi_c, with its t = infinity limit and closed bound."""
    _require_growth(triple)
    lam, phi = triple.lambda_c, triple.phi_c
    weighted = phi.with_values(Q.alpha(phi.nodes) * phi.values ** 2)
    bound = 2.0 * float(np.max(Q.alpha(phi.nodes[1:-1]) * phi.interior)) * mu.pair(phi) / lam
    if t == 0:
        return VarianceFormula(0.0, bound, None)
    horizon = max(limit_horizon or 0.0, t)
    grid = _simpson_nodes(t, nodes)
    times = np.union1d(grid, _simpson_nodes(horizon, nodes)) if limit_horizon else grid
    flow = expectation_flow(Q, weighted, times, dt)
    pairings = np.array([mu.pair(snapshot) for snapshot in flow.snapshots])
    integrand = np.exp(-2.0 * lam * flow.times) * pairings
    within = flow.times <= t + 1e-12
    value = 2.0 * float(simpson(integrand[within], x=flow.times[within]))
    limit = None
    if limit_horizon:
        long_run = _simpson_nodes(horizon, nodes)
        mask = np.isin(flow.times, long_run)
        limit = 2.0 * (float(simpson(integrand[mask], x=flow.times[mask])) + integrand[-1] / lam)
    logger.info(f"variance formula at t={t:g}: {value:.6g} (bound {bound:.6g})")
    return VarianceFormula(value, bound, limit)


def transformed_semigroup(Q: BranchingQuadruple, triple: SpectralTriple, g: GridFunction, T: float,
                          dt: Optional[float] = None) -> GridFunction:
    """S^H_T g = e^{-lambda_c T} phi^{-1} S_T(phi g), with end values carried from the neighbours."""
    phi = triple.phi_c
    values = expectation_semigroup(Q, phi.with_values(phi.values * _initial_full(g, phi)), T, dt).values
    ratio = np.zeros(phi.size)
    ratio[1:-1] = values[1:-1] / phi.interior
    ratio[0], ratio[-1] = ratio[1], ratio[-2]
    return phi.with_values(np.exp(-triple.lambda_c * T) * ratio, "none")


def _initial_full(g: GridFunction, on: GridFunction) -> np.ndarray:
    if g.size == on.size and np.isclose(g.left, on.left) and np.isclose(g.right, on.right):
        return np.array(g.values)
    return np.asarray(g(on.nodes), dtype=float)


def variance_test_integral(Q: BranchingQuadruple, triple: SpectralTriple, nu: FiniteMeasure, g: GridFunction,
                           T: float, t_offset: float, dt: Optional[float] = None, nodes: int = 21) -> TestIntegral:
    """2 int_0^T e^{-lambda(t+s)} <nu S^H_t, S^H_s[alpha phi (S^H_{T-s} g)^2]> ds and its closed bound."""
    _require_growth(triple)
    lam, phi = triple.lambda_c, triple.phi_c
    alpha_phi = float(np.max(Q.alpha(phi.nodes[1:-1]) * phi.interior))
    g_norm = g.sup_norm()
    constant = 18.0 * alpha_phi * g_norm ** 2
    bound = constant * nu.total_mass / (lam * np.exp(lam * t_offset))
    if g_norm == 0 or nu.total_mass == 0:
        return TestIntegral(0.0, bound, constant)

    mu = nu.reweight(lambda x: np.divide(1.0, phi(x), out=np.zeros_like(x), where=phi(x) > 0))
    s_nodes = _simpson_nodes(T, nodes)
    phi_g = phi.with_values(phi.values * _initial_full(g, phi))
    inner_flow = expectation_flow(Q, phi_g, T - s_nodes[::-1], dt)
    inner = inner_flow.snapshots[::-1]
    alpha_values = Q.alpha(phi.nodes)

    def outer(index: int) -> float:
        source = phi.with_values(alpha_values * inner[index].values ** 2)
        spread = expectation_semigroup(Q, source, t_offset + s_nodes[index], dt)
        return mu.pair(spread)

    pairings = np.array(ordered_map(outer, range(s_nodes.size)))
    integrand = np.exp(-2.0 * lam * (t_offset + T)) * pairings
    value = 2.0 * float(simpson(integrand, x=s_nodes))
    logger.info(f"test integral at t={t_offset:g}, T={T:g}: {value:.6g} (bound {bound:.6g})")
    return TestIntegral(value, bound, constant)


def invariant_density_check(L0: EllipticOperator, phi: GridFunction, phi_tilde: GridFunction) -> float:
    """||(L0)^* (phi phi~)||_inf on interior nodes, with the discrete adjoint (transposed stencil)."""
    if phi.size != phi_tilde.size or not np.isclose(phi.left, phi_tilde.left):
        raise DomainError("phi and phi_tilde must share a grid")
    density = phi.values * phi_tilde.values
    matrix = interior_matrix(L0, phi.nodes)
    return float(np.max(np.abs(matrix.transpose() @ density[1:-1])))
