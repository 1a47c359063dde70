"""
Elliptic operators, branching quadruples and the h-/H-transform calculus.

Operators act as L u = 1/2 (a u')' + b u' on a 1-D domain and are discretized by
second-order centered differences with a evaluated at half nodes.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple, Union

import numpy as np
from scipy import sparse

from src.config import settings
from src.exceptions import CoefficientError, DomainError, PositivityError
from src.utils.expression import Expression
from src.utils.grid import GridFunction

logger = logging.getLogger(__name__)

Interval = Tuple[float, float]


@dataclass(frozen=True)
class Coefficient:
    """A real coefficient c(x, t), optionally with analytic derivatives."""

    func: Callable
    time_dependent: bool = False
    dx: Optional[Callable] = None
    dt: Optional[Callable] = None
    label: str = ""

    def __call__(self, x, t: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.func(x, t), dtype=float), x.shape).astype(float)

    def derivative(self, x, t: float = 0.0, step: Optional[float] = None) -> np.ndarray:
        """Spatial derivative; centered differences when no analytic form is attached."""
        x = np.asarray(x, dtype=float)
        if self.dx is not None:
            return np.broadcast_to(np.asarray(self.dx(x, t), dtype=float), x.shape).astype(float)
        h = step or settings.fd_step
        return (self(x + h, t) - self(x - h, t)) / (2.0 * h)

    def time_derivative(self, x, t: float = 0.0, step: Optional[float] = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.time_dependent:
            return np.zeros_like(x)
        if self.dt is not None:
            return np.broadcast_to(np.asarray(self.dt(x, t), dtype=float), x.shape).astype(float)
        h = step or settings.fd_step
        return (self(x, t + h) - self(x, t - h)) / (2.0 * h)

    @classmethod
    def constant(cls, value: float) -> "Coefficient":
        value = float(value)
        return cls(lambda x, t: np.full_like(x, value), dx=lambda x, t: np.zeros_like(x), label=repr(value))

    @classmethod
    def parse(cls, text: str, parameters=None) -> "Coefficient":
        expression = Expression(str(text), parameters)
        return cls(expression, time_dependent=expression.depends_on_t, label=expression.text)

    def __repr__(self) -> str:
        return f"Coefficient({self.label or 'callable'})"


@dataclass(frozen=True)
class Domain1D:
    """An open interval D with an increasing sequence of truncations A_k."""

    left: float
    right: float
    truncations: Tuple[Interval, ...] = ()

    def __post_init__(self):
        if not self.left < self.right:
            raise DomainError(f"domain needs left < right, got ({self.left}, {self.right})")
        truncations = tuple((float(lo), float(hi)) for lo, hi in self.truncations)
        if not truncations:
            if not self.bounded:
                raise DomainError("an unbounded domain needs an explicit truncation sequence")
            truncations = ((float(self.left), float(self.right)),)
        for lo, hi in truncations:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise DomainError(f"invalid truncation ({lo}, {hi})")
            if lo < self.left or hi > self.right:
                raise DomainError(f"truncation ({lo}, {hi}) leaves the domain")
        for (lo, hi), (next_lo, next_hi) in zip(truncations, truncations[1:]):
            if not (next_lo < lo and hi < next_hi):
                raise DomainError(f"truncation ({lo}, {hi}) is not strictly inside ({next_lo}, {next_hi})")
        object.__setattr__(self, "truncations", truncations)

    @property
    def bounded(self) -> bool:
        return bool(np.isfinite(self.left) and np.isfinite(self.right))

    @property
    def largest(self) -> Interval:
        return self.truncations[-1]

    @property
    def exhausted(self) -> bool:
        """True when the last truncation is the (bounded) domain itself."""
        return self.bounded and self.largest == (float(self.left), float(self.right))

    def contains(self, left: float, right: float) -> bool:
        tol = 1e-12 * max(1.0, abs(left), abs(right))
        return left >= self.left - tol and right <= self.right + tol


@dataclass(frozen=True)
class EllipticOperator:
    """L = 1/2 (a u')' + b u' on a domain."""

    a: Coefficient
    b: Coefficient
    domain: Domain1D

    @property
    def time_dependent(self) -> bool:
        return self.a.time_dependent or self.b.time_dependent

    def ito_drift(self, x, t: float = 0.0, step: Optional[float] = None) -> np.ndarray:
        """Drift of the diffusion generated by L: b + a'/2."""
        return self.b(x, t) + 0.5 * self.a.derivative(x, t, step)


@dataclass(frozen=True)
class BranchingQuadruple:
    """The model (L, beta, alpha; D)."""

    L: EllipticOperator
    beta: Coefficient
    alpha: Coefficient
    domain: Domain1D = None

    def __post_init__(self):
        if self.domain is None:
            object.__setattr__(self, "domain", self.L.domain)

    @property
    def time_dependent(self) -> bool:
        return self.L.time_dependent or self.beta.time_dependent or self.alpha.time_dependent

    def check_on_grid(self, nodes: np.ndarray, t: float = 0.0) -> None:
        interior = np.asarray(nodes)[1:-1]
        alpha = self.alpha(interior, t)
        if np.any(~np.isfinite(alpha)) or np.any(alpha <= 0):
            raise CoefficientError("alpha must be positive on the interior")
        if not np.isfinite(np.max(self.beta(interior, t))):
            raise CoefficientError("beta must be bounded above on the grid")


@dataclass(frozen=True)
class SpaceTimeWeight:
    """A positive space-time weight H(x, t) with its derivatives.

    A weight built by :meth:`ground_state` is e^{-rate t} profile(x) with the
    profile on a grid; its generator ratio (L H)/H is then taken from the same
    stencil that discretizes L.
    """

    value: Callable
    grad_x: Callable
    d_t: Callable
    grad_xx: Optional[Callable] = None
    profile: Optional[GridFunction] = None
    rate: float = 0.0
    time_dependent: bool = False
    _log_grad: Optional[Callable] = field(default=None, repr=False)

    def __call__(self, x, t: float = 0.0) -> np.ndarray:
        return np.asarray(self.value(np.asarray(x, dtype=float), t), dtype=float)

    @property
    def separable(self) -> bool:
        return self.profile is not None

    @classmethod
    def constant(cls, level: float = 1.0) -> "SpaceTimeWeight":
        level = float(level)
        zero = lambda x, t: np.zeros_like(np.asarray(x, dtype=float))
        return cls(lambda x, t: np.full_like(np.asarray(x, dtype=float), level), zero, zero, zero)

    @classmethod
    def from_callables(cls, value: Callable, grad_x: Optional[Callable] = None,
                       d_t: Optional[Callable] = None, grad_xx: Optional[Callable] = None,
                       time_dependent: bool = True) -> "SpaceTimeWeight":
        step = settings.fd_step
        if grad_x is None:
            grad_x = lambda x, t: (value(x + step, t) - value(x - step, t)) / (2 * step)
        if d_t is None:
            d_t = lambda x, t: (value(x, t + step) - value(x, t - step)) / (2 * step)
        return cls(value, grad_x, d_t, grad_xx, time_dependent=time_dependent)

    @classmethod
    def ground_state(cls, profile: GridFunction, rate: float) -> "SpaceTimeWeight":
        """H(x, t) = e^{-rate t} profile(x)."""
        if np.any(profile.interior <= 0):
            raise PositivityError("ground-state profile must be positive on interior nodes")
        gradient = profile.gradient()
        curvature = gradient.gradient()
        nodes = profile.nodes
        inner = nodes[1:-1]
        log_grad = gradient.interior / profile.interior
        decay = lambda t: np.exp(-rate * t)
        return cls(
            value=lambda x, t: decay(t) * profile(x),
            grad_x=lambda x, t: decay(t) * np.interp(x, nodes, gradient.values),
            d_t=lambda x, t: -rate * decay(t) * profile(x),
            grad_xx=lambda x, t: decay(t) * np.interp(x, nodes, curvature.values),
            profile=profile,
            rate=float(rate),
            time_dependent=rate != 0.0,
            _log_grad=lambda x, t: np.interp(x, inner, log_grad),
        )

    def log_grad(self, x, t: float = 0.0) -> np.ndarray:
        """H_x / H."""
        x = np.asarray(x, dtype=float)
        if self._log_grad is not None:
            return self._log_grad(x, t)
        return np.asarray(self.grad_x(x, t), dtype=float) / self(x, t)

    def second_derivative(self, x, t: float = 0.0) -> np.ndarray:
        if self.grad_xx is not None:
            return np.asarray(self.grad_xx(x, t), dtype=float)
        step = settings.fd_step
        return (self.grad_x(x + step, t) - self.grad_x(x - step, t)) / (2 * step)

    def generator_ratio(self, L: EllipticOperator, x, t: float = 0.0) -> np.ndarray:
        """(L H)/H evaluated at x."""
        x = np.asarray(x, dtype=float)
        if self.profile is not None:
            applied = apply_operator(L, self.profile, t)
            inner = self.profile.nodes[1:-1]
            return np.interp(x, inner, applied.interior / self.profile.interior)
        value = self(x, t)
        grad = np.asarray(self.grad_x(x, t), dtype=float)
        lh = 0.5 * L.a.derivative(x, t) * grad + 0.5 * L.a(x, t) * self.second_derivative(x, t) + L.b(x, t) * grad
        return lh / value

    def times(self, other: "SpaceTimeWeight") -> "SpaceTimeWeight":
        """The product weight H1 H2."""
        grad_xx = None
        if self.grad_xx is not None and other.grad_xx is not None:
            grad_xx = lambda x, t: (self.grad_xx(x, t) * other(x, t) + 2 * self.grad_x(x, t) * other.grad_x(x, t)
                                    + self(x, t) * other.grad_xx(x, t))
        return SpaceTimeWeight(
            value=lambda x, t: self(x, t) * other(x, t),
            grad_x=lambda x, t: self.grad_x(x, t) * other(x, t) + self(x, t) * other.grad_x(x, t),
            d_t=lambda x, t: self.d_t(x, t) * other(x, t) + self(x, t) * other.d_t(x, t),
            grad_xx=grad_xx,
            time_dependent=self.time_dependent or other.time_dependent,
        )


@dataclass(frozen=True)
class AdjointOperator:
    """Formal adjoint 1/2 (a v')' - b v' + (beta - b') v and its discrete form."""

    operator: EllipticOperator
    potential: Coefficient
    matrix: sparse.csc_matrix
    nodes: np.ndarray

    def nondivergence_drift(self, x, t: float = 0.0) -> np.ndarray:
        """First-order coefficient when written as 1/2 a v'' + (...) v'."""
        return 0.5 * self.operator.a.derivative(x, t) + self.operator.b(x, t)

    def apply(self, v: GridFunction) -> GridFunction:
        out = np.zeros(v.size)
        out[1:-1] = self.matrix @ v.interior
        return v.with_values(out)


def stencil(L: EllipticOperator, nodes: np.ndarray, t: float = 0.0, potential=None):
    """Lower, diagonal and upper bands of L (+ potential) on the interior nodes."""
    nodes = np.asarray(nodes, dtype=float)
    h = nodes[1] - nodes[0]
    inner = nodes[1:-1]
    a_plus = L.a(inner + 0.5 * h, t)
    a_minus = L.a(inner - 0.5 * h, t)
    if np.any(a_plus < 0) or np.any(a_minus < 0) or not np.all(np.isfinite(a_plus + a_minus)):
        raise CoefficientError("diffusion coefficient must be nonnegative and finite inside the domain")
    b = L.b(inner, t)
    lower = a_minus / (2 * h * h) - b / (2 * h)
    upper = a_plus / (2 * h * h) + b / (2 * h)
    diag = -(a_plus + a_minus) / (2 * h * h)
    if potential is not None:
        diag = diag + (potential(inner, t) if callable(potential) else potential)
    return lower, diag, upper


def interior_matrix(L: EllipticOperator, nodes: np.ndarray, t: float = 0.0, potential=None) -> sparse.csc_matrix:
    """Tridiagonal Dirichlet matrix of L (+ potential) acting on interior unknowns."""
    lower, diag, upper = stencil(L, nodes, t, potential)
    return sparse.diags([lower[1:], diag, upper[:-1]], [-1, 0, 1], format="csc")


def _check_inside(L: EllipticOperator, u: GridFunction) -> None:
    if not L.domain.contains(u.left, u.right):
        raise DomainError(f"grid [{u.left}, {u.right}] lies outside the domain ({L.domain.left}, {L.domain.right})")


def apply_operator(L: EllipticOperator, u: GridFunction, t: float = 0.0) -> GridFunction:
    """L u by centered differences; boundary rows follow u's boundary tag."""
    _check_inside(L, u)
    lower, diag, upper = stencil(L, u.nodes, t)
    values = u.values
    out = np.zeros(u.size)
    out[1:-1] = lower * values[:-2] + diag * values[1:-1] + upper * values[2:]
    if u.boundary == "none":
        out[0] = 2 * out[1] - out[2]
        out[-1] = 2 * out[-2] - out[-3]
    return u.with_values(out)


def h_transform_operator(L: EllipticOperator, h: Union[GridFunction, Coefficient]) -> EllipticOperator:
    """L^h_0 = L + a (h'/h) d/dx, which has no zeroth-order part."""
    if isinstance(h, GridFunction):
        weight = SpaceTimeWeight.ground_state(h, 0.0)
        log_grad = weight.log_grad
        time_dependent = False
    else:
        lo, hi = L.domain.largest
        sample_points = np.linspace(lo, hi, settings.grid_size)[1:-1]
        if np.any(h(sample_points) <= 0):
            raise PositivityError("h must be positive on the interior")
        log_grad = lambda x, t: h.derivative(x, t) / h(x, t)
        time_dependent = h.time_dependent
    a, b = L.a, L.b
    drift = Coefficient(lambda x, t: b(x, t) + a(x, t) * log_grad(x, t),
                        time_dependent=time_dependent or L.time_dependent,
                        label=f"{b.label} + a h'/h")
    return EllipticOperator(a, drift, L.domain)


def H_transform_quadruple(Q: BranchingQuadruple, H: SpaceTimeWeight) -> BranchingQuadruple:
    """The quadruple of X^H = H X: (L + a H_x/H d/dx, beta + LH/H + H_t/H, alpha H; D)."""
    lo, hi = Q.domain.largest
    sample_points = np.linspace(lo, hi, settings.grid_size)[1:-1]
    for t in (0.0, 1.0):
        if np.any(H(sample_points, t) <= 0):
            raise PositivityError("H must be positive on the interior")

    L, beta, alpha = Q.L, Q.beta, Q.alpha
    moving = H.time_dependent and not H.separable
    drift = Coefficient(lambda x, t: L.b(x, t) + L.a(x, t) * H.log_grad(x, t),
                        time_dependent=L.time_dependent or moving, label="b + a H_x/H")
    if H.separable and not L.time_dependent:
        ratio = H.generator_ratio(L, H.profile.nodes, 0.0)
        inner = H.profile.nodes[1:-1]
        inner_ratio = ratio[1:-1]
        generator = lambda x, t: np.interp(x, inner, inner_ratio)
    else:
        generator = lambda x, t: H.generator_ratio(L, x, t)
    if H.separable:
        time_ratio = lambda x, t: np.full_like(x, -H.rate)
    else:
        time_ratio = lambda x, t: np.asarray(H.d_t(x, t), dtype=float) / H(x, t)
    potential = Coefficient(
        lambda x, t: beta(x, t) + generator(x, t) + time_ratio(x, t),
        time_dependent=beta.time_dependent or L.time_dependent or moving,
        label="beta + LH/H + H_t/H",
    )
    variance = Coefficient(lambda x, t: alpha(x, t) * H(x, t),
                           time_dependent=alpha.time_dependent or H.time_dependent,
                           label="alpha H")
    transformed = EllipticOperator(L.a, drift, L.domain)
    logger.debug("H-transformed quadruple built")
    return BranchingQuadruple(transformed, potential, variance, Q.domain)


def adjoint_operator(L: EllipticOperator, beta: Coefficient, nodes: np.ndarray, t: float = 0.0) -> AdjointOperator:
    """Formal adjoint of L + beta; the discrete adjoint is the transposed stencil matrix."""
    nodes = np.asarray(nodes, dtype=float)
    matrix = interior_matrix(L, nodes, t, beta).transpose().tocsc()
    b = L.b
    step = nodes[1] - nodes[0]
    formal = EllipticOperator(L.a, Coefficient(lambda x, s: -b(x, s), time_dependent=b.time_dependent),
                              L.domain)
    potential = Coefficient(lambda x, s: beta(x, s) - b.derivative(x, s, step),
                            time_dependent=beta.time_dependent or b.time_dependent)
    return AdjointOperator(formal, potential, matrix, nodes)


def conjugation_check(Q: BranchingQuadruple, phi: GridFunction, lam: float, u: GridFunction,
                      window: float = 0.8) -> float:
    """max |L_0^phi u - phi^{-1} (L + beta - lam)(phi u)| over the central ``window`` of the grid."""
    if phi.size != u.size or not np.isclose(phi.left, u.left) or not np.isclose(phi.right, u.right):
        raise DomainError("phi and u must share a grid")
    nodes = phi.nodes
    lhs = apply_operator(h_transform_operator(Q.L, phi), u).values
    phi_u = phi.with_values(phi.values * u.values)
    rhs = np.zeros(phi.size)
    inner = slice(1, -1)
    rhs[inner] = (apply_operator(Q.L, phi_u).values[inner]
                  + (Q.beta(nodes[inner]) - lam) * phi_u.values[inner]) / phi.values[inner]
    centre, half = 0.5 * (phi.left + phi.right), 0.5 * window * (phi.right - phi.left)
    mask = np.zeros(phi.size, dtype=bool)
    mask[inner] = np.abs(nodes[inner] - centre) <= half
    return float(np.max(np.abs(lhs[mask] - rhs[mask])))
