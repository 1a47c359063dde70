"""
Run configuration schemas.
Pydantic models for model, simulation and experiment documents.
"""
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.exceptions import DomainError
from src.services.operators import BranchingQuadruple, Coefficient, Domain1D, EllipticOperator
from src.utils.ensemble import stable_hash
from src.utils.expression import Expression
from src.utils.grid import GridFunction
from src.utils.measures import FiniteMeasure

EXPERIMENTS = (
    "martingale", "variance", "lln", "vague", "extinction", "scaling", "consistency", "chebyshev", "laplace",
)


class InitialMeasureSpec(BaseModel):
    """Initial measure: atoms (positions, masses) or a density expression in x."""
    kind: Literal["atoms", "density"] = "atoms"
    positions: List[float] = Field(default_factory=list)
    masses: Optional[List[float]] = None
    density: Optional[str] = None

    @model_validator(mode="after")
    def _check_shape(self):
        if self.kind == "density" and not self.density:
            raise ValueError("a density measure needs a density expression")
        if self.kind == "atoms" and self.masses is not None and len(self.masses) != len(self.positions):
            raise ValueError("positions and masses differ in length")
        return self

    def build(self, left: float, right: float, size: int) -> FiniteMeasure:
        if self.kind == "density":
            return FiniteMeasure(density=GridFunction.from_callable(Expression(self.density), left, right, size))
        positions = np.asarray(self.positions, dtype=float)
        if np.any(positions <= left) or np.any(positions >= right):
            raise DomainError(f"initial atoms must lie inside ({left}, {right})")
        return FiniteMeasure.atoms(positions, self.masses)


class TestFunctionSpec(BaseModel):
    """A test function f in C_c^+ on the model's truncation."""
    __test__ = False

    kind: Literal["indicator", "smoothed-indicator", "expression", "ground-state", "constant"] = "smoothed-indicator"
    left: Optional[float] = None
    right: Optional[float] = None
    width: float = Field(default=0.02, gt=0, description="Smoothing length of a smoothed indicator")
    expression: Optional[str] = None
    value: float = 1.0

    @property
    def name(self) -> str:
        if self.kind in ("indicator", "smoothed-indicator"):
            return f"{self.kind}({self.left:g},{self.right:g})"
        if self.kind == "expression":
            return f"expr({self.expression})"
        if self.kind == "constant":
            return f"const({self.value:g})"
        return "ground-state"

    @model_validator(mode="after")
    def _check_fields(self):
        if self.kind in ("indicator", "smoothed-indicator"):
            if self.left is None or self.right is None or not self.left < self.right:
                raise ValueError("an indicator needs left < right")
        if self.kind == "expression" and not self.expression:
            raise ValueError("an expression test function needs an expression")
        return self

    def build(self, left: float, right: float, size: int, phi: Optional[GridFunction] = None) -> GridFunction:
        if self.kind == "ground-state":
            if phi is None:
                raise DomainError("a ground-state test function needs phi_c")
            return phi
        if self.kind == "indicator":
            func = lambda x: ((x >= self.left) & (x <= self.right)).astype(float)
        elif self.kind == "smoothed-indicator":
            func = lambda x: 0.5 * (np.tanh((x - self.left) / self.width) - np.tanh((x - self.right) / self.width))
        elif self.kind == "expression":
            func = Expression(self.expression)
        else:
            func = lambda x: np.full_like(x, self.value)
        return GridFunction.from_callable(func, left, right, size)


class ModelConfig(BaseModel):
    """A branching quadruple given by coefficient expressions."""
    name: str = Field(..., min_length=1)
    a: str = Field(..., description="Diffusion coefficient a(x, t) of 1/2 (a u')'")
    b: str = Field(default="0", description="First-order coefficient b(x, t)")
    beta: str = Field(..., description="Branching mean rate beta(x, t)")
    alpha: str = Field(..., description="Branching variance rate alpha(x, t) > 0")
    parameters: Dict[str, float] = Field(default_factory=dict)
    domain: Tuple[float, float]
    truncations: List[Tuple[float, float]] = Field(default_factory=list)
    initial: InitialMeasureSpec = Field(default_factory=InitialMeasureSpec)
    lambda_override: Optional[float] = None
    phi_override: Optional[str] = None
    phi_tilde_override: Optional[str] = None
    expected_lambda: Optional[float] = None
    provenance: Optional[str] = None
    product_critical: Optional[bool] = None

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "name": "wright-fisher",
                "a": "x*(1-x)",
                "b": "x-0.5",
                "beta": "gamma",
                "alpha": "gamma",
                "parameters": {"gamma": 2.0},
                "domain": [0.0, 1.0],
                "truncations": [[0.2, 0.8], [0.1, 0.9], [0.05, 0.95], [0.0, 1.0]],
                "initial": {"kind": "atoms", "positions": [0.5]},
            }
        }
    )

    @field_validator("domain")
    @classmethod
    def _ordered(cls, value):
        if not value[0] < value[1]:
            raise ValueError("domain endpoints must be ordered")
        return value

    @model_validator(mode="after")
    def _parse_expressions(self):
        for text in (self.a, self.b, self.beta, self.alpha, self.phi_override, self.phi_tilde_override):
            if text is not None:
                Expression(text, self.parameters)
        if (self.phi_override is None) != (self.lambda_override is None):
            raise ValueError("lambda_override and phi_override go together")
        return self

    @property
    def has_overrides(self) -> bool:
        return self.lambda_override is not None

    def coefficient(self, text: str) -> Coefficient:
        return Coefficient.parse(text, self.parameters)

    def quadruple(self) -> BranchingQuadruple:
        domain = Domain1D(self.domain[0], self.domain[1], tuple(tuple(pair) for pair in self.truncations))
        L = EllipticOperator(self.coefficient(self.a), self.coefficient(self.b), domain)
        return BranchingQuadruple(L, self.coefficient(self.beta), self.coefficient(self.alpha), domain)

    def config_hash(self) -> str:
        return stable_hash(self.model_dump(mode="json"))


class SimConfig(BaseModel):
    """Level-n particle simulation settings."""
    n: int = Field(default=500, ge=1, description="Level: particles carry mass 1/n and live Exp(n) times")
    dt: Optional[float] = Field(default=None, gt=0, description="Euler-Maruyama step; 0.1/n when unset")
    horizon: float = Field(default=1.0, gt=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    replicates: int = Field(default=100, ge=1)
    boundary_policy: Literal["absorb", "reflect"] = "absorb"
    snapshot_times: List[float] = Field(default_factory=list)
    batch_size: Optional[int] = Field(default=None, ge=1)
    raw_positions: bool = Field(default=False, description="Dump raw positions of replicate 0")

    @property
    def step(self) -> float:
        return self.dt if self.dt is not None else 0.1 / self.n

    @property
    def times(self) -> List[float]:
        return sorted(set(self.snapshot_times)) or [self.horizon]

    @model_validator(mode="after")
    def _check_steps(self):
        if self.step * self.n > 0.1 * (1 + 1e-9):
            raise ValueError(f"dt * n = {self.step * self.n:g} exceeds 0.1")
        if any(t < 0 or t > self.horizon * (1 + 1e-12) for t in self.snapshot_times):
            raise ValueError("snapshot times must lie in [0, horizon]")
        return self


class ExperimentConfig(BaseModel):
    """Knobs of one verification experiment."""
    experiment: Literal[EXPERIMENTS] = "martingale"
    t_grid: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    epsilons: List[float] = Field(default_factory=lambda: [0.1, 0.25, 0.5])
    verdict_epsilon: float = Field(default=0.25, gt=0)
    test_functions: List[TestFunctionSpec] = Field(
        default_factory=lambda: [TestFunctionSpec(kind="smoothed-indicator", left=0.3, right=0.7)]
    )
    representation: Literal["direct", "transformed"] = "transformed"
    weight: Literal["ground-state", "none"] = Field(
        default="ground-state", description="Martingale check on X^H (ground-state) or on raw total mass"
    )
    window: Optional[Tuple[float, float]] = Field(default=None, description="Set B for extinction and growth")
    rho: Optional[List[float]] = Field(default=None, description="Scaling exponents; lambda_c -/+ 0.5 when unset")
    histogram_bins: int = Field(default=20, ge=2)
    min_survivors: int = Field(default=100, ge=1)
    t_offset: float = Field(default=2.0, ge=0, description="t in the Chebyshev check")
    lag: float = Field(default=4.0, gt=0, description="T in the Chebyshev check")
    variance_horizon: float = Field(default=40.0, gt=0, description="Horizon of the t = infinity variance")

    @field_validator("t_grid")
    @classmethod
    def _positive_times(cls, value):
        if not value or any(t < 0 for t in value):
            raise ValueError("t_grid must be a nonempty list of nonnegative times")
        return sorted(value)


class RunConfig(BaseModel):
    """A complete run document: model (inline or by registry name), simulation, experiment."""
    model: Optional[ModelConfig] = None
    model_name: Optional[str] = None
    parameters: Dict[str, float] = Field(default_factory=dict)
    simulation: SimConfig = Field(default_factory=SimConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)
    grid_size: Optional[int] = Field(default=None, ge=3)
    dt: Optional[float] = Field(default=None, gt=0, description="PDE time step")

    @model_validator(mode="after")
    def _one_model(self):
        if self.model is None and self.model_name is None:
            raise ValueError("a run needs a model or a model_name")
        return self
