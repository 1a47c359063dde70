"""
Uniform grids and grid functions on truncated intervals.
"""
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from src.exceptions import DomainError

BOUNDARY_TAGS = ("dirichlet", "none")


@dataclass(frozen=True)
class GridFunction:
    """Real values on the uniform nodes of [left, right].

    A ``dirichlet`` tag means the end values are boundary data fixed at zero;
    ``none`` means the ends are ordinary samples.
    """

    values: np.ndarray
    left: float
    right: float
    boundary: str = "dirichlet"

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size < 3:
            raise DomainError("a grid function needs at least 3 nodes")
        if not np.all(np.isfinite(values)):
            raise DomainError("grid function values must be finite")
        if not (np.isfinite(self.left) and np.isfinite(self.right) and self.left < self.right):
            raise DomainError(f"invalid grid interval [{self.left}, {self.right}]")
        if self.boundary not in BOUNDARY_TAGS:
            raise DomainError(f"unknown boundary tag '{self.boundary}'")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "left", float(self.left))
        object.__setattr__(self, "right", float(self.right))

    @classmethod
    def from_callable(
        cls,
        func: Callable,
        left: float,
        right: float,
        size: int,
        boundary: str = "dirichlet",
    ) -> "GridFunction":
        nodes = np.linspace(left, right, size)
        values = np.array(func(nodes), dtype=float) * np.ones(size)
        if boundary == "dirichlet":
            values[0] = values[-1] = 0.0
        return cls(values, left, right, boundary)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def spacing(self) -> float:
        return (self.right - self.left) / (self.size - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.left, self.right, self.size)

    @property
    def interior(self) -> np.ndarray:
        return self.values[1:-1]

    def with_values(self, values, boundary: str = None) -> "GridFunction":
        return GridFunction(values, self.left, self.right, boundary or self.boundary)

    def __call__(self, x) -> np.ndarray:
        """Linear interpolation; zero outside a Dirichlet grid, edge values otherwise."""
        x = np.asarray(x, dtype=float)
        if self.boundary == "dirichlet":
            return np.interp(x, self.nodes, self.values, left=0.0, right=0.0)
        return np.interp(x, self.nodes, self.values)

    def integral(self) -> float:
        return float(trapezoid(self.values, dx=self.spacing))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def gradient(self) -> "GridFunction":
        return GridFunction(np.gradient(self.values, self.spacing, edge_order=2),
                            self.left, self.right, "none")

    def index_of(self, x: float) -> int:
        return int(round((x - self.left) / self.spacing))

    def restrict(self, left: float, right: float) -> "GridFunction":
        """Restrict to the nodes nearest to [left, right]; Dirichlet ends are zeroed."""
        i0, i1 = snap_indices(self.left, self.spacing, self.size, left, right)
        values = np.array(self.values[i0:i1 + 1])
        nodes = self.nodes
        if self.boundary == "dirichlet":
            values[0] = values[-1] = 0.0
        return GridFunction(values, nodes[i0], nodes[i1], self.boundary)

    def extend(self, parent: "GridFunction") -> "GridFunction":
        """Zero-pad onto the (same-spacing) grid of ``parent``."""
        i0 = parent.index_of(self.left)
        if abs(parent.nodes[i0] - self.left) > 1e-9 * max(1.0, abs(self.left)) + 1e-6 * self.spacing:
            raise DomainError("grids are not aligned")
        values = np.zeros(parent.size)
        values[i0:i0 + self.size] = self.values
        return parent.with_values(values)


def snap_indices(left: float, spacing: float, size: int, lo: float, hi: float) -> Tuple[int, int]:
    """Node indices of [lo, hi] snapped to a uniform grid starting at ``left``."""
    i0 = int(round((lo - left) / spacing))
    i1 = int(round((hi - left) / spacing))
    i0, i1 = max(i0, 0), min(i1, size - 1)
    if i1 - i0 < 2:
        raise DomainError(f"interval [{lo}, {hi}] holds fewer than 3 grid nodes")
    return i0, i1


def nested_grids(truncations: Sequence[Tuple[float, float]], size: int) -> List[np.ndarray]:
    """Nodes of every truncation, snapped to the spacing of the last (largest) one."""
    lo, hi = truncations[-1]
    nodes = np.linspace(lo, hi, size)
    spacing = nodes[1] - nodes[0]
    grids = []
    for left, right in truncations:
        i0, i1 = snap_indices(lo, spacing, size, left, right)
        grids.append(nodes[i0:i1 + 1])
    return grids
