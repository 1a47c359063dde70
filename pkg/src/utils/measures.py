"""
Finite measures on the line: atomic lists or grid densities.
"""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from src.exceptions import DomainError
from src.utils.grid import GridFunction


@dataclass(frozen=True)
class FiniteMeasure:
    """Either atoms (positions, masses) or a density on a grid."""

    positions: Optional[np.ndarray] = None
    masses: Optional[np.ndarray] = None
    density: Optional[GridFunction] = None

    def __post_init__(self):
        if self.density is None:
            positions = np.atleast_1d(np.array(self.positions if self.positions is not None else [], dtype=float))
            masses = np.atleast_1d(np.array(self.masses if self.masses is not None else [], dtype=float))
            if positions.shape != masses.shape:
                raise DomainError("atom positions and masses differ in length")
            if np.any(masses < 0):
                raise DomainError("measure masses must be nonnegative")
            object.__setattr__(self, "positions", positions)
            object.__setattr__(self, "masses", masses)
        elif np.any(self.density.values < 0):
            raise DomainError("measure density must be nonnegative")

    @classmethod
    def atoms(cls, positions, masses=None) -> "FiniteMeasure":
        positions = np.atleast_1d(np.asarray(positions, dtype=float))
        if masses is None:
            masses = np.ones_like(positions)
        return cls(positions=positions, masses=masses)

    @classmethod
    def zero(cls) -> "FiniteMeasure":
        return cls(positions=np.zeros(0), masses=np.zeros(0))

    @property
    def is_atomic(self) -> bool:
        return self.density is None

    @property
    def total_mass(self) -> float:
        if self.is_atomic:
            return float(np.sum(self.masses))
        return self.density.integral()

    def pair(self, f: GridFunction) -> float:
        """<mu, f>: exact sum over atoms, trapezoid against a density."""
        if self.is_atomic:
            return float(np.sum(self.masses * f(self.positions)))
        if self.density.size == f.size and np.isclose(self.density.left, f.left) \
                and np.isclose(self.density.right, f.right):
            return self.density.with_values(self.density.values * f.values).integral()
        product = self.density.values * f(self.density.nodes)
        return self.density.with_values(product).integral()

    def reweight(self, weight: Callable) -> "FiniteMeasure":
        """The measure weight(x) mu(dx)."""
        if self.is_atomic:
            return FiniteMeasure.atoms(self.positions, self.masses * np.asarray(weight(self.positions)))
        nodes = self.density.nodes
        return FiniteMeasure(density=self.density.with_values(self.density.values * weight(nodes)))

    def support_bounds(self):
        if self.is_atomic:
            if self.positions.size == 0:
                return None
            return float(self.positions.min()), float(self.positions.max())
        nonzero = np.nonzero(self.density.values)[0]
        if nonzero.size == 0:
            return None
        nodes = self.density.nodes
        return float(nodes[nonzero[0]]), float(nodes[nonzero[-1]])

    def sample_level(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Particle positions representing this measure at level n (mass 1/n each).

        Atoms contribute round(n * mass) particles; a density is sampled by inverse CDF.
        """
        if self.is_atomic:
            counts = np.rint(self.masses * n).astype(np.int64)
            return np.repeat(self.positions, counts)
        count = int(round(self.total_mass * n))
        nodes = self.density.nodes
        cells = 0.5 * (self.density.values[1:] + self.density.values[:-1]) * self.density.spacing
        cdf = np.concatenate([[0.0], np.cumsum(cells)])
        cdf /= cdf[-1]
        return np.interp(rng.random(count), cdf, nodes)
