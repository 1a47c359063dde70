"""
Level-n branching particle approximation.

Particles carry mass 1/n, move by Euler-Maruyama steps of the diffusion of L and
branch at rate n into a number of offspring with mean 1 + beta/n and variance
2 alpha. Replicates are simulated together in vectorized batches, one seeded
stream per batch.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rv_discrete

from src.config import settings
from src.exceptions import CoefficientError, ConfigError, DomainError, ExplosionError, ParameterError
from src.models.config import SimConfig
from src.services.operators import BranchingQuadruple, EllipticOperator, SpaceTimeWeight
from src.utils.ensemble import batch_rng, ordered_map, replicate_batches
from src.utils.grid import GridFunction
from src.utils.measures import FiniteMeasure

logger = logging.getLogger(__name__)

MAX_SUPPORT = 64
LAW_TOL = 1e-12
SIMULATION_STREAM = 1


@dataclass(frozen=True)
class OffspringLaw:
    """Offspring distribution on {0, 1, K} with prescribed mean and variance."""

    support: Tuple[int, ...]
    probabilities: Tuple[float, ...]
    mean: float
    variance: float

    def distribution(self) -> rv_discrete:
        return rv_discrete(values=(np.array(self.support), np.array(self.probabilities)))

    def realized_moments(self) -> Tuple[float, float]:
        support = np.array(self.support, dtype=float)
        p = np.array(self.probabilities)
        mean = float(np.sum(p * support))
        return mean, float(np.sum(p * support ** 2) - mean ** 2)


def _law_parameters(mean: np.ndarray, variance: np.ndarray):
    """Vectorized (K, p0, p1, pK) of the smallest valid {0, 1, K} law."""
    spread = variance + mean * mean - mean
    if np.any(spread < -LAW_TOL) or np.any(mean <= 0):
        raise ParameterError("offspring moments admit no law; increase the level n")
    spread = np.maximum(spread, 0.0)
    K = np.maximum(2, np.ceil(1.0 + spread / mean - 1e-12)).astype(np.int64)
    if np.any(K > MAX_SUPPORT):
        raise ParameterError(f"no offspring law with support up to {MAX_SUPPORT}; alpha is extreme for this level")
    pK = spread / (K * (K - 1))
    p1 = mean - K * pK
    p0 = 1.0 - p1 - pK
    if np.any(p0 < -LAW_TOL) or np.any(p1 < -LAW_TOL):
        raise ParameterError("beta/n is too large for a valid offspring law; increase the level n")
    p0, p1 = np.clip(p0, 0.0, 1.0), np.clip(p1, 0.0, 1.0)
    return K, p0, p1, pK


def offspring_law(beta_x: float, alpha_x: float, n: int) -> OffspringLaw:
    """The law with mean 1 + beta/n and variance 2 alpha on {0, 1, 2}, else {0, 1, K}."""
    mean = 1.0 + beta_x / n
    variance = 2.0 * alpha_x
    K, p0, p1, pK = _law_parameters(np.array([mean]), np.array([variance]))
    return OffspringLaw((0, 1, int(K[0])), (float(p0[0]), float(p1[0]), float(pK[0])), mean, variance)


def sample_offspring(beta: np.ndarray, alpha: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """One offspring count per parent, each from its own law."""
    K, p0, p1, _ = _law_parameters(1.0 + beta / n, 2.0 * alpha)
    u = rng.random(beta.shape)
    return np.where(u < p0, 0, np.where(u < p0 + p1, 1, K))


@dataclass
class ParticleCloud:
    """One replicate at one time. ``weights`` overrides the uniform mass 1/n."""

    positions: np.ndarray
    level: int
    time: float = 0.0
    weights: Optional[np.ndarray] = None

    @property
    def mass_per_particle(self) -> float:
        return 1.0 / self.level

    @property
    def alive_count(self) -> int:
        return int(self.positions.size)

    @property
    def masses(self) -> np.ndarray:
        if self.weights is not None:
            return self.weights
        return np.full(self.positions.size, self.mass_per_particle)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.masses))

    def as_measure(self) -> FiniteMeasure:
        return FiniteMeasure.atoms(self.positions, self.masses)


def weight_cloud(cloud: ParticleCloud, H: SpaceTimeWeight, t: Optional[float] = None) -> ParticleCloud:
    """X^H_t = H(., t) X_t as a weighted cloud."""
    t = cloud.time if t is None else t
    return ParticleCloud(cloud.positions, cloud.level, t, cloud.masses * H(cloud.positions, t))


def pair(cloud: ParticleCloud, f) -> float:
    """<X_t, f> for a grid function or callable f."""
    if cloud.alive_count == 0:
        return 0.0
    return float(np.sum(cloud.masses * np.asarray(f(cloud.positions), dtype=float)))


def move_particles(positions: np.ndarray, L: EllipticOperator, t: float, dt: float, rng: np.random.Generator,
                   bounds: Tuple[float, float], policy: str = "absorb") -> Tuple[np.ndarray, np.ndarray]:
    """One Euler-Maruyama step of the diffusion of L. Returns new positions and a keep mask."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    if positions.size == 0:
        return positions, np.ones(0, dtype=bool)
    a = L.a(positions, t)
    if np.any(a < -1e-10) or not np.all(np.isfinite(a)):
        raise CoefficientError("diffusion coefficient negative at a particle position")
    a = np.maximum(a, 0.0)
    drift = L.ito_drift(positions, t)
    moved = positions + drift * dt + np.sqrt(a * dt) * rng.standard_normal(positions.size)
    lo, hi = bounds
    if policy == "absorb":
        return moved, (moved > lo) & (moved < hi)
    if policy == "reflect":
        width = hi - lo
        folded = np.mod(moved - lo, 2.0 * width)
        folded = np.where(folded > width, 2.0 * width - folded, folded)
        edge = 1e-12 * width
        return np.clip(lo + folded, lo + edge, hi - edge), np.ones(positions.size, dtype=bool)
    raise ConfigError(f"unknown boundary policy '{policy}'")


def diffusion_step(cloud: ParticleCloud, L: EllipticOperator, dt: float, rng: np.random.Generator,
                   bounds: Optional[Tuple[float, float]] = None, policy: str = "absorb") -> ParticleCloud:
    """Move every particle; absorbed particles are removed."""
    bounds = bounds or L.domain.largest
    moved, keep = move_particles(cloud.positions, L, cloud.time, dt, rng, bounds, policy)
    weights = None if cloud.weights is None else cloud.weights[keep]
    return ParticleCloud(moved[keep], cloud.level, cloud.time + dt, weights)


@dataclass
class EnsembleSnapshot:
    """All particles of one replicate batch at one time, tagged by replicate."""

    positions: np.ndarray
    owners: np.ndarray
    replicates: int
    level: int
    time: float
    first_replicate: int = 0

    def pair(self, f, weights: Optional[np.ndarray] = None) -> np.ndarray:
        """<X_t, f> per replicate."""
        values = np.asarray(f(self.positions), dtype=float) / self.level
        if weights is not None:
            values = values * weights
        return np.bincount(self.owners, weights=values, minlength=self.replicates)

    def total_mass(self) -> np.ndarray:
        return np.bincount(self.owners, minlength=self.replicates) / self.level

    def counts(self) -> np.ndarray:
        return np.bincount(self.owners, minlength=self.replicates)

    def clouds(self) -> List[ParticleCloud]:
        order = np.argsort(self.owners, kind="stable")
        split = np.split(self.positions[order], np.cumsum(self.counts())[:-1])
        return [ParticleCloud(part, self.level, self.time) for part in split]


Observer = Callable[[EnsembleSnapshot], np.ndarray]


@dataclass
class EnsembleRun:
    """Observer output stacked over replicates: values[replicate, time, ...]."""

    times: np.ndarray
    values: np.ndarray
    level: int
    replicates: int
    raw: List[ParticleCloud] = field(default_factory=list, repr=False)


def _snapshot_steps(times: Sequence[float], dt: float) -> dict:
    steps = {}
    for index, t in enumerate(times):
        steps.setdefault(int(round(t / dt)), []).append(index)
    return steps


def simulate_batch(Q: BranchingQuadruple, mu: FiniteMeasure, config: SimConfig, batch_index: int,
                   replicates: range, observe: Observer,
                   bounds: Optional[Tuple[float, float]] = None, keep_raw: bool = False):
    """Simulate one batch of replicates and collect observer output at the snapshot times."""
    rng = batch_rng(config.seed, batch_index, SIMULATION_STREAM)
    n = config.n
    count = len(replicates)
    bounds = bounds or Q.domain.largest
    steps = max(int(round(config.horizon / config.step)), 1) if config.horizon > 0 else 0
    dt = config.horizon / steps if steps else config.step
    wanted = _snapshot_steps(config.times, dt)
    cap = settings.population_cap * count
    branch_probability = -np.expm1(-n * dt)

    starts = [mu.sample_level(n, rng) for _ in range(count)]
    positions = np.concatenate(starts) if starts else np.zeros(0)
    owners = np.repeat(np.arange(count), [start.size for start in starts])
    records = [None] * len(config.times)
    raw: List[ParticleCloud] = []
    particle_steps = 0.0

    for step in range(steps + 1):
        now = step * dt
        if step in wanted:
            snapshot = EnsembleSnapshot(positions, owners, count, n, now, replicates.start)
            observed = np.asarray(observe(snapshot), dtype=float)
            for index in wanted[step]:
                records[index] = observed
            if keep_raw:
                raw.append(ParticleCloud(positions[owners == 0].copy(), n, now))
        if step == steps:
            break
        moved, keep = move_particles(positions, Q.L, now, dt, rng, bounds, config.boundary_policy)
        positions, owners = moved[keep], owners[keep]
        branching = rng.random(positions.size) < branch_probability
        if np.any(branching):
            parents = positions[branching]
            offspring = sample_offspring(Q.beta(parents, now + dt), Q.alpha(parents, now + dt), n, rng)
            positions = np.concatenate([positions[~branching], np.repeat(parents, offspring)])
            owners = np.concatenate([owners[~branching], np.repeat(owners[branching], offspring)])
        particle_steps += positions.size
        if particle_steps > cap:
            raise ExplosionError(
                f"population exceeded {settings.population_cap:g} particle-steps per replicate; "
                f"shorten the horizon or check lambda_c"
            )
    return np.stack(records, axis=1), raw


def simulate_ensemble(Q: BranchingQuadruple, mu: FiniteMeasure, config: SimConfig, observe: Observer,
                      bounds: Optional[Tuple[float, float]] = None) -> EnsembleRun:
    """All replicates, batches run concurrently and joined in batch order."""
    lo, hi = bounds or Q.domain.largest
    support = mu.support_bounds()
    if support is not None and (support[0] <= lo or support[1] >= hi):
        raise DomainError(f"initial measure must lie inside ({lo}, {hi})")
    batches = replicate_batches(config.replicates, config.batch_size or settings.batch_size)
    logger.info(f"Simulating {config.replicates} replicates at level n={config.n} in {len(batches)} batches")

    def run(indexed):
        batch_index, block = indexed
        return simulate_batch(Q, mu, config, batch_index, block, observe, (lo, hi),
                              keep_raw=config.raw_positions and batch_index == 0)

    results = ordered_map(run, list(enumerate(batches)))
    values = np.concatenate([result[0] for result in results], axis=0)
    return EnsembleRun(np.array(config.times), values, config.n, config.replicates, results[0][1])


def simulate(Q: BranchingQuadruple, mu: FiniteMeasure, config: SimConfig,
             bounds: Optional[Tuple[float, float]] = None) -> List[ParticleCloud]:
    """Snapshot series of a single replicate (the first of batch 0)."""
    single = config.model_copy(update={"replicates": 1, "raw_positions": True})
    run = simulate_ensemble(Q, mu, single, lambda snapshot: snapshot.total_mass(), bounds)
    return run.raw


def mass_observer(weight: Optional[Callable] = None) -> Observer:
    """Per-replicate total mass, optionally weighted by weight(x, t)."""
    def observe(snapshot: EnsembleSnapshot) -> np.ndarray:
        if weight is None:
            return snapshot.total_mass()
        return snapshot.pair(lambda x: weight(x, snapshot.time))
    return observe


def pairing_observer(functions: Sequence[GridFunction], weight: Optional[Callable] = None) -> Observer:
    """Per-replicate <X_t, f> for each f, columns in order; mass weighted by weight(x, t) if given."""
    def observe(snapshot: EnsembleSnapshot) -> np.ndarray:
        weights = None if weight is None else weight(snapshot.positions, snapshot.time)
        return np.stack([snapshot.pair(f, weights) for f in functions], axis=-1)
    return observe
