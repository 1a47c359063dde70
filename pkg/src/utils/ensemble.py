"""
Ensemble plumbing: seeded streams, deterministic fan-out, replicate statistics, hashing.
"""
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, List, Optional, TypeVar

import numpy as np

from src.config import settings

T = TypeVar("T")
R = TypeVar("R")


def batch_rng(master_seed: int, batch_index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based stream for one replicate batch."""
    sequence = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(stream), int(batch_index)))
    return np.random.default_rng(sequence)


def ordered_map(func: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """Map concurrently; results come back in input order whatever the thread count."""
    items = list(items)
    workers = min(threads or settings.threads, max(len(items), 1))
    if workers <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def replicate_batches(replicates: int, batch_size: int) -> List[range]:
    return [range(start, min(start + batch_size, replicates)) for start in range(0, replicates, batch_size)]


def mean_and_se(samples: np.ndarray, axis: int = 0):
    """Mean, unbiased variance and standard error of the mean over replicates."""
    samples = np.asarray(samples, dtype=float)
    count = samples.shape[axis]
    mean = samples.mean(axis=axis)
    variance = samples.var(axis=axis, ddof=1) if count > 1 else np.zeros_like(mean)
    return mean, variance, np.sqrt(variance / max(count, 1))


def variance_se(samples: np.ndarray, axis: int = 0) -> np.ndarray:
    """Standard error of the sample variance, from the fourth central moment."""
    samples = np.asarray(samples, dtype=float)
    count = samples.shape[axis]
    centered = samples - samples.mean(axis=axis, keepdims=True)
    m2 = np.mean(centered ** 2, axis=axis)
    m4 = np.mean(centered ** 4, axis=axis)
    return np.sqrt(np.maximum(m4 - (count - 3) / max(count - 1, 1) * m2 ** 2, 0.0) / max(count, 1))


def proportion_se(frequency, count: int):
    frequency = np.asarray(frequency, dtype=float)
    return np.sqrt(frequency * (1.0 - frequency) / max(count, 1))


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def stable_hash(value: Any) -> str:
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()
