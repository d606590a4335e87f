"""
Locex Random Streams and Worker Pool

All randomness in locex flows from one integer master seed. Named
sub-streams and per-chunk counters are derived with numpy's SeedSequence
spawn keys, so a chunk of work draws the same numbers no matter which
worker runs it or in which order chunks complete.
"""

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Tuple, TypeVar, Union

import numpy as np
import psutil

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')

SeedLike = Union[int, np.random.SeedSequence]

# Stream names used across the package
PERMUTATIONS = 'permutations'
REALIZATIONS = 'realizations'


def stream_id(name: str) -> int:
    """Stable 32-bit identifier for a named sub-stream."""
    return zlib.crc32(name.encode('utf-8'))


def seed_sequence(seed: SeedLike, *keys: int) -> np.random.SeedSequence:
    """
    Derive the seed sequence addressed by ``keys`` under a master seed.

    Args:
        seed: Master seed, or a SeedSequence to extend
        keys: Spawn-key path below the master seed

    Returns:
        SeedSequence whose state depends only on (seed, keys)
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(keys))
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def derive_rng(seed: SeedLike, *keys: int) -> np.random.Generator:
    """Generator for the stream addressed by ``keys`` under ``seed``."""
    return np.random.default_rng(seed_sequence(seed, *keys))


def chunk_plan(total: int, chunk_size: int) -> List[Tuple[int, int]]:
    """
    Split ``total`` draws into (chunk_index, count) pieces of ``chunk_size``.

    The plan depends only on ``total`` and ``chunk_size``; each chunk is
    later paired with its own seed stream.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be positive, got {chunk_size}")
    plan = []
    start = 0
    index = 0
    while start < total:
        count = min(chunk_size, total - start)
        plan.append((index, count))
        start += count
        index += 1
    return plan


def default_workers() -> int:
    """Number of worker threads to use when none is configured."""
    try:
        physical = psutil.cpu_count(logical=False)
    except Exception as e:
        logger.debug(f"Could not query CPU count: {e}")
        physical = None
    return max(1, physical or 1)


def parallel_map(func: Callable[[T], R], items: Iterable[T],
                 workers: Optional[int] = None) -> List[R]:
    """
    Apply ``func`` to every item, returning results in input order.

    Args:
        func: Pure function of one item
        items: Work items
        workers: Thread count; None picks default_workers(), 1 runs inline

    Returns:
        List of results aligned with ``items``
    """
    items = list(items)
    if workers is None:
        workers = default_workers()
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    logger.debug(f"Mapping {len(items)} items over {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))

