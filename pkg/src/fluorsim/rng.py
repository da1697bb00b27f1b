"""Counter-based random streams keyed by (master seed, repetition, sweep point)."""
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def seed_sequence(seed, *indices) -> np.random.SeedSequence:
    """SeedSequence for ``seed`` spawned along ``indices``."""
    if isinstance(seed, np.random.SeedSequence):
        base = seed
        return np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + tuple(int(i) for i in indices))
    if isinstance(seed, (tuple, list)):
        seed, indices = seed[0], tuple(seed[1:]) + tuple(indices)
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in indices))


def generator(seed, *indices) -> np.random.Generator:
    """Philox generator; the k-th draw belongs to the k-th detection cycle."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *indices)))


def n_threads() -> int:
    """Worker count, capped by the FLUORSIM_THREADS environment variable."""
    env = os.environ.get("FLUORSIM_THREADS")
    n = os.cpu_count() or 1
    if env:
        try:
            n = max(1, min(n, int(env))) if int(env) > 0 else n
        except ValueError:
            pass
    return n


def map_ordered(func, items, threads=None):
    """Apply ``func`` over ``items`` in a thread pool, returning results in input order."""
    items = list(items)
    threads = n_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) < 2:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(func, items))
