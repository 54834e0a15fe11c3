"""Counter-based random streams.

Every Monte Carlo path owns its own Philox stream keyed by the run seed, so the
increments drawn for path ``i`` do not depend on how many paths are simulated,
on chunking, or on the number of worker threads.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

__all__ = ["generator", "brownian_increments", "uniform_block", "worker_count"]

# high counter word separates independent families of streams
_DOMAIN_PATHS = 1
_DOMAIN_AUX = 2

_MASK64 = (1 << 64) - 1


def _key(seed: int) -> np.ndarray:
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    return np.array([seed & _MASK64, (seed >> 64) & _MASK64], dtype=np.uint64)


def generator(seed: int, stream: int, domain: int = _DOMAIN_AUX) -> np.random.Generator:
    """Generator for stream ``stream`` of ``seed``; streams never overlap."""
    counter = np.array([0, 0, int(stream) & _MASK64, int(domain)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_key(seed), counter=counter))


def worker_count() -> int:
    """Worker cap from ``FBSDE_THREADS`` (default 1)."""
    raw = os.environ.get("FBSDE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"FBSDE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _fill_paths(out: np.ndarray, seed: int, start: int, stop: int, path_offset: int) -> None:
    n_steps = out.shape[0]
    for i in range(start, stop):
        g = generator(seed, path_offset + i, domain=_DOMAIN_PATHS)
        out[:, i] = g.standard_normal(n_steps)


def brownian_increments(seed: int, n_paths: int, n_steps: int, dt: float,
                        path_offset: int = 0) -> np.ndarray:
    """Brownian increments of shape ``(n_steps, n_paths)`` with variance ``dt``.

    Column ``i`` is the first ``n_steps`` normals of path stream
    ``path_offset + i``, so results are prefix-stable in both paths and steps.
    """
    if n_paths < 1 or n_steps < 1:
        raise ValueError("n_paths and n_steps must be positive")
    out = np.empty((n_steps, n_paths))
    workers = min(worker_count(), n_paths)
    if workers == 1:
        _fill_paths(out, seed, 0, n_paths, path_offset)
    else:
        bounds = np.linspace(0, n_paths, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_fill_paths, out, seed, int(a), int(b), path_offset)
                    for a, b in zip(bounds[:-1], bounds[1:])]
            for fut in futs:
                fut.result()
    out *= np.sqrt(dt)
    return out


def uniform_block(seed: int, stream: int, shape) -> np.ndarray:
    """Uniform(0, 1) block from an auxiliary stream (validation sampling etc.)."""
    return generator(seed, stream, domain=_DOMAIN_AUX).random(shape)
