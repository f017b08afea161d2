"""Ordered thread-pool mapping shared by training, perturbation sweeps and the SDE lab."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "DGN_THREADS"


def resolve_threads(requested: int | None = None) -> int:
    """Worker count: the request, else ``DGN_THREADS``, else 1. ``DGN_THREADS`` also caps a request."""
    if requested is not None and requested < 1:
        raise ValueError("threads must be at least 1")
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1 if requested is None else requested
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise ValueError(f"{THREADS_ENV} must be at least 1, got {cap}")
    return cap if requested is None else min(requested, cap)


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Map in input order; results are identical for any thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
