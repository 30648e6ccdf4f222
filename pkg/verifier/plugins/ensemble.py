"""Block fan-out for replica ensembles.

Replicas are split into fixed-size blocks; block ``b`` of ensemble ``label`` always
draws from the same pair of streams, whichever worker runs it. Results are merged
in block order, so the worker count never changes a number.
"""
import concurrent.futures
import dataclasses
import functools
import logging
import multiprocessing
import os
import sys
from typing import Any, Callable, List, Optional

import numpy as np

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../../simulation_integration')))

from rng_streams import block_streams
from context import get_block_size, get_start_method, get_workers

logger = logging.getLogger(__name__)

# task(n_replicas_in_block, streams) -> block result; must be picklable for workers > 1
BlockTask = Callable[..., Any]


def block_sizes(n_replicas: int, block_size: int) -> List[int]:
    if n_replicas < 1:
        raise ValueError(f"n_replicas must be >= 1, got {n_replicas}")
    full, rest = divmod(n_replicas, block_size)
    return [block_size] * full + ([rest] if rest else [])


def _run_block(task: BlockTask, label: str, seed: int, block: int, n: int):
    return task(n, block_streams(seed, label, block))


def merge_blocks(results: List[Any]) -> Any:
    """Concatenates block results along the replica axis.

    Dataclass results may declare a ``replica_axes`` mapping for fields whose replica
    axis is not the first one."""
    first = results[0]
    if dataclasses.is_dataclass(first):
        axes = getattr(type(first), "replica_axes", {})
        merged = {}
        for f in dataclasses.fields(first):
            values = [getattr(r, f.name) for r in results]
            merged[f.name] = _merge_values(f.name, values, axes.get(f.name, 0))
        return type(first)(**merged)
    return _merge_values("result", results)


def _merge_values(name: str, values: List[Any], axis: int = 0):
    first = values[0]
    if first is None:
        return None
    if isinstance(first, np.ndarray):
        return np.concatenate(values, axis=axis)
    if isinstance(first, tuple):
        return tuple(_merge_values(name, list(parts), axis) for parts in zip(*values))
    if isinstance(first, (int, float)):
        if any(v != first for v in values):
            raise ValueError(f"block results disagree on scalar field '{name}'")
        return first
    raise TypeError(f"cannot merge block field '{name}' of type {type(first).__name__}")


def run_blocks(task: BlockTask, label: str, n_replicas: int, seed: int,
               block_size: Optional[int] = None, workers: Optional[int] = None) -> Any:
    block_size = block_size or get_block_size()
    workers = workers or get_workers()
    sizes = block_sizes(n_replicas, block_size)
    jobs = [functools.partial(_run_block, task, label, seed, b, n) for b, n in enumerate(sizes)]

    if workers == 1 or len(jobs) == 1:
        results = [job() for job in jobs]
    else:
        results = {}
        method = get_start_method()
        mp_context = multiprocessing.get_context(method) if method else None
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(workers, len(jobs)),
                                                    mp_context=mp_context) as executor:
            futures = {executor.submit(job): b for b, job in enumerate(jobs)}
            for future in concurrent.futures.as_completed(futures):
                results[futures[future]] = future.result()
        results = [results[b] for b in sorted(results)]
    logger.debug(f"Ensemble '{label}': {n_replicas} replicas in {len(sizes)} block(s) on {workers} worker(s)")
    return merge_blocks(results)
