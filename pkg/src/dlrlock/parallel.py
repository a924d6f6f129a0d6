"""Run independent experiment cells, optionally in worker processes.

Cells share no mutable state and draw from their own Rng streams, so results
do not depend on the number of workers or the completion order.
"""
from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("DLRLOCK_JOBS", "1")))
    except ValueError:
        return 1


def run_cells(fn, cells, jobs: int | None = None) -> list:
    """``[fn(c) for c in cells]`` with up to ``jobs`` processes; output keeps input order."""
    cells = list(cells)
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    if jobs == 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(jobs, len(cells)), mp_context=ctx) as ex:
        return list(ex.map(fn, cells))
