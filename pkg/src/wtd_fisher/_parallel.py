from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def resolve_jobs(jobs: int | None) -> int:
    """``jobs`` if given, else ``$WTD_FISHER_JOBS``, else the CPU count."""
    if jobs is None:
        env = os.environ.get("WTD_FISHER_JOBS")
        jobs = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(jobs))


def ordered_map(fn, items, jobs: int = 1) -> list:
    """``list(map(fn, items))``, fanned out to processes when ``jobs > 1``.

    Results keep input order. ``fn`` and the items must be picklable for jobs > 1.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))
