"""Tiny worker-pool helper shared by the batch stages.

Jobs are independent; each worker pins its BLAS pools to one thread
(small GEMMs run faster unthreaded, and N workers x 1 thread beats
1 worker x N threads for zoo workloads). Results come back in job order
regardless of completion order, so parallel and sequential runs produce
identically ordered artifacts.
"""

from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor

_WORKER_STATE: dict = {}
_LIMITER = None


def _worker_init(user_init, user_args):
    global _LIMITER
    from threadpoolctl import threadpool_limits

    _LIMITER = threadpool_limits(limits=1)  # held for the worker's lifetime
    if user_init is not None:
        user_init(*user_args)


def run_jobs(fn, jobs, n_jobs: int = 1, initializer=None, initargs=()):
    """Run ``fn(job)`` for every job, preserving job order in the result.

    ``n_jobs <= 1`` runs in-process (initializer still honored), which is
    also the bit-reproducible reference mode.
    """
    jobs = list(jobs)
    if n_jobs <= 1 or len(jobs) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(job) for job in jobs]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(
        max_workers=min(n_jobs, len(jobs)),
        mp_context=ctx,
        initializer=_worker_init,
        initargs=(initializer, initargs),
    ) as pool:
        return list(pool.map(fn, jobs))
