"""Deterministic Monte Carlo batching.

Per-path randomness comes from a counter-based generator keyed by
``(seed, path_index)``, so a batch is nothing more than a slice of the
keyed family: re-partitioning the same run into different batch sizes
replays bit-identical per-path values.  The reduction stores results in
path order and sums with :func:`math.fsum`, which makes the aggregate
independent of both batch layout and worker count.

This is the only module in the package that owns threads; everything it
calls must be safe to run per-path.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError

#: paths flagged non-finite may not exceed this fraction of the run
EXCLUSION_BUDGET = 1e-3


def path_stream(seed, path_index):
    """Independent generator for one path, identical under any batching."""
    key = np.array([seed, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class McSummary:
    estimate: float
    standard_error: float
    n_effective: int
    excluded_paths: int
    seed: int
    wall_time: float

    def ci95(self):
        half = 1.959963984540054 * self.standard_error
        return (self.estimate - half, self.estimate + half)

    def to_json_dict(self):
        se = self.standard_error
        return {
            "estimate": self.estimate,
            "standard_error": se if math.isfinite(se) else None,
            "n_effective": self.n_effective,
            "excluded_paths": self.excluded_paths,
            "seed": self.seed,
            "wall_time": self.wall_time,
        }


def _run_batch(task, seed, lo, hi, batch_index):
    out = np.empty(hi - lo)
    for i in range(lo, hi):
        try:
            out[i - lo] = float(task(path_stream(seed, i), i))
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise NumericError(
                f"batch {batch_index} (paths {lo}..{hi - 1}) failed at path {i}: {exc}"
            ) from exc
    return out


def mc_batch(task, n_paths, seed, batch_size=64, workers=1):
    """Run ``task(rng, path_index) -> float`` over ``n_paths`` paths.

    Non-finite task values are excluded (up to ``EXCLUSION_BUDGET``); any
    exception aborts the whole run naming the offending batch.  The
    returned estimate and standard error are bit-identical for any
    ``batch_size`` and ``workers``.
    """
    t0 = time.perf_counter()
    n_paths = int(n_paths)
    if n_paths < 1:
        raise DomainError(f"n_paths must be >= 1, got {n_paths}")
    if batch_size < 1:
        raise DomainError(f"batch_size must be >= 1, got {batch_size}")
    if workers < 1:
        raise DomainError(f"workers must be >= 1, got {workers}")

    spans = [
        (b, lo, min(lo + batch_size, n_paths))
        for b, lo in enumerate(range(0, n_paths, batch_size))
    ]
    values = np.empty(n_paths)
    if workers == 1:
        for b, lo, hi in spans:
            values[lo:hi] = _run_batch(task, seed, lo, hi, b)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                (lo, hi, pool.submit(_run_batch, task, seed, lo, hi, b))
                for b, lo, hi in spans
            ]
            for lo, hi, fut in futures:
                values[lo:hi] = fut.result()

    finite = np.isfinite(values)
    excluded = int(n_paths - np.count_nonzero(finite))
    if excluded > EXCLUSION_BUDGET * n_paths:
        raise NumericError(
            f"{excluded}/{n_paths} paths excluded, over the {EXCLUSION_BUDGET:g} budget"
        )
    kept = values[finite]
    n_eff = kept.size
    estimate = math.fsum(kept) / n_eff
    if n_eff >= 2:
        var = math.fsum((v - estimate) ** 2 for v in kept) / (n_eff - 1)
        se = math.sqrt(var / n_eff)
    else:
        se = math.nan
    return McSummary(
        estimate=estimate,
        standard_error=se,
        n_effective=n_eff,
        excluded_paths=excluded,
        seed=int(seed),
        wall_time=time.perf_counter() - t0,
    )
