import concurrent
import concurrent.futures
from typing import Callable, Dict, Mapping, TypeVar

import numpy as np

from lossprobe.config import LossprobeConfig
from lossprobe.exceptions import DomainError


T = TypeVar("T")


def project(values):
    """
    Projection onto [0, 1]
    """
    return np.clip(values, 0.0, 1.0)


def dense_grid(size: int | None = None) -> np.ndarray:
    """
    The uniform grid k/size, k = 0..size. Points are exact quotients so
    dyadic sizes give exactly representable grid values
    """
    if size is None:
        size = LossprobeConfig.get("numerics", "dense_grid", typ=int)
    return np.arange(size + 1) / size


def check_probability(value, name: str = "value") -> np.ndarray:
    """
    Returns `value` as a float array, raising DomainError if any entry is
    not a finite number in [0, 1]
    """
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"{name} must lie in [0, 1]")
    return arr


def run_keyed(
    jobs: Mapping[str, Callable[[], T]], workers: int | None = None
) -> Dict[str, T]:
    """
    Runs independent jobs in a ThreadPoolExecutor and returns their results
    keyed and ordered by job id, so the merge does not depend on completion order.
    The first failing job (in id order) re-raises its exception
    """
    if workers is None:
        workers = LossprobeConfig.get("lossprobe", "workers", typ=int)
    results: Dict[str, T] = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {key: executor.submit(job) for key, job in jobs.items()}
        for key in sorted(futures):
            results[key] = futures[key].result()
    return results
