"""Two-sample Kolmogorov-Smirnov test and robust summaries of per-seed results.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import math
from typing import NamedTuple, Sequence

import numpy as np

from archdoor.errors import EmptySampleError

KOLMOGOROV_TERMS = 100


class KSResult(NamedTuple):
    statistic: float
    pvalue: float


class Summary(NamedTuple):
    median: float
    q1: float
    q3: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def _sample(values: Sequence[float], name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64).ravel()
    if array.size == 0:
        raise EmptySampleError(f"sample '{name}' is empty")
    return array


def kolmogorov_sf(lam: float, terms: int = KOLMOGOROV_TERMS) -> float:
    """Asymptotic survival function Q(lam) = 2 sum (-1)^(j-1) exp(-2 j^2 lam^2)."""
    if lam < 0.2:
        # Q(lam) is 1 to within 1e-12 here and the series converges slowly.
        return 1.0
    j = np.arange(1, terms + 1, dtype=np.float64)
    signs = np.where(j % 2 == 1, 1.0, -1.0)
    value = 2.0 * float(np.sum(signs * np.exp(-2.0 * j**2 * lam**2)))
    return min(1.0, max(0.0, value))


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> KSResult:
    """Two-tailed two-sample Kolmogorov-Smirnov test.

    D is the largest gap between the empirical CDFs. The p-value uses the
    asymptotic Kolmogorov distribution at lam = sqrt(n m / (n + m)) * D.

    Raises
    ------
    EmptySampleError
        Either sample is empty.
    """
    a = np.sort(_sample(a, "a"))
    b = np.sort(_sample(b, "b"))
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    statistic = float(np.max(np.abs(cdf_a - cdf_b)))
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    pvalue = kolmogorov_sf(en * statistic)
    return KSResult(statistic, pvalue)


def median_iqr(values: Sequence[float]) -> Summary:
    """Median and quartiles (linear interpolation)."""
    array = _sample(values, "values")
    q1, median, q3 = np.percentile(array, [25.0, 50.0, 75.0])
    return Summary(float(median), float(q1), float(q3))
