"""
Wilcoxon signed-rank test
Two-sided test on paired differences: exact null distribution for small
samples, normal approximation with tie and continuity correction above.
"""
import logging
import math
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.stats import norm, rankdata

from src.errors import ContractError

logger = logging.getLogger(__name__)

EXACT_MAX_N = 20


class WilcoxonResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    W: float
    p_value: float
    n: int
    method: Literal["exact", "normal-approx"]
    degenerate: bool = False


def exact_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """
    Number of sign assignments giving each value of 2·W+.

    Ranks are doubled so average ranks of ties stay integral.
    """
    counts = np.zeros(int(sum(doubled_ranks)) + 1, dtype=np.float64)
    counts[0] = 1.0
    for rank in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[:len(counts) - rank]
        counts = counts + shifted
    return counts


def _exact_p(doubled_ranks: Sequence[int], doubled_w: int) -> float:
    counts = exact_null_counts(doubled_ranks)
    tail = counts[:doubled_w + 1].sum() / counts.sum()
    return min(1.0, 2.0 * float(tail))


def _normal_p(ranks: np.ndarray, w: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
    if variance <= 0:
        return 1.0
    # W is the smaller tail, so the correction moves it toward the mean
    z = (w - mean + 0.5) / math.sqrt(variance)
    return min(1.0, 2.0 * float(norm.cdf(z)))


def wilcoxon_signed_rank(paired_diffs: Sequence[float]) -> WilcoxonResult:
    """
    Two-sided Wilcoxon signed-rank test.

    Zero differences are dropped and tied magnitudes get average ranks.
    W = min(W+, W-). Exact enumeration for n <= 20, normal approximation
    above. All-zero input is degenerate: W = 0, p = 1, n = 0.
    """
    if len(paired_diffs) == 0:
        raise ContractError("wilcoxon_signed_rank needs at least one pair")

    diffs = np.asarray(paired_diffs, dtype=np.float64)
    diffs = diffs[diffs != 0.0]
    n = len(diffs)
    if n == 0:
        return WilcoxonResult(W=0.0, p_value=1.0, n=0, method="exact", degenerate=True)

    ranks = rankdata(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())
    w = min(w_plus, w_minus)

    if n <= EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        p_value = _exact_p(doubled, int(round(2 * w)))
        method = "exact"
    else:
        p_value = _normal_p(ranks, w)
        method = "normal-approx"
    logger.debug(f"Wilcoxon n={n} W={w} p={p_value:.6g} ({method})")
    return WilcoxonResult(W=w, p_value=p_value, n=n, method=method)
