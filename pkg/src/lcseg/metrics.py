"""Overlap metrics and the paired significance test used by the reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .grids import GridMismatchError


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Hard Dice overlap of two binary grids.

    Both-empty counts as perfect agreement (1.0); one-sided-empty scores 0.
    """
    if a.shape != b.shape:
        raise GridMismatchError(f"{a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    na = int(a.sum())
    nb = int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


@dataclass(frozen=True)
class PairedTestResult:
    t_statistic: float
    p_value: float
    n: int
    mean_difference: float

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def paired_t_test(xs: Sequence[float], ys: Sequence[float]) -> PairedTestResult:
    """Two-sided paired t-test on matched score lists.

    Degenerate inputs are resolved without calling the distribution: fewer
    than two pairs is an error, and identical lists (zero variance of the
    differences, all differences zero) report t=0, p=1.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("paired test needs two equal-length 1-d score lists")
    n = xs.size
    if n < 2:
        raise ValueError("paired test needs at least two pairs")
    diffs = xs - ys
    mean_diff = float(diffs.mean())
    if np.all(diffs == diffs[0]):
        # Zero-variance differences: either exact ties (t=0, p=1) or a
        # constant offset, where the statistic diverges and p collapses to 0.
        if diffs[0] == 0.0:
            return PairedTestResult(0.0, 1.0, n, mean_diff)
        t = np.inf if diffs[0] > 0 else -np.inf
        return PairedTestResult(float(t), 0.0, n, mean_diff)
    t, p = stats.ttest_rel(xs, ys)
    return PairedTestResult(float(t), float(p), n, mean_diff)


def dice_table(per_case_per_class: dict[str, dict[int, float]]) -> dict[int, float]:
    """Collapse {case: {class: dice}} to mean dice per class."""
    out: dict[int, list[float]] = {}
    for scores in per_case_per_class.values():
        for cid, value in scores.items():
            out.setdefault(cid, []).append(value)
    return {cid: float(np.mean(vals)) for cid, vals in sorted(out.items())}
