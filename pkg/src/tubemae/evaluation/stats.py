"""Bootstrap intervals, Wilcoxon signed-rank test and reconstruction error maps."""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import norm, rankdata

from tubemae.errors import DegenerateTestError, EmptyInputError, ShapeError

EXACT_MAX_N = 25


def replicate_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, i])


def bootstrap_ci(
    metric: Callable[[list], float],
    videos: Sequence,
    n_boot: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float, np.ndarray]:
    """Percentile interval of ``metric`` over videos resampled with replacement.

    Replicate i draws its indices from a generator seeded by (seed, i). The
    endpoints are order statistics of the replicate values: index
    floor(a * (B - 1)) and ceil((1 - a) * (B - 1)) of the sorted values, with
    a = (1 - level) / 2. Returns (lo, hi, replicate values).
    """
    videos = list(videos)
    n = len(videos)
    if n < 2:
        raise EmptyInputError("bootstrap needs at least 2 videos")
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    values = np.empty(n_boot)
    for i in range(n_boot):
        idx = replicate_rng(seed, i).integers(0, n, size=n)
        values[i] = metric([videos[j] for j in idx])
    alpha = (1.0 - level) / 2
    ordered = np.sort(values)
    lo = ordered[int(math.floor(alpha * (n_boot - 1) + 1e-9))]
    hi = ordered[int(math.ceil((1 - alpha) * (n_boot - 1) - 1e-9))]
    return float(lo), float(hi), values


def _signed_ranks(diffs) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(diffs, dtype=np.float64)
    if not np.isfinite(d).all():
        raise ValueError("differences must be finite")
    d = d[d != 0]
    if len(d) == 0:
        raise DegenerateTestError("all paired differences are zero")
    return d, rankdata(np.abs(d))


def signed_rank_distribution(doubled_ranks: Sequence[int]) -> list[int]:
    """Counts of each achievable doubled W+ over all 2^n sign patterns."""
    total = int(sum(doubled_ranks))
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        for s in range(reach, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        reach += r
    return counts


def wilcoxon_one_sided(diffs, alternative: str = "greater") -> float:
    """One-sided Wilcoxon signed-rank p-value.

    Zero differences are discarded and tied magnitudes get mid-ranks. For
    n <= 25 the null distribution of W+ is enumerated exactly; above that a
    normal approximation with continuity and tie corrections is used.
    ``alternative="greater"`` tests whether the differences tend to be > 0.
    """
    if alternative not in ("greater", "less"):
        raise ValueError("alternative must be 'greater' or 'less'")
    d, ranks = _signed_ranks(diffs)
    n = len(d)
    doubled = np.rint(2 * ranks).astype(np.int64)
    w_obs = int(doubled[d > 0].sum())
    if n <= EXACT_MAX_N:
        counts = signed_rank_distribution(doubled)
        if alternative == "greater":
            hit = sum(counts[w_obs:])
        else:
            hit = sum(counts[: w_obs + 1])
        return float(Fraction(hit, 2**n))
    w = w_obs / 2
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - ((tie_counts**3 - tie_counts).sum()) / 48
    sd = math.sqrt(var)
    if alternative == "greater":
        return float(norm.sf((w - mean - 0.5) / sd))
    return float(norm.cdf((w - mean + 0.5) / sd))


def mse_map(pred, target, token_mask, grid: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Per-cube MSE arranged as (h_tokens, w_tokens, t_tokens).

    Visible cubes are reported as 0; the second array flags them (True = visible).
    """
    pred = torch.as_tensor(pred, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    t, h, w = grid
    if pred.shape != target.shape or pred.dim() != 2 or pred.shape[0] != t * h * w:
        raise ShapeError(f"pred {tuple(pred.shape)} / target {tuple(target.shape)} inconsistent with grid {grid}")
    mask = np.asarray(token_mask, dtype=bool).reshape(-1)
    if mask.shape[0] != t * h * w:
        raise ShapeError(f"mask has {mask.shape[0]} entries, grid has {t * h * w}")
    err = (pred - target).pow(2).mean(dim=1).numpy()
    err = np.where(mask, err, 0.0)
    to_hwt = lambda a: a.reshape(t, h, w).transpose(1, 2, 0)
    return to_hwt(err), to_hwt(~mask)
