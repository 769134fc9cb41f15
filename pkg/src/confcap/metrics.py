"""Caption metrics and confidence-distribution summaries.

bleu4: clipped n-gram precisions for n = 1..4 combined by geometric mean with
the standard brevity penalty. No smoothing: any zero precision zeroes the
score, and candidates shorter than 4 tokens score 0.

rouge_l: LCS-based F-measure with beta = 1.2, maximum over references.

confidence_distribution: min-max normalized scores, their population standard
deviation, and a Gaussian kernel density (Silverman bandwidth, reflected at
the interval ends so the density integrates to one) on a 101-point grid over
[0, 1].
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .tokenizer import TokenSequence

GRID_POINTS = 101


def _tokens(x) -> tuple:
    if isinstance(x, TokenSequence):
        return x.words()
    if isinstance(x, str):
        return tuple(x.split())
    return tuple(x)


def _ngrams(tokens: tuple, n: int) -> Counter:
    return Counter(tokens[i : i + n] for i in range(len(tokens) - n + 1))


def bleu4(candidate, references) -> float:
    """BLEU with n up to 4 for one candidate against one or more references.

    Counts are clipped per n-gram by the maximum reference count. The brevity
    penalty uses the reference length closest to the candidate (ties favor
    the shorter reference).
    """
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if len(cand) == 0:
        raise ValueError("empty candidate")
    if not refs or any(len(r) == 0 for r in refs):
        raise ValueError("references must be non-empty")

    log_sum = 0.0
    for n in range(1, 5):
        cand_counts = _ngrams(cand, n)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        clipped = 0
        for gram, count in cand_counts.items():
            max_ref = max(_ngrams(r, n)[gram] for r in refs)
            clipped += min(count, max_ref)
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)

    ref_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    bp = 1.0 if len(cand) > ref_len else math.exp(1.0 - ref_len / len(cand))
    return bp * math.exp(log_sum / 4.0)


def _lcs_len(a: tuple, b: tuple) -> int:
    # One-row dynamic program.
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = 1.2) -> float:
    """LCS F-measure, maximum over references."""
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if len(cand) == 0:
        raise ValueError("empty candidate")
    if not refs or any(len(r) == 0 for r in refs):
        raise ValueError("references must be non-empty")
    best = 0.0
    for ref in refs:
        lcs = _lcs_len(cand, ref)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        f = (1 + beta**2) * p * r / (r + beta**2 * p)
        best = max(best, f)
    return best


@dataclass
class DistributionReport:
    normalized: list[float]  # min-max normalized scores in [0, 1]
    std: float  # population standard deviation of the normalized scores
    grid: list[float]  # 101 evenly spaced points over [0, 1]
    density: list[float]  # KDE values on the grid


def confidence_distribution(scores) -> DistributionReport:
    """Summarize a set of confidence scores; rejects fewer than 2 or all-equal."""
    s = np.asarray(list(scores), dtype=np.float64)
    if s.size < 2:
        raise ValueError("need at least 2 scores")
    lo, hi = float(s.min()), float(s.max())
    if hi == lo:
        raise ValueError("all scores identical; distribution is degenerate")
    z = (s - lo) / (hi - lo)

    std_pop = float(z.std(ddof=0))

    # Silverman's rule on the normalized sample.
    sd = float(z.std(ddof=1))
    q75, q25 = np.percentile(z, [75, 25])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    h = 0.9 * spread * z.size ** (-0.2)
    if h <= 0:
        raise ValueError("degenerate bandwidth")

    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    # Reflect each kernel across both interval ends (period-2 folding) so the
    # density is a proper density on [0, 1].
    density = np.zeros_like(grid)
    for k in range(-3, 4):
        density += _gauss(grid[:, None], 2.0 * k + z[None, :], h).sum(axis=1)
        density += _gauss(grid[:, None], 2.0 * k - z[None, :], h).sum(axis=1)
    density /= z.size

    return DistributionReport(
        normalized=[float(v) for v in z],
        std=std_pop,
        grid=[float(v) for v in grid],
        density=[float(v) for v in density],
    )


def _gauss(x, center, h):
    u = (x - center) / h
    return np.exp(-0.5 * u * u) / (h * math.sqrt(2.0 * math.pi))
