"""Evaluation measures for attack campaigns and caption matching."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from avlt.errors import InvalidArgumentError

OMEGAS = (0.15, 0.20, 0.25)


def rmse(x1, x2) -> float:
    """||x1 - x2||_2 / sqrt(N)."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise InvalidArgumentError(f"shape mismatch {x1.shape} vs {x2.shape}")
    return float(np.sqrt(np.sum((x1 - x2) ** 2) / x1.size))


def rmse_grad(x, x0, d: float | None = None) -> np.ndarray:
    """d rmse / d x; zero at x == x0 where rmse is not differentiable."""
    d = rmse(x, x0) if d is None else d
    if d == 0.0:
        return np.zeros_like(x)
    return (x - x0) / (x.size * d)


def success_rate(results: Sequence) -> float:
    if len(results) == 0:
        raise InvalidArgumentError("no results")
    return sum(bool(r.success) for r in results) / len(results)


def adversarial_probability(model, x_adv, q, y_target: int) -> float:
    from avlt.victims.vqa import forward_vqa

    probs, _ = forward_vqa(model, x_adv, q)
    return float(probs[y_target])


def empirical_cdf(values: Sequence[float]) -> list[tuple[float, float]]:
    """Sorted (value, fraction of values <= value); duplicates collapse to one point."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise InvalidArgumentError("empty sample")
    uniq, counts = np.unique(values, return_counts=True)
    cum = np.cumsum(counts)
    return [(float(v), float(c) / values.size) for v, c in zip(uniq, cum)]


@dataclass
class CampaignSummary:
    success_rate: float
    probabilities: list[float]
    cdf: list[tuple[float, float]]
    records: list[dict] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "CampaignSummary":
        """Records need `success` and `adversarial_probability` keys."""
        if not records:
            raise InvalidArgumentError("no results")
        probs = [float(r["adversarial_probability"]) for r in records]
        rate = sum(bool(r["success"]) for r in records) / len(records)
        return cls(rate, probs, empirical_cdf(probs), list(records))

    @property
    def mean_probability(self) -> float:
        return float(np.mean(self.probabilities))

    @property
    def median_probability(self) -> float:
        return float(np.median(self.probabilities))


# --- caption matching -----------------------------------------------------------

def normalize_caption(text: str) -> list[str]:
    text = text.strip().lower()
    text = re.sub(r"\.+$", "", text).strip()
    return text.split()


def exact_match(c1: str, c2: str) -> bool:
    return normalize_caption(c1) == normalize_caption(c2)


@dataclass(frozen=True)
class MatchConfig:
    metric: str = "exact"  # "exact" or "meteor"
    omega: float = 0.15
    alpha: float = 0.9
    beta: float = 3.0
    gamma: float = 0.5

    def __post_init__(self):
        if self.metric not in ("exact", "meteor"):
            raise InvalidArgumentError(f"unknown metric {self.metric!r}")
        if not 0 < self.omega < 1:
            raise InvalidArgumentError("omega must lie in (0, 1)")
        if not 0 < self.alpha < 1 or self.beta < 0 or self.gamma < 0:
            raise InvalidArgumentError("invalid METEOR parameters")


def count_chunks(alignment: Sequence[tuple[int, int]]) -> int:
    """Number of runs that are contiguous and in the same order on both sides."""
    pairs = sorted(alignment)
    chunks = 0
    prev = None
    for c, r in pairs:
        if prev is None or c != prev[0] + 1 or r != prev[1] + 1:
            chunks += 1
        prev = (c, r)
    return chunks


def align_unigrams(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact-unigram alignment with the most matches and, among those, the fewest chunks.

    Scans the candidate left to right; each word is either left unmatched or tied to an
    unused equal reference word, and a tie continues the current chunk when it lands
    right after the previous one. Memoised over (position, used references, previous
    match), so it is exact for caption-length inputs.
    """
    cand, ref = tuple(cand), tuple(ref)
    if len(ref) > 20:
        raise InvalidArgumentError("reference too long for exact alignment")
    occurrences = {w: [i for i, rw in enumerate(ref) if rw == w] for w in set(cand)}

    @lru_cache(maxsize=None)
    def best(ci: int, used: int, prev: int) -> tuple[int, int, tuple]:
        # returns (-matches, chunks, alignment) for cand[ci:]
        if ci == len(cand):
            return 0, 0, ()
        neg, chunks, tail = best(ci + 1, used, -1)
        result = (neg, chunks, tail)
        for ri in occurrences[cand[ci]]:
            if used >> ri & 1:
                continue
            n2, c2, t2 = best(ci + 1, used | 1 << ri, ri)
            option = (n2 - 1, c2 + (0 if prev >= 0 and ri == prev + 1 else 1), ((ci, ri),) + t2)
            if option[:2] < result[:2]:
                result = option
        return result

    return list(best(0, 0, -1)[2])


def meteor_from_alignment(n_cand: int, n_ref: int, matches: int, chunks: int, cfg: MatchConfig) -> float:
    if matches == 0:
        return 0.0
    p = matches / n_cand
    r = matches / n_ref
    f = p * r / (cfg.alpha * p + (1 - cfg.alpha) * r)
    penalty = cfg.gamma * (chunks / matches) ** cfg.beta
    return f * (1 - penalty)


def meteor(candidate: str, reference: str, cfg: MatchConfig = MatchConfig()) -> float:
    """Exact-unigram METEOR: harmonic F (recall-weighted) times the fragmentation penalty."""
    cand, ref = normalize_caption(candidate), normalize_caption(reference)
    if not cand or not ref:
        raise InvalidArgumentError("METEOR needs non-empty captions")
    alignment = align_unigrams(cand, ref)
    return meteor_from_alignment(len(cand), len(ref), len(alignment), count_chunks(alignment), cfg)


def caption_match(target: str, prediction: str, cfg: MatchConfig) -> bool:
    if cfg.metric == "exact":
        return exact_match(target, prediction)
    if not normalize_caption(prediction) or not normalize_caption(target):
        return False
    # score is computed with the prediction as candidate and the target as reference
    return meteor(prediction, target, cfg) > cfg.omega


def topk_caption_accuracy(target: str, predictions: Sequence[str], k: int, cfg: MatchConfig) -> tuple[float, bool]:
    """(mean match over the first k predictions, failure flag).

    The failure flag is set when none of the top-5 predictions beats METEOR 0.15,
    independent of `cfg`.
    """
    if not 1 <= k <= len(predictions):
        raise InvalidArgumentError(f"k={k} outside 1..{len(predictions)}")
    acc = sum(caption_match(target, p, cfg) for p in predictions[:k]) / k
    fail_cfg = MatchConfig(metric="meteor", omega=0.15, alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma)
    failed = not any(caption_match(target, p, fail_cfg) for p in predictions[:5])
    return acc, failed


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 3:
        raise InvalidArgumentError("need two equal-length samples of at least 3 values")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float((ra**2).sum() * (rb**2).sum()))
    if denom == 0:
        return 0.0
    return float((ra * rb).sum() / denom)
