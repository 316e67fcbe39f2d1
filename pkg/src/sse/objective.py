"""Masked per-step cross-entropy, length weighting and ranking metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .tensor import NumericError, Tensor

UNWEIGHTED = "UNWEIGHTED"
WEIGHTED = "WEIGHTED"
# N_t / C(t): every length keeps its non-augmented share of the gradient.
BALANCED = "balanced"
# 1 / C(t): plain inverse of the number of prefixes of length t.
INVERSE_CUMULATIVE = "inverse_cumulative"


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction (1-D or 2-D input)."""
    z = np.asarray(logits)
    if np.isnan(z).any():
        raise NumericError("softmax of NaN logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LossConfig:
    weight_mode: str = UNWEIGHTED
    length_weights: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.weight_mode not in (UNWEIGHTED, WEIGHTED):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        for t, w in self.length_weights.items():
            if not (np.isfinite(w) and w >= 0):
                raise ValueError(f"weight for step {t} must be finite and nonnegative, got {w}")

    def step_weights(self, max_steps: int) -> np.ndarray:
        """Weight of step index 0..max_steps-1 (prefix length = index + 1)."""
        if self.weight_mode == UNWEIGHTED:
            return np.ones(max_steps)
        return np.array([self.length_weights.get(t + 1, 0.0) for t in range(max_steps)])


def row_weights(mask: np.ndarray, loss_config: LossConfig | None) -> np.ndarray:
    """Flatten a (B, T) mask to time-major row weights."""
    mask = np.asarray(mask, dtype=bool)
    w = mask.astype(float)
    if loss_config is not None and loss_config.weight_mode == WEIGHTED:
        w = w * loss_config.step_weights(mask.shape[1])[None, :]
    return w.T.reshape(-1)


def sequence_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                  loss_config: LossConfig | None = None) -> Tensor:
    """Weighted flat mean of cross-entropies over valid (b, t) positions.

    ``logits`` is time-major (T*B, V); ``targets`` and ``mask`` are (B, T).
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != mask.shape or logits.rows != mask.size:
        raise tc.DimensionError(
            f"sequence_loss: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    if not mask.any():
        raise tc.ContractError("sequence_loss: batch has no valid step")
    w = row_weights(mask, loss_config)
    if not w.any():
        raise tc.ContractError("sequence_loss: every valid step has zero weight")
    return tc.softmax_cross_entropy(logits, targets.T.reshape(-1), w)


def compute_length_weights(histogram: Mapping[int, int], scheme: str = BALANCED,
                           rescale: bool = True) -> dict[int, float]:
    """Per-step weights from the step-count histogram N_t of training trips.

    C(t) counts trips with at least t steps, i.e. the number of length-t
    prefixes.  ``balanced`` uses N_t / C(t) so that all length-t prefixes
    together weigh N_t; ``inverse_cumulative`` uses 1 / C(t).  With
    ``rescale`` the weights are scaled so the mean weight over all
    prefixes is 1.
    """
    if not histogram:
        raise ValueError("empty step-count histogram")
    if any(n < 0 for n in histogram.values()):
        raise ValueError("histogram counts must be nonnegative")
    top = max(histogram)
    reverse = {}
    running = 0
    for t in range(top, 0, -1):
        running += histogram.get(t, 0)
        reverse[t] = running
    weights = {}
    for t in range(1, top + 1):
        c = reverse[t]
        if c == 0:
            weights[t] = 0.0
        elif scheme == BALANCED:
            weights[t] = histogram.get(t, 0) / c
        elif scheme == INVERSE_CUMULATIVE:
            weights[t] = 1.0 / c
        else:
            raise ValueError(f"unknown weighting scheme {scheme!r}")
    if rescale:
        mass = sum(reverse[t] * weights[t] for t in weights)
        if mass > 0:
            factor = sum(reverse.values()) / mass
            weights = {t: w * factor for t, w in weights.items()}
    return weights


def reverse_cumulative(histogram: Mapping[int, int]) -> dict[int, int]:
    top = max(histogram)
    return {t: sum(n for l, n in histogram.items() if l >= t) for t in range(1, top + 1)}


# --------------------------------------------------------------------------
# ranking


def top_k(pmf: np.ndarray, k: int, exclude: Sequence[int] = ()) -> np.ndarray:
    """Indices of the k largest entries; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.array(pmf, dtype=float)
    if exclude:
        scores[list(exclude)] = -np.inf
        limit = scores.size - len(set(exclude))
    else:
        limit = scores.size
    order = np.argsort(-scores, kind="stable")
    return order[:min(k, limit)]


@dataclass(frozen=True)
class RankingResult:
    top: tuple[int, ...]
    truth: int

    def __post_init__(self):
        if len(set(self.top)) != len(self.top):
            raise ValueError(f"duplicate recommendations in {self.top}")

    @property
    def hit(self) -> bool:
        return self.truth in self.top


def rank(pmfs: np.ndarray, truths: Sequence[int], k: int,
         exclude: Sequence[int] = ()) -> list[RankingResult]:
    return [RankingResult(tuple(int(i) for i in top_k(p, k, exclude)), int(y))
            for p, y in zip(pmfs, truths)]


def _checked(results: Sequence[RankingResult], k: int) -> None:
    if not results:
        raise ValueError("no ranking results")
    if any(len(r.top) > k for r in results):
        raise ValueError(f"result lists longer than k={k}")


def recall_at_k(results: Sequence[RankingResult], k: int) -> float:
    """Share of trips whose single true city is among the top k."""
    _checked(results, k)
    return sum(r.truth in r.top[:k] for r in results) / len(results)


def precision_at_k(results: Sequence[RankingResult], k: int) -> float:
    """Mean share of relevant items in each top-k list."""
    _checked(results, k)
    return sum(r.truth in r.top[:k] for r in results) / (k * len(results))


def hit_rate(results: Sequence[RankingResult], k: int) -> float:
    """Percentage-of-trips form of precision@k used by the challenge."""
    _checked(results, k)
    hits = np.array([r.truth in r.top[:k] for r in results], dtype=float)
    return float(hits.mean())


def popularity_top(targets: Sequence[int], k: int, exclude: Sequence[int] = ()) -> np.ndarray:
    counts = np.bincount(np.asarray(targets, dtype=np.int64))
    return top_k(counts, k, exclude)
