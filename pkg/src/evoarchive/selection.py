"""Parent-selection distributions over the archive, and sampling from them.

The default rule ("score-child-prop") turns each candidate's selection
score into a logistic weight centered on a dynamic midpoint (the mean of
the current top scores), multiplies in a novelty bonus that shrinks with
the number of compiled children, and normalizes. If the weight mass is
zero the distribution falls back to uniform 1/(t+1).

Alternative variants mirror routines that evolved runs tend to rediscover:
uniform-random, temperature softmax, and a UCB-style deterministic pick
with an optional stagnation boost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VARIANTS = ("score-child-prop", "uniform-random", "softmax", "ucb")

STAGNATION_VARIANCE = 0.01
STAGNATION_FACTOR = 1.4

PROBABILITY_TOL = 1e-12


@dataclass(frozen=True)
class ScoreChildPropParams:
    """sharpness: logistic steepness; midpoint_pool_size: how many top scores set the midpoint."""

    sharpness: float = 10.0
    midpoint_pool_size: int = 3

    def __post_init__(self) -> None:
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")
        if self.midpoint_pool_size < 1:
            raise ValueError("midpoint_pool_size must be >= 1")


@dataclass(frozen=True)
class SelectionPolicy:
    variant: str = "score-child-prop"
    params: ScoreChildPropParams = field(default_factory=ScoreChildPropParams)
    temperature: float = 1.0
    exploration_weight: float = 1.0
    stagnation_boost: bool = False

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown selection variant {self.variant!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.exploration_weight < 0:
            raise ValueError("exploration_weight must be non-negative")
        if self.stagnation_boost and self.variant != "ucb":
            raise ValueError("stagnation_boost applies only to the ucb variant")


@dataclass
class SelectionBreakdown:
    """Per-node terms of the distribution; probabilities always sum to 1."""

    midpoint: float
    sigmoid: np.ndarray
    novelty: np.ndarray
    weights: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self) -> None:
        total = float(np.sum(self.probabilities))
        if abs(total - 1.0) > PROBABILITY_TOL:
            raise ValueError(f"probabilities sum to {total}, not 1")
        if np.any(self.probabilities < 0):
            raise ValueError("negative probability")
        if not np.allclose(self.weights, self.sigmoid * self.novelty, rtol=0, atol=0):
            raise ValueError("weights != sigmoid * novelty")


def dynamic_midpoint(scores: Sequence[float], pool_size: int) -> float:
    """Mean of the top min(pool_size, len) scores."""
    if len(scores) == 0:
        raise ValueError("empty score list")
    top = sorted(scores, reverse=True)[: min(pool_size, len(scores))]
    return sum(top) / len(top)


def sigmoid_transform(alpha: float, midpoint: float, sharpness: float) -> float:
    """Logistic of sharpness*(alpha - midpoint); saturates smoothly, never errors."""
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    z = sharpness * (alpha - midpoint)
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def novelty_bonus(n_children: int) -> float:
    """1/(1+n): fresh nodes get 1, heavily-branched nodes fade toward 0."""
    if n_children < 0:
        raise ValueError("n_children must be non-negative")
    return 1.0 / (1.0 + n_children)


def weights_to_distribution(weights: Sequence[float]) -> np.ndarray:
    """Normalize weights; all-zero mass falls back to exact uniform 1/(t+1)."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise ValueError("empty weight vector")
    if np.any(w < 0):
        raise ValueError("negative weight")
    total = float(np.sum(w))
    if total > 0:
        return w / total
    return np.full(w.size, 1.0 / w.size)


def selection_distribution(
    view: Sequence[tuple[float, int]], policy: SelectionPolicy
) -> SelectionBreakdown:
    """Categorical parent distribution over an archive view.

    `view` pairs each candidate's selection score with its compiled-children
    count, in archive order.
    """
    if len(view) == 0:
        raise ValueError("empty archive view")
    scores = np.array([s for s, _ in view], dtype=float)
    children = np.array([c for _, c in view], dtype=int)
    size = len(view)

    if policy.variant == "score-child-prop":
        midpoint = dynamic_midpoint(scores.tolist(), policy.params.midpoint_pool_size)
        sig = np.array(
            [sigmoid_transform(a, midpoint, policy.params.sharpness) for a in scores]
        )
        nov = np.array([novelty_bonus(int(c)) for c in children])
        weights = sig * nov
        probs = weights_to_distribution(weights)
    elif policy.variant == "uniform-random":
        midpoint = 0.0
        sig = np.ones(size)
        nov = np.ones(size)
        weights = sig * nov
        probs = np.full(size, 1.0 / size)
    elif policy.variant == "softmax":
        midpoint = 0.0
        # shift by the max for stability; ratios are unchanged
        shifted = (scores - scores.max()) / policy.temperature
        sig = np.exp(shifted)
        nov = np.ones(size)
        weights = sig * nov
        probs = weights / weights.sum()
    elif policy.variant == "ucb":
        midpoint = 0.0
        ucb = _ucb_scores(scores, children, policy)
        mask = (ucb == ucb.max()).astype(float)
        sig = mask
        nov = np.ones(size)
        weights = sig * nov
        probs = weights / weights.sum()
    else:  # pragma: no cover - guarded by SelectionPolicy
        raise ValueError(policy.variant)

    return SelectionBreakdown(
        midpoint=midpoint, sigmoid=sig, novelty=nov, weights=weights, probabilities=probs
    )


def _minmax_normalize(scores: np.ndarray) -> np.ndarray:
    lo, hi = float(scores.min()), float(scores.max())
    if hi == lo:
        return np.full(scores.size, 0.5)
    return (scores - lo) / (hi - lo)


def _ucb_scores(
    scores: np.ndarray, children: np.ndarray, policy: SelectionPolicy
) -> np.ndarray:
    exploration = policy.exploration_weight
    if policy.stagnation_boost and float(np.var(scores)) < STAGNATION_VARIANCE:
        exploration *= STAGNATION_FACTOR
    total_children = int(children.sum())
    bonus = exploration * np.sqrt(
        math.log(total_children + 1) / (children.astype(float) + 1.0)
    )
    return _minmax_normalize(scores) + bonus


def sample_parents(
    breakdown: SelectionBreakdown, count: int, rng: np.random.Generator
) -> list[int]:
    """Draw `count` node indices i.i.d. with replacement from the distribution."""
    if count < 1:
        raise ValueError("count must be >= 1")
    draws = rng.choice(breakdown.probabilities.size, size=count, p=breakdown.probabilities)
    return [int(d) for d in draws]
