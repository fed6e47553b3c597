"""Non-RL obfuscation URL selectors and the bias-weight estimator.

Approach names used across reports: "control" (no obfuscation),
"adnauseam" (uniform over the ad pool), "trackthis" (uniform over the
curated pool), "rand-intent" (uniform subcategory, uniform URL),
"bias-intent" (subcategories weighted by estimated single-insertion
reward), and "rl" (the trained agent).
"""

from __future__ import annotations

import warnings
from typing import Protocol

import numpy as np

from .persona import McModel, Persona, SOURCE_OBF, build_persona
from .universe import UrlUniverse

APPROACHES = ("control", "adnauseam", "trackthis", "rand-intent", "bias-intent", "rl")


class _LossEvaluator(Protocol):
    def loss(self, persona: Persona) -> float: ...


class RandomPoolSelector:
    """Uniform draw from a fixed URL pool."""

    def __init__(self, pool: np.ndarray) -> None:
        if len(pool) == 0:
            raise ValueError("selector pool is empty")
        self.pool = np.asarray(pool, dtype=np.int64)

    def begin(self, persona: Persona) -> None:
        pass

    def select(self, persona: Persona, universe: UrlUniverse,
               rng: np.random.Generator) -> int:
        return int(self.pool[rng.integers(0, len(self.pool))])


class RandIntentSelector:
    """Uniform subcategory, then uniform URL within it."""

    def begin(self, persona: Persona) -> None:
        pass

    def select(self, persona: Persona, universe: UrlUniverse,
               rng: np.random.Generator) -> int:
        subcat = int(rng.integers(0, universe.n_subcategories))
        urls = universe.intent_subcategories[subcat]
        return int(urls[rng.integers(0, len(urls))])


class BiasIntentSelector:
    """Subcategory drawn from a fixed weight vector, then uniform URL."""

    def __init__(self, weights: np.ndarray) -> None:
        if weights is None:
            raise ValueError("bias-intent needs estimated weights; run the "
                             "baseline training stage first")
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or np.any(w < 0.0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be a 1-d distribution")
        self.weights = w

    def begin(self, persona: Persona) -> None:
        pass

    def select(self, persona: Persona, universe: UrlUniverse,
               rng: np.random.Generator) -> int:
        if len(self.weights) != universe.n_subcategories:
            raise ValueError(
                f"weights cover {len(self.weights)} subcategories but universe "
                f"has {universe.n_subcategories}")
        subcat = int(rng.choice(len(self.weights), p=self.weights))
        urls = universe.intent_subcategories[subcat]
        return int(urls[rng.integers(0, len(urls))])


def estimate_bias_weights(universe: UrlUniverse, model: McModel,
                          loss_eval: _LossEvaluator, seed: int,
                          samples_per_subcat: int = 50,
                          base_len: int = 12) -> np.ndarray:
    """Per-subcategory weights from average single-insertion reward.

    For each subcategory, fresh chain-only personas get one URL from that
    subcategory appended; the weight is the mean resulting profile loss
    (the single-step reward, since the pre-insertion loss is zero).
    Negative means are floored at zero before normalizing; an all-zero
    vector falls back to uniform with a warning.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1A5]))
    n_subs = universe.n_subcategories
    means = np.zeros(n_subs)
    for subcat in range(n_subs):
        urls = universe.intent_subcategories[subcat]
        total = 0.0
        for _ in range(samples_per_subcat):
            persona = build_persona(model, universe, 0.0, base_len, base_len,
                                    None, rng)
            url = int(urls[rng.integers(0, len(urls))])
            persona.visits.append((url, SOURCE_OBF))
            total += loss_eval.loss(persona)
        means[subcat] = total / samples_per_subcat
    floored = np.maximum(means, 0.0)
    total = floored.sum()
    if total <= 0.0:
        warnings.warn("all single-insertion rewards are non-positive; "
                      "falling back to uniform bias weights")
        return np.full(n_subs, 1.0 / n_subs)
    return floored / total
