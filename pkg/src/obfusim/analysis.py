"""Evaluation harnesses: privacy vs oracles/surrogates, stealth, adaptiveness.

Personas here are always evaluated as (obfuscated profile, paired base
profile) where the base profile is the user-source subsequence of the same
persona, so every comparison isolates what the obfuscation URLs changed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .metrics import MetricAccumulator, Personalization
from .oracles import OracleSet
from .persona import McModel, Persona, Selector, build_persona
from .surrogate import SurrogateBank, SurrogateConfig, SurrogateModel, fit_classifier
from .universe import UrlUniverse


class OracleScorer:
    """Adapter exposing ground-truth oracle responses for evaluation."""

    name = "oracle"

    def __init__(self, oracles: OracleSet, universe: UrlUniverse) -> None:
        self.oracles = oracles
        self.universe = universe

    def segments(self, profile_ids) -> np.ndarray:
        return self.oracles.segment_vector(self.universe, profile_ids)

    def bid_classes(self, profile_ids) -> np.ndarray:
        return self.oracles.bid_classes(self.universe, profile_ids)

    def bid_values(self, profile_ids) -> np.ndarray | None:
        return self.oracles.bid_values(self.universe, profile_ids)


class SurrogateScorer:
    """Adapter exposing surrogate predictions; bid values are unavailable."""

    name = "surrogate"

    def __init__(self, bank: SurrogateBank, universe: UrlUniverse) -> None:
        self.bank = bank
        self.universe = universe

    def segments(self, profile_ids) -> np.ndarray:
        return self.bank.segment_vector(self.universe, profile_ids)

    def bid_classes(self, profile_ids) -> np.ndarray:
        return self.bank.bid_class_vector(self.universe, profile_ids)

    def bid_values(self, profile_ids) -> np.ndarray | None:
        return None


@dataclass
class EvalResult:
    approach: str
    alpha: float
    n_personas: int
    rows: list[dict]
    aggregates: dict
    personas: list[Persona]


def evaluate_selector(universe: UrlUniverse, scorer, model: McModel,
                      selector: Selector | None, alpha: float, n_personas: int,
                      persona_len: int, init_len: int, seed: int,
                      approach: str = "", keep_personas: bool = False,
                      personalization: Personalization | None = None) -> EvalResult:
    """Score one approach over seeded personas against a tracker view.

    ``selector=None`` with alpha 0 is the control arm. Undefined l1 values
    (obfuscated profile carries no segments) are excluded from the mean and
    counted; l4 is only available when the scorer exposes raw bid values.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    accs = {name: MetricAccumulator() for name in
            ("l1", "l2", "l2_added", "l2_removed", "l3", "l4",
             "l2_allowed", "l2_disallowed")}
    rows: list[dict] = []
    personas: list[Persona] = []
    for i in range(n_personas):
        persona = build_persona(model, universe, alpha, persona_len, init_len,
                                selector, rng)
        obf_ids = persona.all_ids()
        base_ids = persona.user_ids()
        x_obf = scorer.segments(obf_ids)
        x_base = scorer.segments(base_ids)
        b_obf = scorer.bid_classes(obf_ids)
        b_base = scorer.bid_classes(base_ids)
        v_obf = scorer.bid_values(obf_ids)
        v_base = scorer.bid_values(base_ids)
        added, removed = metrics.l2_split(x_obf, x_base)
        row = {
            "persona_id": i,
            "l1": metrics.l1(x_obf, x_base),
            "l2": float(metrics.l2(x_obf, x_base)),
            "l2_added": float(added),
            "l2_removed": float(removed),
            "l3": metrics.l3(b_obf, b_base),
            "l4": metrics.l4(v_obf, v_base) if v_obf is not None else None,
        }
        if personalization is not None:
            allowed = np.asarray(personalization.allowed, dtype=np.int64)
            disallowed = np.asarray(personalization.disallowed, dtype=np.int64)
            row["l2_allowed"] = float(np.sum(x_obf[allowed] ^ x_base[allowed]))
            row["l2_disallowed"] = float(np.sum(x_obf[disallowed] ^ x_base[disallowed]))
        for name, acc in accs.items():
            if name in row:
                acc.add(row[name])
        rows.append(row)
        if keep_personas:
            personas.append(persona)

    aggregates = {}
    for name, acc in accs.items():
        if acc.count or acc.excluded:
            aggregates[f"{name}_mean"] = acc.mean()
            aggregates[f"{name}_se"] = acc.std_error()
            aggregates[f"{name}_excluded"] = acc.excluded
    return EvalResult(approach=approach, alpha=alpha, n_personas=n_personas,
                      rows=rows, aggregates=aggregates, personas=personas)


def summarize_persona(universe: UrlUniverse, profile_ids: Sequence[int],
                      chunks: int) -> np.ndarray:
    """Fixed-size summary of a whole profile: per-chunk mean and max rows.

    The visit sequence is split into ``chunks`` contiguous runs; each run
    contributes its mean embedding and its elementwise max, giving a
    (2 * chunks, embed_dim) matrix regardless of profile length.
    """
    ids = np.asarray(list(profile_ids), dtype=np.int64)
    out = np.zeros((2 * chunks, universe.embed_dim))
    if ids.size == 0:
        return out
    parts = np.array_split(ids, chunks)
    for c, part in enumerate(parts):
        if part.size == 0:
            continue
        emb = universe.embeddings[part]
        out[c] = emb.mean(axis=0)
        out[chunks + c] = emb.max(axis=0)
    return out


@dataclass(frozen=True)
class DetectorConfig:
    chunks: int = 5
    kernel_heights: tuple[int, ...] = (3, 4, 5)
    filters_per_kernel: int = 16
    epochs: int = 8
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    clip_norm: float = 5.0
    train_fraction: float = 0.8


def train_detector(universe: UrlUniverse, obf_personas: Sequence[Persona],
                   base_personas: Sequence[Persona], config: DetectorConfig,
                   seed: int, shuffle_labels: bool = False
                   ) -> tuple[SurrogateModel, float]:
    """Adversarial detector on whole-profile summaries; returns its error.

    The two classes must be near-balanced (within 60/40). ``shuffle_labels``
    permutes the labels before the split, the standard sanity check that
    should pin held-out accuracy to chance. Detection error is 1 minus
    held-out accuracy, so higher means stealthier.
    """
    n_obf, n_base = len(obf_personas), len(base_personas)
    total = n_obf + n_base
    if total == 0:
        raise ValueError("no personas given")
    if not 0.4 <= n_obf / total <= 0.6:
        raise ValueError(f"detector classes imbalanced: {n_obf} vs {n_base}")
    x = np.stack([summarize_persona(universe, p.all_ids(), config.chunks)
                  for p in list(obf_personas) + list(base_personas)])
    y = np.concatenate([np.ones(n_obf, dtype=np.int64),
                        np.zeros(n_base, dtype=np.int64)])
    if shuffle_labels:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5AFF1E]))
        y = rng.permutation(y)
    classifier_cfg = SurrogateConfig(
        window=2 * config.chunks, embed_dim=universe.embed_dim,
        kernel_heights=config.kernel_heights,
        filters_per_kernel=config.filters_per_kernel,
        epochs=config.epochs, batch_size=config.batch_size, lr=config.lr,
        momentum=config.momentum, clip_norm=config.clip_norm,
        train_fraction=config.train_fraction)
    detector = SurrogateModel("detector", "detector", classifier_cfg, seed)
    fitted = fit_classifier(detector, x, y, seed)
    return detector, 1.0 - fitted.accuracy


def stealth_detection_error(universe: UrlUniverse, model: McModel,
                            selector: Selector, alpha: float, n_per_class: int,
                            persona_len: int, init_len: int,
                            config: DetectorConfig, seed: int,
                            shuffle_labels: bool = False) -> float:
    """Build balanced obfuscated/base persona sets and train the detector."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE7EC7]))
    obf = [build_persona(model, universe, alpha, persona_len, init_len, selector, rng)
           for _ in range(n_per_class)]
    base = [build_persona(model, universe, 0.0, persona_len, init_len, None, rng)
            for _ in range(n_per_class)]
    _, error = train_detector(universe, obf, base, config, seed,
                              shuffle_labels=shuffle_labels)
    return error


def subcategory_of(universe: UrlUniverse, url_id: int) -> int | None:
    key = universe.group_keys[url_id]
    if key.startswith("sub:"):
        return int(key.split(":", 1)[1])
    return None


def selection_distribution(universe: UrlUniverse, personas: Sequence[Persona]
                           ) -> np.ndarray:
    """Empirical distribution of chosen intent subcategories over personas."""
    counts = np.zeros(universe.n_subcategories)
    for persona in personas:
        for url in persona.obf_ids():
            sub = subcategory_of(universe, url)
            if sub is not None:
                counts[sub] += 1.0
    total = counts.sum()
    if total == 0.0:
        return np.full(universe.n_subcategories, 1.0 / universe.n_subcategories)
    return counts / total


def adaptiveness(universe: UrlUniverse, model: McModel,
                 selector_factory: Callable[[], Selector], alpha: float,
                 n_types: int, personas_per_type: int, persona_len: int,
                 init_len: int, seed: int) -> tuple[np.ndarray, float]:
    """Pairwise distance of per-user-type selection distributions.

    Entry (i, j) is the Euclidean distance between the subcategory
    distributions an approach produces for user types i and j, normalized
    by sqrt(2) so it lies in [0, 1]. Returns the matrix and its off-diagonal
    mean; higher means the approach tailors its choices to the persona.
    """
    n_types = min(n_types, len(model.user_types))
    seeds = np.random.SeedSequence([seed, 0xADA7]).spawn(n_types)
    dists = []
    for t in range(n_types):
        rng = np.random.default_rng(seeds[t])
        selector = selector_factory()
        personas = [
            build_persona(model, universe, alpha, persona_len, init_len,
                          selector, rng, user_type_id=t)
            for _ in range(personas_per_type)
        ]
        dists.append(selection_distribution(universe, personas))
    matrix = np.zeros((n_types, n_types))
    for i in range(n_types):
        for j in range(n_types):
            matrix[i, j] = np.linalg.norm(dists[i] - dists[j]) / np.sqrt(2.0)
    off = matrix[~np.eye(n_types, dtype=bool)]
    return matrix, float(off.mean()) if off.size else 0.0


def budget_sweep(universe: UrlUniverse, scorer, model: McModel,
                 selector_factories: dict[str, Callable[[float], Selector | None]],
                 alphas: Sequence[float], n_personas: int, persona_len: int,
                 init_len: int, seed: int,
                 detector_config: DetectorConfig | None = None,
                 detector_personas: int = 0) -> list[dict]:
    """Privacy metrics (and optionally detection error) per approach x alpha.

    ``selector_factories`` maps approach name to a callable taking alpha and
    returning a fresh selector (None means no obfuscation). Factories that
    train per-alpha (the RL agent with retraining enabled) hide that inside
    the callable.
    """
    rows: list[dict] = []
    for name, factory in selector_factories.items():
        for alpha in alphas:
            selector = factory(alpha)
            result = evaluate_selector(
                universe, scorer, model, selector, alpha, n_personas,
                persona_len, init_len, seed, approach=name)
            row = {"approach": name, "alpha": alpha, **result.aggregates}
            if detector_config is not None and detector_personas > 0 and alpha > 0.0:
                row["detection_error"] = stealth_detection_error(
                    universe, model, factory(alpha), alpha, detector_personas,
                    persona_len, init_len, detector_config, seed)
            rows.append(row)
    return rows
