"""Evaluation harnesses: metric aggregation, detector, adaptiveness, sweep."""

import numpy as np
import pytest

from obfusim.analysis import (
    DetectorConfig,
    OracleScorer,
    SurrogateScorer,
    adaptiveness,
    budget_sweep,
    evaluate_selector,
    selection_distribution,
    stealth_detection_error,
    subcategory_of,
    summarize_persona,
    train_detector,
)
from obfusim.baselines import RandIntentSelector, RandomPoolSelector
from obfusim.persona import Persona, build_persona

SEED = 7

DETECTOR = DetectorConfig(chunks=3, kernel_heights=(2, 3), filters_per_kernel=4,
                          epochs=6, batch_size=16, lr=0.05)


class FixedSelector:
    def __init__(self, url_id):
        self.url_id = url_id

    def begin(self, persona):
        pass

    def select(self, persona, universe, rng):
        return self.url_id


class TypeKeyedSelector:
    """Picks from the subcategory matching the persona's user type id."""

    def begin(self, persona):
        self.subcat = persona.user_type_id

    def select(self, persona, universe, rng):
        urls = universe.subcategory_urls(self.subcat % universe.n_subcategories)
        return int(urls[rng.integers(0, len(urls))])


class StubScorer:
    """Two segments and one bidder keyed to specific (non-user-pool) URLs."""

    name = "stub"

    def __init__(self, seg_urls=(80, 81), bid_url=82):
        self.seg_urls = seg_urls
        self.bid_url = bid_url

    def segments(self, profile_ids):
        ids = set(profile_ids)
        return np.array([int(u in ids) for u in self.seg_urls], dtype=np.int64)

    def bid_classes(self, profile_ids):
        return np.array([int(self.bid_url in set(profile_ids))], dtype=np.int64)

    def bid_values(self, profile_ids):
        count = sum(1 for u in profile_ids if u == self.bid_url)
        return np.array([1.0 + count])


def test_scorer_adapters(mini_universe, mini_oracles, rng):
    scorer = OracleScorer(mini_oracles, mini_universe)
    profile = rng.integers(0, mini_universe.n_urls, 9).tolist()
    np.testing.assert_array_equal(
        scorer.segments(profile),
        mini_oracles.segment_vector(mini_universe, profile))
    np.testing.assert_array_equal(
        scorer.bid_classes(profile),
        mini_oracles.bid_classes(mini_universe, profile))
    assert scorer.bid_values(profile) is not None
    assert scorer.name == "oracle"
    assert SurrogateScorer.name == "surrogate"


def test_evaluate_control_arm(mini_universe, mini_mc):
    """No obfuscation: nothing changes, so l2 and l3 are 0 and l4 is 1."""
    result = evaluate_selector(mini_universe, StubScorer(), mini_mc, None,
                               alpha=0.0, n_personas=12, persona_len=10,
                               init_len=2, seed=SEED, approach="control")
    assert result.approach == "control"
    assert result.aggregates["l2_mean"] == 0.0
    assert result.aggregates["l3_mean"] == 0.0
    assert result.aggregates["l4_mean"] == 1.0
    # user-pool URLs never hit the stub segments, so l1 is always undefined
    assert result.aggregates["l1_mean"] is None
    assert result.aggregates["l1_excluded"] == 12
    assert not result.personas


def test_evaluate_obfuscated_arm(mini_universe, mini_mc):
    result = evaluate_selector(mini_universe, StubScorer(), mini_mc,
                               FixedSelector(80), alpha=0.5, n_personas=10,
                               persona_len=12, init_len=2, seed=SEED,
                               approach="fixed", keep_personas=True)
    # every persona with at least one obf visit turns segment 0 on
    assert result.aggregates["l1_mean"] == 1.0
    assert result.aggregates["l2_mean"] == 1.0
    assert result.aggregates["l2_added_mean"] == 1.0
    assert result.aggregates["l2_removed_mean"] == 0.0
    assert result.aggregates["l3_mean"] == 0.0
    assert len(result.personas) == 10
    for row in result.rows:
        assert row["l4"] == 1.0   # bid URL 82 never chosen


def test_evaluate_deterministic(mini_universe, mini_mc):
    kw = dict(alpha=0.3, n_personas=8, persona_len=10, init_len=2, seed=SEED,
              keep_personas=True)
    a = evaluate_selector(mini_universe, StubScorer(), mini_mc,
                          RandIntentSelector(), **kw)
    b = evaluate_selector(mini_universe, StubScorer(), mini_mc,
                          RandIntentSelector(), **kw)
    assert a.rows == b.rows
    assert [p.visits for p in a.personas] == [p.visits for p in b.personas]
    c = evaluate_selector(mini_universe, StubScorer(), mini_mc,
                          RandIntentSelector(), alpha=0.3, n_personas=8,
                          persona_len=10, init_len=2, seed=SEED + 1,
                          keep_personas=True)
    assert [p.visits for p in a.personas] != [p.visits for p in c.personas]


def test_evaluate_personalization_columns(mini_universe, mini_mc):
    from obfusim.metrics import Personalization
    spec = Personalization(allowed=(0,), disallowed=(1,))
    result = evaluate_selector(mini_universe, StubScorer(), mini_mc,
                               FixedSelector(80), alpha=0.5, n_personas=6,
                               persona_len=12, init_len=2, seed=SEED,
                               personalization=spec)
    assert result.aggregates["l2_allowed_mean"] == 1.0
    assert result.aggregates["l2_disallowed_mean"] == 0.0


def test_summarize_persona_reference(mini_universe, rng):
    ids = rng.integers(0, mini_universe.n_urls, 10)
    out = summarize_persona(mini_universe, ids, chunks=3)
    assert out.shape == (6, mini_universe.embed_dim)
    parts = np.array_split(ids, 3)
    for c, part in enumerate(parts):
        emb = mini_universe.embeddings[part]
        np.testing.assert_allclose(out[c], emb.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(out[3 + c], emb.max(axis=0), rtol=1e-12)
    empty = summarize_persona(mini_universe, [], chunks=3)
    assert not empty.any()


def test_detector_balance_guard(mini_universe, mini_mc):
    rng = np.random.default_rng(SEED)
    personas = [build_persona(mini_mc, mini_universe, 0.0, 6, 0, None, rng)
                for _ in range(40)]
    with pytest.raises(ValueError, match="imbalanced"):
        train_detector(mini_universe, personas[:10], personas[10:], DETECTOR, SEED)
    with pytest.raises(ValueError, match="no personas"):
        train_detector(mini_universe, [], [], DETECTOR, SEED)


def test_detector_separates_blatant_obfuscation(mini_universe, mini_mc):
    """Ad-pool floods differ from clean chain profiles; error must be low."""
    error = stealth_detection_error(
        mini_universe, mini_mc, RandomPoolSelector(mini_universe.ad_pool),
        alpha=0.5, n_per_class=60, persona_len=20, init_len=2,
        config=DETECTOR, seed=SEED)
    assert error < 0.35


def test_detector_shuffled_labels_at_chance(mini_universe, mini_mc):
    error = stealth_detection_error(
        mini_universe, mini_mc, RandomPoolSelector(mini_universe.ad_pool),
        alpha=0.5, n_per_class=60, persona_len=20, init_len=2,
        config=DETECTOR, seed=SEED, shuffle_labels=True)
    assert 0.25 <= error <= 0.75


def test_subcategory_of(mini_universe):
    sub_url = int(mini_universe.subcategory_urls(3)[0])
    assert subcategory_of(mini_universe, sub_url) == 3
    user_url = int(mini_universe.user_categories[0][0])
    assert subcategory_of(mini_universe, user_url) is None
    ad_url = int(mini_universe.ad_pool[0])
    assert subcategory_of(mini_universe, ad_url) is None


def test_selection_distribution(mini_universe):
    sub0 = int(mini_universe.subcategory_urls(0)[0])
    sub2 = int(mini_universe.subcategory_urls(2)[0])
    personas = [
        Persona(visits=[(sub0, "obf"), (sub0, "obf"), (sub2, "obf"), (5, "user")]),
        Persona(visits=[(sub2, "obf")]),
    ]
    dist = selection_distribution(mini_universe, personas)
    assert dist[0] == pytest.approx(0.5)
    assert dist[2] == pytest.approx(0.5)
    assert dist.sum() == pytest.approx(1.0)
    uniform = selection_distribution(mini_universe, [Persona()])
    np.testing.assert_allclose(uniform, 1.0 / mini_universe.n_subcategories)


def test_adaptiveness_type_blind_selector_scores_zero(mini_universe, mini_mc):
    """A selector that ignores the user type has identical distributions."""
    sub0 = int(mini_universe.subcategory_urls(0)[0])
    matrix, off = adaptiveness(mini_universe, mini_mc,
                               lambda: FixedSelector(sub0), alpha=0.4,
                               n_types=4, personas_per_type=3, persona_len=10,
                               init_len=2, seed=SEED)
    assert matrix.shape == (4, 4)
    np.testing.assert_allclose(matrix, matrix.T)
    np.testing.assert_allclose(np.diag(matrix), 0.0)
    assert off == pytest.approx(0.0)


def test_adaptiveness_type_keyed_selector_scores_high(mini_universe, mini_mc):
    matrix, off = adaptiveness(mini_universe, mini_mc, TypeKeyedSelector,
                               alpha=0.4, n_types=4, personas_per_type=3,
                               persona_len=12, init_len=2, seed=SEED)
    # distinct types choose disjoint subcategories: normalized distance 1
    assert off == pytest.approx(1.0)
    assert matrix.max() <= 1.0 + 1e-9


def test_budget_sweep_rows(mini_universe, mini_mc):
    rows = budget_sweep(
        mini_universe, StubScorer(), mini_mc,
        {"rand-intent": lambda alpha: RandIntentSelector(),
         "fixed": lambda alpha: FixedSelector(80)},
        alphas=(0.1, 0.3), n_personas=8, persona_len=10, init_len=2, seed=SEED)
    assert len(rows) == 4
    assert {(r["approach"], r["alpha"]) for r in rows} == {
        ("rand-intent", 0.1), ("rand-intent", 0.3), ("fixed", 0.1), ("fixed", 0.3)}
    for row in rows:
        assert "l2_mean" in row and "detection_error" not in row


def test_budget_sweep_with_detector(mini_universe, mini_mc):
    rows = budget_sweep(
        mini_universe, StubScorer(), mini_mc,
        {"pool": lambda alpha: RandomPoolSelector(mini_universe.ad_pool)},
        alphas=(0.4,), n_personas=6, persona_len=12, init_len=2, seed=SEED,
        detector_config=DETECTOR, detector_personas=30)
    assert len(rows) == 1
    assert 0.0 <= rows[0]["detection_error"] <= 1.0
