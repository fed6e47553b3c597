"""URL universe construction, embedding properties, and persistence."""

import numpy as np
import pytest

from obfusim.universe import (
    ConfigError,
    HashedTextEmbedder,
    SyntheticEmbedder,
    UniverseConfig,
    UrlUniverse,
    build_universe,
)


def test_url_counts_add_up(mini_universe):
    cfg = mini_universe.config
    expected = (cfg.user_categories * cfg.urls_per_category
                + cfg.intent_subcategories * cfg.urls_per_subcategory
                + cfg.ad_urls + cfg.curated_urls)
    assert mini_universe.n_urls == expected
    assert mini_universe.embeddings.shape == (expected, cfg.embed_dim)
    assert mini_universe.n_subcategories == cfg.intent_subcategories


def test_embeddings_unit_norm(mini_universe):
    norms = np.linalg.norm(mini_universe.embeddings, axis=1)
    np.testing.assert_allclose(norms, np.ones_like(norms), rtol=1e-9)


def test_groups_partition_urls(mini_universe):
    seen = np.zeros(mini_universe.n_urls, dtype=bool)
    pools = (mini_universe.user_categories + mini_universe.intent_subcategories
             + [mini_universe.ad_pool, mini_universe.curated_pool])
    for pool in pools:
        assert not seen[pool].any(), "a URL appears in two pools"
        seen[pool] = True
    assert seen.all()


def test_group_members_cluster_around_prototype(mini_universe):
    """Same-group URLs must be far more similar than cross-group ones."""
    uni = mini_universe
    first = uni.intent_subcategories[0]
    other = uni.intent_subcategories[1]
    within = uni.embeddings[first] @ uni.embeddings[first].T
    across = uni.embeddings[first] @ uni.embeddings[other].T
    within_mean = (within.sum() - len(first)) / (len(first) ** 2 - len(first))
    assert within_mean > across.mean() + 0.3


def test_subcategory_urls_and_category_of(mini_universe):
    sub0 = mini_universe.subcategory_urls(0)
    assert len(sub0) == mini_universe.config.urls_per_subcategory
    key = mini_universe.category_of(int(sub0[0]))
    assert all(mini_universe.category_of(int(u)) == key for u in sub0)


def test_window_embeddings_pad_rows(mini_universe):
    ids = np.array([0, -1, 3])
    rows = mini_universe.window_embeddings(ids)
    assert rows.shape == (3, mini_universe.embed_dim)
    assert not rows[1].any()
    np.testing.assert_array_equal(rows[0], mini_universe.embeddings[0])


def test_build_is_deterministic(mini_universe):
    again = build_universe(mini_universe.config, 7)
    np.testing.assert_array_equal(again.embeddings, mini_universe.embeddings)
    assert again.group_keys == mini_universe.group_keys
    different = build_universe(mini_universe.config, 8)
    assert not np.array_equal(different.embeddings, mini_universe.embeddings)


def test_save_load_round_trip(mini_universe, tmp_path):
    path = tmp_path / "universe.json"
    mini_universe.save_json(path)
    loaded = UrlUniverse.load_json(path)
    np.testing.assert_array_equal(loaded.embeddings, mini_universe.embeddings)
    assert loaded.group_keys == mini_universe.group_keys
    assert loaded.config == mini_universe.config
    np.testing.assert_array_equal(loaded.ad_pool, mini_universe.ad_pool)
    for a, b in zip(loaded.intent_subcategories, mini_universe.intent_subcategories):
        np.testing.assert_array_equal(a, b)


def test_config_validation():
    with pytest.raises(ConfigError):
        UniverseConfig(embed_dim=1)
    with pytest.raises(ConfigError):
        UniverseConfig(ad_urls=2, ad_clusters=5)
    with pytest.raises(ConfigError):
        UniverseConfig(noise_scale=-0.1)


def test_synthetic_embedder_noise_scale(rng):
    emb = SyntheticEmbedder(embed_dim=24, noise_scale=0.35, rng=rng)
    proto = emb.prototype()
    assert np.linalg.norm(proto) == pytest.approx(1.0)
    sims = [float(emb.embed(proto) @ proto) for _ in range(200)]
    # unit prototype plus noise of expected norm 0.35: cosine stays high
    assert 0.9 < np.mean(sims) < 1.0


def test_hashed_text_embedder_deterministic():
    emb = HashedTextEmbedder(embed_dim=16, seed=3)
    a = emb.embed_text("Sports news and scores")
    b = emb.embed_text("Sports news and scores")
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    c = HashedTextEmbedder(embed_dim=16, seed=4).embed_text("Sports news and scores")
    assert not np.allclose(a, c)
    empty = emb.embed_text("!!!")
    assert np.linalg.norm(empty) == pytest.approx(1.0)
