"""Shared fixtures: one small synthetic environment reused across test modules.

Everything here is sized for speed. Session scope keeps the expensive pieces
(universe build, oracle calibration, MC fit) to a single construction.
"""

import numpy as np
import pytest

from obfusim.oracles import OracleConfig, build_oracles
from obfusim.persona import fit_mc, generate_synthetic_traces
from obfusim.universe import UniverseConfig, build_universe

SEED = 7


@pytest.fixture(scope="session")
def mini_universe():
    config = UniverseConfig(
        embed_dim=16,
        user_categories=4,
        urls_per_category=10,
        intent_subcategories=8,
        urls_per_subcategory=4,
        ad_urls=20,
        ad_clusters=4,
        curated_urls=12,
        curated_clusters=3,
        noise_scale=0.35,
    )
    return build_universe(config, SEED)


@pytest.fixture(scope="session")
def mini_oracle_config():
    return OracleConfig(
        window=4,
        segment_candidates=8,
        bid_candidates=5,
        user_keyed_fraction=0.3,
        hybrid_fraction=0.15,
        topic_subcats_min=2,
        topic_subcats_max=3,
        rate_low=0.08,
        rate_high=0.25,
        calibration_windows=1500,
        calibration_obf_rate=0.15,
        bid_signal_std=0.6,
        bid_noise_scale=0.05,
        bid_interests_min=2,
        bid_interests_max=3,
    )


@pytest.fixture(scope="session")
def mini_oracles(mini_universe, mini_oracle_config):
    return build_oracles(mini_universe, mini_oracle_config, SEED)


@pytest.fixture(scope="session")
def mini_traces(mini_universe):
    return generate_synthetic_traces(mini_universe, n_users=30, steps=120, seed=SEED)


@pytest.fixture(scope="session")
def mini_mc(mini_traces):
    model, _ = fit_mc(mini_traces, max_user_types=12)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)
