"""Ground-truth tracker models: segment triggers and header-bidding values.

A segment oracle fires when the mean cosine similarity between the last
``window`` URL embeddings and its prototype reaches a calibrated threshold.
A bid oracle prices the same window as ``base * exp(weights . sims + noise)``
and classes the bid high when the value reaches its frozen mean + std.
Both kinds read nothing but the last ``window`` URL ids of a profile, and
bidder noise is a deterministic function of (bidder, window ids), so every
oracle output is reproducible given the same profile and seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .universe import UrlUniverse


@dataclass(frozen=True)
class OracleConfig:
    window: int = 20
    segment_candidates: int = 184
    bid_candidates: int = 55
    user_keyed_fraction: float = 0.3
    hybrid_fraction: float = 0.15
    topic_subcats_min: int = 3
    topic_subcats_max: int = 6
    subcat_popularity_exponent: float = 0.85
    rate_low: float = 0.07
    rate_high: float = 0.14
    calibration_windows: int = 10_000
    calibration_obf_rate: float = 0.15
    bid_signal_std: float = 0.4
    bid_noise_scale: float = 0.3
    bid_interests_min: int = 2
    bid_interests_max: int = 4

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 < self.rate_low < self.rate_high < 1.0:
            raise ValueError("need 0 < rate_low < rate_high < 1")
        if self.segment_candidates < 1 or self.bid_candidates < 1:
            raise ValueError("need at least one candidate oracle of each kind")
        if not 0.0 <= self.calibration_obf_rate < 1.0:
            raise ValueError("calibration_obf_rate must be in [0, 1)")


def _mix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
    return x


def window_hash_normal(window_ids: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic standard-normal draw per window row of URL ids.

    ``window_ids`` has shape (n, w); the result has shape (n,). Pads (-1)
    participate in the hash like any other id, and the draw depends on the
    id order within the window.
    """
    ids = np.asarray(window_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    h = np.full(ids.shape[0], np.uint64(salt & 0xFFFFFFFFFFFFFFFF))
    with np.errstate(over="ignore"):
        for col in range(ids.shape[1]):
            h = _mix64(h ^ (ids[:, col] + 2).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15))
    u = (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return ndtri(u)


def mean_similarities(window_emb: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Mean cosine similarity of window rows to each prototype.

    window_emb: (n, w, d) or (w, d); prototypes: (k, d) unit rows. Zero rows
    (padding) contribute zero similarity. Returns (n, k) or (k,).
    """
    single = window_emb.ndim == 2
    emb = window_emb[None] if single else window_emb
    norms = np.linalg.norm(emb, axis=2, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = emb / safe
    sims = unit @ prototypes.T                 # (n, w, k)
    out = sims.mean(axis=1)
    return out[0] if single else out


@dataclass
class SegmentOracle:
    oracle_id: str
    prototype: np.ndarray
    threshold: float
    groups: tuple[str, ...] = ()
    target_rate: float = 0.0


@dataclass
class BidOracle:
    oracle_id: str
    base_value: float
    weights: np.ndarray                        # over the shared ref prototypes
    noise_scale: float
    mean_value: float = 0.0
    std_value: float = 0.0
    salt: int = 0


@dataclass
class OracleSet:
    window: int
    segments: list[SegmentOracle]
    bidders: list[BidOracle]
    ref_prototypes: np.ndarray = field(repr=False)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def n_bidders(self) -> int:
        return len(self.bidders)

    def segment_ids(self) -> list[str]:
        return [s.oracle_id for s in self.segments]

    def bidder_ids(self) -> list[str]:
        return [b.oracle_id for b in self.bidders]

    def _segment_prototypes(self) -> np.ndarray:
        return np.stack([s.prototype for s in self.segments])

    def segment_vector(self, universe: UrlUniverse, profile_ids) -> np.ndarray:
        """Binary vector of triggered segments for the last-window of a profile."""
        window = last_window_ids(profile_ids, self.window)
        emb = universe.window_embeddings(window)
        sims = mean_similarities(emb, self._segment_prototypes())
        thresholds = np.array([s.threshold for s in self.segments])
        return (sims >= thresholds).astype(np.int64)

    def segment_matrix(self, universe: UrlUniverse, windows: np.ndarray) -> np.ndarray:
        """Batched segment responses for pre-cut windows of shape (n, window)."""
        emb = np.stack([universe.window_embeddings(w) for w in windows])
        sims = mean_similarities(emb, self._segment_prototypes())
        thresholds = np.array([s.threshold for s in self.segments])
        return (sims >= thresholds).astype(np.int64)

    def bid_values(self, universe: UrlUniverse, profile_ids) -> np.ndarray:
        window = last_window_ids(profile_ids, self.window)
        return self.bid_values_batch(universe, window[None, :])[0]

    def bid_values_batch(self, universe: UrlUniverse, windows: np.ndarray) -> np.ndarray:
        emb = np.stack([universe.window_embeddings(w) for w in windows])
        sims = mean_similarities(emb, self.ref_prototypes)   # (n, refs)
        values = np.empty((windows.shape[0], len(self.bidders)))
        for j, bidder in enumerate(self.bidders):
            noise = window_hash_normal(windows, bidder.salt) * bidder.noise_scale
            values[:, j] = bidder.base_value * np.exp(sims @ bidder.weights + noise)
        return values

    def bid_classes(self, universe: UrlUniverse, profile_ids) -> np.ndarray:
        values = self.bid_values(universe, profile_ids)
        return self.classify_values(values[None, :])[0]

    def classify_values(self, values: np.ndarray) -> np.ndarray:
        cut = np.array([b.mean_value + b.std_value for b in self.bidders])
        return (values >= cut).astype(np.int64)

    def save_json(self, path: str | Path) -> None:
        doc = {
            "window": self.window,
            "ref_prototypes": self.ref_prototypes.tolist(),
            "segments": [
                {
                    "oracle_id": s.oracle_id,
                    "prototype": s.prototype.tolist(),
                    "threshold": s.threshold,
                    "groups": list(s.groups),
                    "target_rate": s.target_rate,
                }
                for s in self.segments
            ],
            "bidders": [
                {
                    "oracle_id": b.oracle_id,
                    "base_value": b.base_value,
                    "weights": b.weights.tolist(),
                    "noise_scale": b.noise_scale,
                    "mean_value": b.mean_value,
                    "std_value": b.std_value,
                    "salt": b.salt,
                }
                for b in self.bidders
            ],
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "OracleSet":
        doc = json.loads(Path(path).read_text())
        segments = [
            SegmentOracle(
                oracle_id=s["oracle_id"],
                prototype=np.asarray(s["prototype"], dtype=np.float64),
                threshold=float(s["threshold"]),
                groups=tuple(s["groups"]),
                target_rate=float(s["target_rate"]),
            )
            for s in doc["segments"]
        ]
        bidders = [
            BidOracle(
                oracle_id=b["oracle_id"],
                base_value=float(b["base_value"]),
                weights=np.asarray(b["weights"], dtype=np.float64),
                noise_scale=float(b["noise_scale"]),
                mean_value=float(b["mean_value"]),
                std_value=float(b["std_value"]),
                salt=int(b["salt"]),
            )
            for b in doc["bidders"]
        ]
        return cls(
            window=int(doc["window"]),
            segments=segments,
            bidders=bidders,
            ref_prototypes=np.asarray(doc["ref_prototypes"], dtype=np.float64),
        )


def last_window_ids(profile_ids, window: int) -> np.ndarray:
    """Last ``window`` URL ids of a profile, left-padded with -1 when short."""
    ids = np.asarray(list(profile_ids), dtype=np.int64)
    if ids.size >= window:
        return ids[-window:]
    return np.concatenate([np.full(window - ids.size, -1, dtype=np.int64), ids])


def sample_calibration_windows(universe: UrlUniverse, n: int, window: int,
                               obf_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Seeded random windows: user URLs with a Bernoulli mix of intent URLs."""
    n_user = sum(len(c) for c in universe.user_categories)
    user_ids = np.concatenate(universe.user_categories)
    intent_ids = np.concatenate(universe.intent_subcategories)
    out = user_ids[rng.integers(0, n_user, size=(n, window))]
    mask = rng.random((n, window)) < obf_rate
    k = int(mask.sum())
    if k:
        out[mask] = intent_ids[rng.integers(0, len(intent_ids), size=k)]
    return out.astype(np.int64)


def _subcat_popularity(n_subcats: int, exponent: float,
                       rng: np.random.Generator) -> np.ndarray:
    ranks = rng.permutation(n_subcats).astype(np.float64)
    weights = 1.0 / (1.0 + ranks) ** exponent
    return weights / weights.sum()


def build_oracles(universe: UrlUniverse, config: OracleConfig, seed: int) -> OracleSet:
    """Create and calibrate the candidate oracle population.

    Segment prototypes are unit-normalized sums of content-group prototypes:
    a share are keyed to a single user category, a share mix a user category
    with intent subcategories, and the rest span a few intent subcategories
    drawn with a popularity skew (shared hub subcategories emerge). Segment
    thresholds are per-oracle quantiles of the calibration-window similarity
    distribution at seeded target rates in [rate_low, rate_high]. Bidder
    weights are rescaled so the interest signal has a fixed std, then the
    value mean and std are frozen from the same calibration population.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0AC1E]))
    n_cats = len(universe.user_categories)
    n_subs = universe.n_subcategories
    popularity = _subcat_popularity(n_subs, config.subcat_popularity_exponent, rng)

    n_user_keyed = int(round(config.user_keyed_fraction * config.segment_candidates))
    n_hybrid = int(round(config.hybrid_fraction * config.segment_candidates))
    segments: list[SegmentOracle] = []
    for k in range(config.segment_candidates):
        groups: list[str] = []
        if k < n_user_keyed:
            groups.append(f"cat:{int(rng.integers(0, n_cats))}")
        else:
            if k < n_user_keyed + n_hybrid:
                groups.append(f"cat:{int(rng.integers(0, n_cats))}")
            g = int(rng.integers(config.topic_subcats_min, config.topic_subcats_max + 1))
            g = min(g, n_subs)
            subs = rng.choice(n_subs, size=g, replace=False, p=popularity)
            groups.extend(f"sub:{int(s)}" for s in sorted(subs))
        proto = np.sum([universe.prototypes[g] for g in groups], axis=0)
        proto = proto / np.linalg.norm(proto)
        target = float(rng.uniform(config.rate_low, config.rate_high))
        segments.append(SegmentOracle(
            oracle_id=f"seg{k:03d}", prototype=proto, threshold=0.0,
            groups=tuple(groups), target_rate=target))

    ref_prototypes = np.stack([s.prototype for s in segments])

    bidders: list[BidOracle] = []
    for i in range(config.bid_candidates):
        n_int = int(rng.integers(config.bid_interests_min, config.bid_interests_max + 1))
        refs = rng.choice(len(segments), size=min(n_int, len(segments)), replace=False)
        weights = np.zeros(len(segments))
        weights[refs] = rng.uniform(0.5, 1.0, size=len(refs))
        bidders.append(BidOracle(
            oracle_id=f"bid{i:03d}",
            base_value=float(rng.uniform(0.2, 2.0)),
            weights=weights,
            noise_scale=config.bid_noise_scale,
            salt=int(rng.integers(0, 2 ** 62)),
        ))

    oracle_set = OracleSet(window=config.window, segments=segments,
                           bidders=bidders, ref_prototypes=ref_prototypes)
    _calibrate(oracle_set, universe, config, rng)
    return oracle_set


def _calibrate(oracle_set: OracleSet, universe: UrlUniverse,
               config: OracleConfig, rng: np.random.Generator) -> None:
    windows = sample_calibration_windows(
        universe, config.calibration_windows, config.window,
        config.calibration_obf_rate, rng)
    emb = np.stack([universe.window_embeddings(w) for w in windows])
    sims = mean_similarities(emb, oracle_set.ref_prototypes)     # (n, candidates)

    for k, seg in enumerate(oracle_set.segments):
        seg.threshold = float(np.quantile(sims[:, k], 1.0 - seg.target_rate))

    for bidder in oracle_set.bidders:
        signal = sims @ bidder.weights
        spread = float(np.std(signal))
        if spread > 0.0:
            bidder.weights = bidder.weights * (config.bid_signal_std / spread)
        noise = window_hash_normal(windows, bidder.salt) * bidder.noise_scale
        values = bidder.base_value * np.exp(sims @ bidder.weights + noise)
        bidder.mean_value = float(np.mean(values))
        bidder.std_value = float(np.std(values))


def calibration_report(oracle_set: OracleSet, universe: UrlUniverse,
                       config: OracleConfig, seed: int) -> dict:
    """Measured positive rates on a fresh seeded calibration population."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA11B]))
    windows = sample_calibration_windows(
        universe, config.calibration_windows, config.window,
        config.calibration_obf_rate, rng)
    seg = oracle_set.segment_matrix(universe, windows)
    values = oracle_set.bid_values_batch(universe, windows)
    classes = oracle_set.classify_values(values)
    return {
        "segment_rates": seg.mean(axis=0).tolist(),
        "bid_class_rates": classes.mean(axis=0).tolist(),
    }
