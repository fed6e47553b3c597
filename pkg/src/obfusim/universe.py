"""Synthetic URL universe: embeddings, category pools, and obfuscation pools.

URL ids are dense integers laid out user URLs first (category-major), then
intent URLs (subcategory-major), then the ad pool, then the curated pool.
Every URL belongs to exactly one content group (a user category, an intent
subcategory, or an ad/curated cluster); each group has a unit prototype
vector and member embeddings are noisy copies of it on the unit sphere.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Raised for config values that cannot produce a valid universe."""


@dataclass(frozen=True)
class UniverseConfig:
    embed_dim: int = 300
    user_categories: int = 16
    urls_per_category: int = 100
    intent_subcategories: int = 193
    urls_per_subcategory: int = 10
    ad_urls: int = 2000
    ad_clusters: int = 10
    curated_urls: int = 400
    curated_clusters: int = 4
    noise_scale: float = 0.35

    def __post_init__(self) -> None:
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        for name in ("user_categories", "urls_per_category", "intent_subcategories",
                     "urls_per_subcategory", "ad_urls", "ad_clusters",
                     "curated_urls", "curated_clusters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.ad_clusters > self.ad_urls or self.curated_clusters > self.curated_urls:
            raise ConfigError("cluster count exceeds pool size")
        if self.noise_scale < 0.0:
            raise ConfigError("noise_scale must be >= 0")


class SyntheticEmbedder:
    """Draws URL embeddings as unit-normalized noisy copies of a prototype.

    ``noise_scale`` is the expected L2 norm of the pre-normalization noise,
    independent of the embedding dimension.
    """

    def __init__(self, embed_dim: int, noise_scale: float, rng: np.random.Generator) -> None:
        self.embed_dim = embed_dim
        self.noise_scale = noise_scale
        self.rng = rng

    def prototype(self) -> np.ndarray:
        v = self.rng.normal(0.0, 1.0, self.embed_dim)
        return v / np.linalg.norm(v)

    def embed(self, prototype: np.ndarray) -> np.ndarray:
        noise = self.rng.normal(0.0, self.noise_scale / np.sqrt(self.embed_dim),
                                self.embed_dim)
        v = prototype + noise
        return v / np.linalg.norm(v)


class HashedTextEmbedder:
    """Deterministic bag-of-words embedder using feature hashing.

    Tokens are lowercased alphanumeric runs, hashed into a fixed number of
    buckets with a seeded blake2 digest, and the bucket counts are projected
    to the target dimension with a seeded random matrix. Output is unit
    normalized. The same (text, seed) pair always produces the same vector.
    """

    def __init__(self, embed_dim: int, seed: int, buckets: int = 1024) -> None:
        self.embed_dim = embed_dim
        self.buckets = buckets
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, buckets, embed_dim]))
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(buckets), (buckets, embed_dim))

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"),
                                 key=str(self.seed).encode("ascii"),
                                 digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.buckets

    def embed_text(self, text: str) -> np.ndarray:
        counts = np.zeros(self.buckets)
        for token in re.findall(r"[a-z0-9]+", text.lower()):
            counts[self._bucket(token)] += 1.0
        v = counts @ self.projection
        norm = np.linalg.norm(v)
        if norm == 0.0:
            v = np.zeros(self.embed_dim)
            v[0] = 1.0
            return v
        return v / norm


@dataclass
class UrlUniverse:
    config: UniverseConfig
    embeddings: np.ndarray                      # (n_urls, embed_dim)
    group_keys: list[str] = field(repr=False)   # per-URL content group
    prototypes: dict[str, np.ndarray] = field(repr=False)
    user_categories: list[np.ndarray] = field(repr=False)
    intent_subcategories: list[np.ndarray] = field(repr=False)
    ad_pool: np.ndarray = field(repr=False)
    curated_pool: np.ndarray = field(repr=False)

    @property
    def n_urls(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def n_subcategories(self) -> int:
        return len(self.intent_subcategories)

    def category_of(self, url_id: int) -> str:
        return self.group_keys[url_id]

    def subcategory_urls(self, subcat: int) -> np.ndarray:
        return self.intent_subcategories[subcat]

    def window_embeddings(self, window_ids: np.ndarray) -> np.ndarray:
        """Embedding rows for a window of URL ids; id -1 pads a zero row."""
        ids = np.asarray(window_ids, dtype=np.int64)
        out = np.zeros((ids.shape[0], self.embed_dim))
        valid = ids >= 0
        out[valid] = self.embeddings[ids[valid]]
        return out

    def save_json(self, path: str | Path) -> None:
        doc = {
            "config": self.config.__dict__,
            "embeddings": self.embeddings.tolist(),
            "group_keys": self.group_keys,
            "prototypes": {k: v.tolist() for k, v in self.prototypes.items()},
            "user_categories": [ids.tolist() for ids in self.user_categories],
            "intent_subcategories": [ids.tolist() for ids in self.intent_subcategories],
            "ad_pool": self.ad_pool.tolist(),
            "curated_pool": self.curated_pool.tolist(),
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "UrlUniverse":
        doc = json.loads(Path(path).read_text())
        return cls(
            config=UniverseConfig(**doc["config"]),
            embeddings=np.asarray(doc["embeddings"], dtype=np.float64),
            group_keys=list(doc["group_keys"]),
            prototypes={k: np.asarray(v, dtype=np.float64)
                        for k, v in doc["prototypes"].items()},
            user_categories=[np.asarray(ids, dtype=np.int64)
                             for ids in doc["user_categories"]],
            intent_subcategories=[np.asarray(ids, dtype=np.int64)
                                  for ids in doc["intent_subcategories"]],
            ad_pool=np.asarray(doc["ad_pool"], dtype=np.int64),
            curated_pool=np.asarray(doc["curated_pool"], dtype=np.int64),
        )


def _cluster_sizes(total: int, clusters: int) -> list[int]:
    base = total // clusters
    sizes = [base] * clusters
    for i in range(total - base * clusters):
        sizes[i] += 1
    return sizes


def build_universe(config: UniverseConfig, seed: int,
                   texts: dict[int, str] | None = None) -> UrlUniverse:
    """Build the URL universe; optional ``texts`` replace synthetic embeddings.

    ``texts`` maps URL id to a UTF-8 document; those URLs are embedded with
    the hashed-text embedder instead of the prototype-plus-noise draw.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5eed]))
    embedder = SyntheticEmbedder(config.embed_dim, config.noise_scale, rng)

    group_plan: list[tuple[str, int]] = []
    group_plan += [(f"cat:{i}", config.urls_per_category)
                   for i in range(config.user_categories)]
    group_plan += [(f"sub:{j}", config.urls_per_subcategory)
                   for j in range(config.intent_subcategories)]
    group_plan += [(f"ad:{c}", n) for c, n in
                   enumerate(_cluster_sizes(config.ad_urls, config.ad_clusters))]
    group_plan += [(f"cur:{c}", n) for c, n in
                   enumerate(_cluster_sizes(config.curated_urls, config.curated_clusters))]

    prototypes = {key: embedder.prototype() for key, _ in group_plan}
    embeddings = []
    group_keys: list[str] = []
    members: dict[str, list[int]] = {key: [] for key, _ in group_plan}
    url_id = 0
    for key, count in group_plan:
        for _ in range(count):
            embeddings.append(embedder.embed(prototypes[key]))
            group_keys.append(key)
            members[key].append(url_id)
            url_id += 1

    if texts:
        text_embedder = HashedTextEmbedder(config.embed_dim, seed)
        for uid, text in texts.items():
            if not 0 <= uid < url_id:
                raise ConfigError(f"text for unknown URL id {uid}")
            embeddings[uid] = text_embedder.embed_text(text)

    emb = np.asarray(embeddings, dtype=np.float64)
    user_cats = [np.asarray(members[f"cat:{i}"], dtype=np.int64)
                 for i in range(config.user_categories)]
    subcats = [np.asarray(members[f"sub:{j}"], dtype=np.int64)
               for j in range(config.intent_subcategories)]
    ad_pool = np.concatenate([members[f"ad:{c}"] for c in range(config.ad_clusters)])
    curated_pool = np.concatenate([members[f"cur:{c}"]
                                   for c in range(config.curated_clusters)])
    return UrlUniverse(
        config=config,
        embeddings=emb,
        group_keys=group_keys,
        prototypes=prototypes,
        user_categories=user_cats,
        intent_subcategories=subcats,
        ad_pool=ad_pool.astype(np.int64),
        curated_pool=curated_pool.astype(np.int64),
    )


def load_texts_dir(path: str | Path) -> dict[int, str]:
    """Read ``<url_id>.txt`` files from a directory into a texts mapping."""
    texts: dict[int, str] = {}
    for p in sorted(Path(path).glob("*.txt")):
        try:
            uid = int(p.stem)
        except ValueError:
            raise ConfigError(f"text file name must be a URL id, got {p.name}")
        texts[uid] = p.read_text(encoding="utf-8")
    return texts
