"""Surrogate tracker models: per-oracle binary CNN classifiers.

One dataset is collected per candidate oracle by replaying seeded personas
(chain-driven user URLs plus uniform intent-pool obfuscation at a random
per-persona budget) and labeling each persona's final window with the
oracle's response. Datasets whose positive rate falls below the configured
floor are dropped. Each surviving dataset trains an independent encoder +
two-way softmax head; the best models per kind are kept by balanced
accuracy on the held-out split.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .nn import TextCnnEncoder, DenseHead, SgdOptimizer, cross_entropy_dlogits
from .baselines import RandIntentSelector
from .nn.checkpoint import arrays_to_payload, payload_to_arrays
from .oracles import OracleSet, last_window_ids
from .persona import McModel, Persona, build_persona
from .universe import UrlUniverse


@dataclass(frozen=True)
class SurrogateConfig:
    window: int = 20
    embed_dim: int = 300
    kernel_heights: tuple[int, ...] = (3, 4, 5)
    filters_per_kernel: int = 100
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 5.0
    train_fraction: float = 0.8
    min_positive_rate: float = 0.05
    positive_weight: float = 1.0
    top_segments: int = 20
    top_bidders: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if not 0.0 <= self.min_positive_rate < 1.0:
            raise ValueError("min_positive_rate must be in [0, 1)")
        if self.positive_weight <= 0.0:
            raise ValueError("positive_weight must be positive")


@dataclass
class SurrogateDataset:
    target_id: str
    kind: str                      # "segment" or "bid"
    labels: np.ndarray             # (n,)
    windows: np.ndarray = field(repr=False)   # (n, window) URL ids, shared

    @property
    def positive_rate(self) -> float:
        return float(np.mean(self.labels))

    def split(self, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F117]))
        order = rng.permutation(len(self.labels))
        cut = int(round(train_fraction * len(order)))
        return order[:cut], order[cut:]


@dataclass
class CollectedData:
    windows: np.ndarray                        # (n, window)
    datasets: list[SurrogateDataset]
    dropped: list[str]

    def save_npz(self, path: str | Path) -> None:
        arrays = {"windows": self.windows}
        meta = []
        for i, ds in enumerate(self.datasets):
            arrays[f"labels_{i}"] = ds.labels
            meta.append({"target_id": ds.target_id, "kind": ds.kind})
        np.savez_compressed(path, meta=json.dumps({"datasets": meta, "dropped": self.dropped}),
                            **arrays)

    @classmethod
    def load_npz(cls, path: str | Path) -> "CollectedData":
        with np.load(path, allow_pickle=False) as doc:
            meta = json.loads(str(doc["meta"]))
            windows = doc["windows"]
            datasets = [
                SurrogateDataset(
                    target_id=m["target_id"], kind=m["kind"],
                    labels=doc[f"labels_{i}"], windows=windows)
                for i, m in enumerate(meta["datasets"])
            ]
        return cls(windows=windows, datasets=datasets, dropped=meta["dropped"])


def collect_datasets(universe: UrlUniverse, oracles: OracleSet, model: McModel,
                     n_personas: int, persona_len: int, alpha_range: tuple[float, float],
                     min_positive_rate: float, seed: int) -> CollectedData:
    """One labeled sample per (persona, oracle): final window vs response.

    Personas draw a uniform user type and an obfuscation budget uniform in
    ``alpha_range``; low-positive-rate targets are dropped and recorded.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC011EC7]))
    selector = RandIntentSelector()
    lo, hi = alpha_range
    if not 0.0 <= lo <= hi < 1.0:
        raise ValueError(f"bad alpha_range {alpha_range}")
    windows = np.empty((n_personas, oracles.window), dtype=np.int64)
    for i in range(n_personas):
        alpha = float(rng.uniform(lo, hi))
        persona = build_persona(model, universe, alpha, persona_len, 0,
                                selector if alpha > 0.0 else None, rng)
        windows[i] = last_window_ids(persona.all_ids(), oracles.window)

    seg_labels = oracles.segment_matrix(universe, windows)
    bid_values = oracles.bid_values_batch(universe, windows)
    bid_labels = oracles.classify_values(bid_values)

    datasets: list[SurrogateDataset] = []
    dropped: list[str] = []
    for k, seg in enumerate(oracles.segments):
        labels = seg_labels[:, k].astype(np.int64)
        if labels.mean() < min_positive_rate:
            dropped.append(seg.oracle_id)
            continue
        datasets.append(SurrogateDataset(seg.oracle_id, "segment", labels, windows))
    for j, bidder in enumerate(oracles.bidders):
        labels = bid_labels[:, j].astype(np.int64)
        if labels.mean() < min_positive_rate:
            dropped.append(bidder.oracle_id)
            continue
        datasets.append(SurrogateDataset(bidder.oracle_id, "bid", labels, windows))
    return CollectedData(windows=windows, datasets=datasets, dropped=dropped)


@dataclass
class SurrogateMetrics:
    tpr: float
    fpr: float
    balanced_accuracy: float
    accuracy: float
    test_positive_rate: float


class SurrogateModel:
    """CNN encoder plus two-way softmax head imitating one oracle."""

    def __init__(self, target_id: str, kind: str, config: SurrogateConfig,
                 seed: int) -> None:
        self.target_id = target_id
        self.kind = kind
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x50DE1]))
        self.encoder = TextCnnEncoder(
            config.window, config.embed_dim, config.kernel_heights,
            config.filters_per_kernel, rng=rng)
        self.head = DenseHead((self.encoder.output_dim, 2), final="softmax", rng=rng)
        self.metrics: SurrogateMetrics | None = None

    def params(self):
        return self.encoder.params() + self.head.params()

    def predict_proba(self, window_emb: np.ndarray) -> np.ndarray:
        feats = self.encoder.forward(window_emb)
        return self.head.forward(feats)

    def predict(self, window_emb: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(window_emb), axis=1)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name + f".{i}": p.value
                for i, p in enumerate(self.params())}

    def to_payload(self) -> dict:
        m = asdict(self.metrics) if self.metrics else None
        return {
            "target_id": self.target_id,
            "kind": self.kind,
            "config": _config_doc(self.config),
            "metrics": m,
            "arrays": arrays_to_payload(self.state_arrays()),
        }

    @classmethod
    def from_payload(cls, doc: dict) -> "SurrogateModel":
        config = _config_from_doc(doc["config"])
        model = cls(doc["target_id"], doc["kind"], config, seed=0)
        arrays = payload_to_arrays(doc["arrays"])
        for i, p in enumerate(model.params()):
            p.value[...] = arrays[p.name + f".{i}"]
        if doc.get("metrics"):
            model.metrics = SurrogateMetrics(**doc["metrics"])
        return model


def _config_doc(config: SurrogateConfig) -> dict:
    doc = asdict(config)
    doc["kernel_heights"] = list(config.kernel_heights)
    return doc


def _config_from_doc(doc: dict) -> SurrogateConfig:
    doc = dict(doc)
    doc["kernel_heights"] = tuple(doc["kernel_heights"])
    return SurrogateConfig(**doc)


def fit_classifier(model: SurrogateModel, x: np.ndarray, y: np.ndarray,
                   seed: int) -> SurrogateMetrics:
    """Fit a window classifier on embedded inputs (n, rows, d) with labels y.

    Uses the model's own config for the split, inverse-frequency class
    weights computed on the training side, seeded epoch shuffles, and SGD
    with momentum and gradient clipping. Held-out metrics are stored on
    the model and returned.
    """
    config = model.config
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F117]))
    order = rng.permutation(len(y))
    cut = int(round(config.train_fraction * len(order)))
    train_idx, test_idx = order[:cut], order[cut:]
    train_labels = y[train_idx]
    if len(np.unique(train_labels)) < 2:
        raise ValueError(
            f"{model.target_id}: training split has a single class; "
            "collect more data or lower min_positive_rate")

    optimizer = SgdOptimizer(model.params(), lr=config.lr,
                             momentum=config.momentum, clip_norm=config.clip_norm)
    n = len(train_idx)
    counts = np.bincount(train_labels, minlength=2).astype(np.float64)
    class_weights = n / (2.0 * np.maximum(counts, 1.0))
    # extra recall emphasis; the selection criterion has far more FPR slack
    class_weights[1] *= config.positive_weight

    epoch_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA1]))
    for _ in range(config.epochs):
        epoch_order = epoch_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = train_idx[epoch_order[start:start + config.batch_size]]
            feats, enc_cache = model.encoder.forward_cached(x[batch])
            probs, head_cache = model.head.forward_cached(feats)
            d_logits = cross_entropy_dlogits(probs, y[batch], class_weights[y[batch]])
            d_feats = model.head.backward_from_logits(d_logits, head_cache)
            model.encoder.backward(d_feats, enc_cache)
            optimizer.step()

    test_y = y[test_idx]
    pred = model.predict(x[test_idx])
    tp = int(np.sum((pred == 1) & (test_y == 1)))
    fn = int(np.sum((pred == 0) & (test_y == 1)))
    fp = int(np.sum((pred == 1) & (test_y == 0)))
    tn = int(np.sum((pred == 0) & (test_y == 0)))
    tpr = tp / max(tp + fn, 1)
    fpr = fp / max(fp + tn, 1)
    model.metrics = SurrogateMetrics(
        tpr=tpr,
        fpr=fpr,
        balanced_accuracy=(tpr + (1.0 - fpr)) / 2.0,
        accuracy=(tp + tn) / max(len(test_y), 1),
        test_positive_rate=float(np.mean(test_y)) if len(test_y) else 0.0,
    )
    return model.metrics


def train_surrogate(dataset: SurrogateDataset, universe: UrlUniverse,
                    config: SurrogateConfig, seed: int) -> SurrogateModel:
    """Train one oracle-imitating classifier on the dataset's 80/20 split."""
    emb = np.stack([universe.window_embeddings(w) for w in dataset.windows])
    model = SurrogateModel(dataset.target_id, dataset.kind, config, seed)
    fit_classifier(model, emb, dataset.labels, seed)
    return model


def select_top(models: Sequence[SurrogateModel], k: int) -> list[SurrogateModel]:
    """Top-k by held-out balanced accuracy; ties break on target id."""
    ranked = sorted(models, key=lambda m: (-m.metrics.balanced_accuracy, m.target_id))
    if len(ranked) < k:
        warnings.warn(f"requested top {k} but only {len(ranked)} models available")
        return list(ranked)
    return ranked[:k]


class _ModelStack:
    """Same-architecture models applied to a window batch in one pass.

    The per-step training reward queries every bank model twice per
    obfuscation step; looping over models spends nearly all the time in
    small-array overhead. Stacking the conv and head weights turns the
    loop into one einsum per kernel height. Predictions match the
    per-model path because argmax over the two class logits equals argmax
    over their softmax.
    """

    def __init__(self, models: Sequence[SurrogateModel]) -> None:
        first = models[0].config
        for m in models[1:]:
            if m.config != first:
                raise ValueError("stacked scoring needs identical model configs")
        self.rows = first.window
        self.embed_dim = first.embed_dim
        self.kernel_heights = tuple(first.kernel_heights)
        self.conv_w = [np.stack([m.encoder.weights[i].value for m in models])
                       for i in range(len(self.kernel_heights))]
        self.conv_b = [np.stack([m.encoder.biases[i].value for m in models])
                       for i in range(len(self.kernel_heights))]
        heads = [m.head.layers[0] for m in models]
        self.head_w = np.stack([layer.w.value for layer in heads])
        self.head_b = np.stack([layer.b.value for layer in heads])

    def predict(self, emb: np.ndarray) -> np.ndarray:
        """Class predictions for a window batch: (B, rows, d) -> (B, M)."""
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim == 2:
            emb = emb[None, :, :]
        b = emb.shape[0]
        feats = []
        for k, w, bias in zip(self.kernel_heights, self.conv_w, self.conv_b):
            positions = self.rows - k + 1
            win = np.stack([emb[:, p:p + k, :].reshape(b, k * self.embed_dim)
                            for p in range(positions)], axis=1)
            scores = np.einsum("bpj,mfj->bmpf", win, w) + bias[None, :, None, :]
            feats.append(np.maximum(scores, 0.0).max(axis=2))
        stacked = np.concatenate(feats, axis=2)
        logits = np.einsum("bmf,mof->bmo", stacked, self.head_w) + self.head_b[None]
        return np.argmax(logits, axis=2).astype(np.int64)


class SurrogateBank:
    """The selected segment and bid surrogates, queried as one tracker view.

    Scoring goes through a stacked fast path built lazily from the model
    weights, so models must not be retrained after the bank is queried.
    """

    def __init__(self, segments: Sequence[SurrogateModel],
                 bidders: Sequence[SurrogateModel]) -> None:
        self.segments = list(segments)
        self.bidders = list(bidders)
        self._stacks: dict[str, _ModelStack] = {}

    def segment_ids(self) -> list[str]:
        return [m.target_id for m in self.segments]

    def bidder_ids(self) -> list[str]:
        return [m.target_id for m in self.bidders]

    def _stack(self, kind: str) -> _ModelStack:
        stack = self._stacks.get(kind)
        if stack is None:
            models = self.segments if kind == "segment" else self.bidders
            stack = _ModelStack(models)
            self._stacks[kind] = stack
        return stack

    def _vectors(self, kind: str, universe: UrlUniverse,
                 profiles: Sequence) -> np.ndarray:
        stack = self._stack(kind)
        emb = np.stack([
            universe.window_embeddings(last_window_ids(ids, stack.rows))
            for ids in profiles])
        return stack.predict(emb)

    def segment_vectors(self, universe: UrlUniverse,
                        profiles: Sequence) -> np.ndarray:
        """Segment vectors for several profiles at once: (B, n_segments)."""
        if not self.segments:
            raise ValueError("bank holds no segment models")
        return self._vectors("segment", universe, profiles)

    def bid_class_vectors(self, universe: UrlUniverse,
                          profiles: Sequence) -> np.ndarray:
        if not self.bidders:
            raise ValueError("bank holds no bid models")
        return self._vectors("bid", universe, profiles)

    def segment_vector(self, universe: UrlUniverse, profile_ids) -> np.ndarray:
        return self.segment_vectors(universe, [profile_ids])[0]

    def bid_class_vector(self, universe: UrlUniverse, profile_ids) -> np.ndarray:
        return self.bid_class_vectors(universe, [profile_ids])[0]

    def save_json(self, path: str | Path) -> None:
        doc = {
            "segments": [m.to_payload() for m in self.segments],
            "bidders": [m.to_payload() for m in self.bidders],
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "SurrogateBank":
        doc = json.loads(Path(path).read_text())
        return cls(
            segments=[SurrogateModel.from_payload(m) for m in doc["segments"]],
            bidders=[SurrogateModel.from_payload(m) for m in doc["bidders"]],
        )


class SurrogateLossEvaluator:
    """Profile loss of an in-progress persona, as the surrogates see it.

    For l1/l2 the loss compares segment vectors of the full profile window
    and the user-only window; for l3 it compares high-bid class vectors.
    An undefined l1 (no segments on the obfuscated side) counts as 0 so the
    training reward stays defined. The l3 training signal is the raw sum of
    class changes rather than the reported per-bidder mean: same optimum,
    but on the same scale as the count-valued l2 signal.
    """

    def __init__(self, bank: SurrogateBank, universe: UrlUniverse,
                 spec: metrics.RewardSpec) -> None:
        self.bank = bank
        self.universe = universe
        self.spec = spec

    def loss(self, persona: Persona) -> float:
        if self.spec.loss_kind == "l3":
            b_obf, b_base = self.bank.bid_class_vectors(
                self.universe, [persona.all_ids(), persona.user_ids()])
            return float(np.sum(b_obf.astype(np.int64) - b_base.astype(np.int64)))
        x_obf, x_base = self.bank.segment_vectors(
            self.universe, [persona.all_ids(), persona.user_ids()])
        if self.spec.personalization is not None:
            return metrics.personalized_l2(x_obf, x_base, self.spec.personalization)
        if self.spec.loss_kind == "l1":
            value = metrics.l1(x_obf, x_base)
            return 0.0 if value is None else value
        return float(metrics.l2(x_obf, x_base))
