"""Experiment configuration: presets, JSON loading, env/CLI overrides.

A config file only needs the keys it wants to change; everything else
comes from the preset named by its ``scale`` (or the desk preset). Only
``seed`` and ``scale`` can be overridden from the environment
(OBFUSIM_SEED / OBFUSIM_SCALE); command-line flags beat both.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .metrics import RewardSpec, Personalization
from .oracles import OracleConfig
from .rlagent import A2cConfig
from .surrogate import SurrogateConfig
from .universe import ConfigError, UniverseConfig

SCALES = ("desk", "paper", "custom")

DESK_DOC: dict = {
    "seed": 0,
    "scale": "desk",
    "text_dir": None,
    "universe": {
        "embed_dim": 32,
        "user_categories": 16,
        "urls_per_category": 25,
        "intent_subcategories": 48,
        "urls_per_subcategory": 5,
        "ad_urls": 120,
        "ad_clusters": 10,
        "curated_urls": 48,
        "curated_clusters": 4,
        "noise_scale": 0.35,
    },
    "oracle": {
        "window": 5,
        "segment_candidates": 30,
        "bid_candidates": 14,
        "user_keyed_fraction": 0.3,
        "hybrid_fraction": 0.15,
        "topic_subcats_min": 3,
        "topic_subcats_max": 5,
        "subcat_popularity_exponent": 0.85,
        "rate_low": 0.1,
        "rate_high": 0.18,
        "calibration_windows": 10000,
        "calibration_obf_rate": 0.15,
        "bid_signal_std": 0.6,
        "bid_noise_scale": 0.05,
        "bid_interests_min": 2,
        "bid_interests_max": 4,
    },
    "trace": {
        "n_users": 120,
        "steps": 300,
        "zipf_exponent": 1.0,
        "max_user_types": 40,
        "trace_file": None,
    },
    "collect": {
        "n_personas": 2000,
        "persona_len": 10,
        "alpha_low": 0.0,
        "alpha_high": 0.2,
    },
    "surrogate": {
        "kernel_heights": [3, 4, 5],
        "filters_per_kernel": 16,
        "epochs": 15,
        "batch_size": 32,
        "lr": 0.1,
        "momentum": 0.9,
        "clip_norm": 5.0,
        "train_fraction": 0.8,
        "min_positive_rate": 0.05,
        "positive_weight": 2.0,
        "top_segments": 20,
        "top_bidders": 10,
    },
    "rl": {
        "hidden_dim": 32,
        "rounds": 100,
        "personas_per_round": 16,
        "persona_len": 60,
        "init_len": 12,
        "alpha": 0.1,
        "lr": 0.2,
        "momentum": 0.9,
        "clip_norm": 5.0,
        "discount": 0.99,
        "entropy_coef": 0.01,
        "value_coef": 0.5,
        "repeat_penalty": 0.02,
        "loss_kinds": ["l2", "l3"],
        # bid-class flips are rare, so the l3 agent trains hotter and longer;
        # the l2 agent needs extra entropy and rounds or it collapses onto one
        # globally good subcategory instead of conditioning on the profile
        "kind_overrides": {"l3": {"lr": 0.3, "rounds": 150},
                           "l2": {"rounds": 600, "entropy_coef": 0.05}},
        "personalization": None,
    },
    "baseline": {
        "samples_per_subcat": 40,
        "base_len": 12,
    },
    "eval": {
        "n_personas": 200,
        "alpha": 0.1,
        "persona_len": 60,
        "init_len": 12,
        "dump_personas": True,
    },
    "stealth": {
        "n_per_class": 260,
        "chunks": 5,
        "kernel_heights": [3, 4, 5],
        "filters_per_kernel": 16,
        "epochs": 8,
        "batch_size": 32,
        "lr": 0.02,
        "alpha": 0.1,
        "persona_len": 60,
        "init_len": 12,
    },
    "adapt": {
        "n_types": 12,
        # sampling noise in the per-type selection histograms inflates the
        # distance matrix for diffuse selectors; average enough personas
        # that real cross-type differences dominate the noise floor
        "personas_per_type": 250,
        "alpha": 0.1,
        "persona_len": 60,
        "init_len": 12,
    },
    "sweep": {
        "alphas": [0.05, 0.1, 0.15, 0.2],
        "approaches": ["rl-l2", "rl-l3", "rand-intent", "bias-intent-l2",
                       "adnauseam", "trackthis"],
        "retrain": False,
        "n_personas": 120,
        "persona_len": 60,
        "init_len": 12,
        "detector_personas": 150,
        "detector_approaches": ["rl-l2", "rand-intent", "adnauseam"],
    },
}

PAPER_DOC: dict = {
    "seed": 0,
    "scale": "paper",
    "text_dir": None,
    "universe": {
        "embed_dim": 300,
        "user_categories": 16,
        "urls_per_category": 100,
        "intent_subcategories": 193,
        "urls_per_subcategory": 10,
        "ad_urls": 2000,
        "ad_clusters": 10,
        "curated_urls": 400,
        "curated_clusters": 4,
        "noise_scale": 0.35,
    },
    "oracle": {
        "window": 20,
        "segment_candidates": 184,
        "bid_candidates": 55,
        "user_keyed_fraction": 0.3,
        "hybrid_fraction": 0.15,
        "topic_subcats_min": 3,
        "topic_subcats_max": 6,
        "subcat_popularity_exponent": 0.85,
        "rate_low": 0.07,
        "rate_high": 0.14,
        "calibration_windows": 10000,
        "calibration_obf_rate": 0.15,
        "bid_signal_std": 0.6,
        "bid_noise_scale": 0.1,
        "bid_interests_min": 2,
        "bid_interests_max": 4,
    },
    "trace": {
        "n_users": 500,
        "steps": 1000,
        "zipf_exponent": 1.0,
        "max_user_types": 100,
        "trace_file": None,
    },
    "collect": {
        "n_personas": 10000,
        "persona_len": 20,
        "alpha_low": 0.0,
        "alpha_high": 0.2,
    },
    "surrogate": {
        "kernel_heights": [3, 4, 5],
        "filters_per_kernel": 100,
        "epochs": 30,
        "batch_size": 32,
        "lr": 0.01,
        "momentum": 0.9,
        "clip_norm": 5.0,
        "train_fraction": 0.8,
        "min_positive_rate": 0.05,
        "positive_weight": 1.6,
        "top_segments": 20,
        "top_bidders": 10,
    },
    "rl": {
        "hidden_dim": 256,
        "rounds": 300,
        "personas_per_round": 50,
        "persona_len": 100,
        "init_len": 20,
        "alpha": 0.1,
        "lr": 0.001,
        "momentum": 0.9,
        "clip_norm": 5.0,
        "discount": 0.99,
        "entropy_coef": 0.01,
        "value_coef": 0.5,
        "repeat_penalty": 0.02,
        "loss_kinds": ["l2", "l3"],
        "kind_overrides": {},
        "personalization": None,
    },
    "baseline": {
        "samples_per_subcat": 50,
        "base_len": 20,
    },
    "eval": {
        "n_personas": 1000,
        "alpha": 0.1,
        "persona_len": 100,
        "init_len": 20,
        "dump_personas": True,
    },
    "stealth": {
        "n_per_class": 2000,
        "chunks": 20,
        "kernel_heights": [3, 4, 5],
        "filters_per_kernel": 100,
        "epochs": 10,
        "batch_size": 32,
        "lr": 0.01,
        "alpha": 0.1,
        "persona_len": 100,
        "init_len": 20,
    },
    "adapt": {
        "n_types": 20,
        "personas_per_type": 50,
        "alpha": 0.1,
        "persona_len": 100,
        "init_len": 20,
    },
    "sweep": {
        "alphas": [0.05, 0.1, 0.15, 0.2],
        "approaches": ["rl-l2", "rl-l3", "rand-intent", "bias-intent-l2",
                       "bias-intent-l3", "adnauseam", "trackthis"],
        "retrain": True,
        "n_personas": 500,
        "persona_len": 100,
        "init_len": 20,
        "detector_personas": 1000,
        "detector_approaches": ["rl-l2", "rl-l3", "rand-intent", "bias-intent-l2",
                                "adnauseam", "trackthis"],
    },
}


def preset_doc(scale: str) -> dict:
    if scale == "desk":
        return copy.deepcopy(DESK_DOC)
    if scale == "paper":
        return copy.deepcopy(PAPER_DOC)
    raise ConfigError(f"unknown scale {scale!r}; expected one of {SCALES}")


def merge_docs(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_docs(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _schema() -> dict:
    text = resources.files("obfusim").joinpath("config_schema.json").read_text()
    return json.loads(text)


def validate_doc(doc: dict) -> None:
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {exc.message}") from exc


@dataclass(frozen=True)
class TraceConfig:
    n_users: int = 120
    steps: int = 300
    zipf_exponent: float = 1.0
    max_user_types: int = 40
    trace_file: str | None = None

    def __post_init__(self) -> None:
        if self.n_users < 1 or self.steps < 2:
            raise ConfigError("trace needs n_users >= 1 and steps >= 2")


@dataclass(frozen=True)
class CollectConfig:
    n_personas: int = 2000
    persona_len: int = 10
    alpha_low: float = 0.0
    alpha_high: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha_low <= self.alpha_high < 1.0:
            raise ConfigError("need 0 <= alpha_low <= alpha_high < 1")


@dataclass(frozen=True)
class SurrogateTrainConfig:
    kernel_heights: tuple[int, ...] = (3, 4, 5)
    filters_per_kernel: int = 16
    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    train_fraction: float = 0.8
    min_positive_rate: float = 0.05
    positive_weight: float = 1.0
    top_segments: int = 20
    top_bidders: int = 10

    def to_surrogate_config(self, window: int, embed_dim: int) -> SurrogateConfig:
        return SurrogateConfig(
            window=window, embed_dim=embed_dim,
            kernel_heights=self.kernel_heights,
            filters_per_kernel=self.filters_per_kernel,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            momentum=self.momentum, clip_norm=self.clip_norm,
            train_fraction=self.train_fraction,
            min_positive_rate=self.min_positive_rate,
            positive_weight=self.positive_weight,
            top_segments=self.top_segments, top_bidders=self.top_bidders)


@dataclass(frozen=True)
class PersonalizationConfig:
    disallowed_count: int = 5
    distortion_weight: float = 0.1
    # explicit bank positions to preserve; None marks the last
    # disallowed_count positions instead
    disallowed_ids: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.disallowed_ids is None:
            return
        ids = tuple(int(i) for i in self.disallowed_ids)
        if len(set(ids)) != len(ids):
            raise ConfigError("rl.personalization.disallowed_ids must be unique")
        if len(ids) != self.disallowed_count:
            raise ConfigError("rl.personalization.disallowed_ids must list "
                              "disallowed_count positions")
        object.__setattr__(self, "disallowed_ids", ids)

    def to_spec(self, n_segments: int) -> Personalization:
        if self.disallowed_count >= n_segments:
            raise ConfigError("disallowed_count must leave at least one allowed segment")
        if self.disallowed_ids is None:
            disallowed = tuple(range(n_segments - self.disallowed_count,
                                     n_segments))
        else:
            if any(not 0 <= i < n_segments for i in self.disallowed_ids):
                raise ConfigError("rl.personalization.disallowed_ids out of range")
            disallowed = tuple(sorted(self.disallowed_ids))
        marked = set(disallowed)
        return Personalization(
            allowed=tuple(i for i in range(n_segments) if i not in marked),
            disallowed=disallowed,
            distortion_weight=self.distortion_weight)


@dataclass(frozen=True)
class RlSection:
    hidden_dim: int = 32
    rounds: int = 24
    personas_per_round: int = 16
    persona_len: int = 60
    init_len: int = 12
    alpha: float = 0.1
    lr: float = 0.02
    momentum: float = 0.9
    clip_norm: float = 5.0
    discount: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    repeat_penalty: float = 0.02
    loss_kinds: tuple[str, ...] = ("l2", "l3")
    kind_overrides: dict = field(default_factory=dict)
    personalization: PersonalizationConfig | None = None

    def __post_init__(self) -> None:
        for kind in self.loss_kinds:
            if kind not in ("l1", "l2", "l3"):
                raise ConfigError(f"unknown loss kind {kind!r}")
        if not self.loss_kinds:
            raise ConfigError("rl.loss_kinds must not be empty")
        for kind, doc in self.kind_overrides.items():
            if kind not in ("l1", "l2", "l3"):
                raise ConfigError(f"rl.kind_overrides: unknown loss kind {kind!r}")
            bad = set(doc) - {"lr", "rounds", "personas_per_round", "entropy_coef"}
            if bad:
                raise ConfigError(f"rl.kind_overrides.{kind}: unknown keys {sorted(bad)}")

    def to_a2c(self, n_actions: int, window: int, embed_dim: int,
               kernel_heights: tuple[int, ...], filters_per_kernel: int,
               reward: RewardSpec, alpha: float | None = None,
               rounds: int | None = None, kind: str | None = None) -> A2cConfig:
        over = self.kind_overrides.get(kind, {}) if kind is not None else {}
        base_rounds = over.get("rounds", self.rounds)
        return A2cConfig(
            n_actions=n_actions, window=window, embed_dim=embed_dim,
            kernel_heights=kernel_heights, filters_per_kernel=filters_per_kernel,
            hidden_dim=self.hidden_dim, discount=self.discount,
            entropy_coef=over.get("entropy_coef", self.entropy_coef),
            value_coef=self.value_coef,
            lr=over.get("lr", self.lr), momentum=self.momentum, clip_norm=self.clip_norm,
            rounds=base_rounds if rounds is None else rounds,
            personas_per_round=over.get("personas_per_round", self.personas_per_round),
            persona_len=self.persona_len, init_len=self.init_len,
            alpha=self.alpha if alpha is None else alpha, reward=reward)


@dataclass(frozen=True)
class BaselineConfig:
    samples_per_subcat: int = 40
    base_len: int = 12


@dataclass(frozen=True)
class EvalConfig:
    n_personas: int = 200
    alpha: float = 0.1
    persona_len: int = 60
    init_len: int = 12
    dump_personas: bool = True


@dataclass(frozen=True)
class StealthConfig:
    n_per_class: int = 260
    chunks: int = 5
    kernel_heights: tuple[int, ...] = (3, 4, 5)
    filters_per_kernel: int = 16
    epochs: int = 8
    batch_size: int = 32
    lr: float = 0.02
    alpha: float = 0.1
    persona_len: int = 60
    init_len: int = 12


@dataclass(frozen=True)
class AdaptConfig:
    n_types: int = 12
    personas_per_type: int = 25
    alpha: float = 0.1
    persona_len: int = 60
    init_len: int = 12


@dataclass(frozen=True)
class SweepConfig:
    alphas: tuple[float, ...] = (0.05, 0.1, 0.15, 0.2)
    approaches: tuple[str, ...] = ("rl-l2", "rand-intent")
    retrain: bool = False
    n_personas: int = 120
    persona_len: int = 60
    init_len: int = 12
    detector_personas: int = 150
    detector_approaches: tuple[str, ...] = ()


@dataclass
class ExperimentConfig:
    seed: int
    scale: str
    text_dir: str | None
    universe: UniverseConfig
    oracle: OracleConfig
    trace: TraceConfig
    collect: CollectConfig
    surrogate: SurrogateTrainConfig
    rl: RlSection
    baseline: BaselineConfig
    eval: EvalConfig
    stealth: StealthConfig
    adapt: AdaptConfig
    sweep: SweepConfig
    doc: dict = field(repr=False, default_factory=dict)

    @property
    def window(self) -> int:
        return self.oracle.window

    @property
    def embed_dim(self) -> int:
        return self.universe.embed_dim


def _build_section(cls, doc: dict, name: str, tuple_keys: tuple[str, ...] = ()):
    section = dict(doc.get(name) or {})
    for key in tuple_keys:
        if key in section and section[key] is not None:
            section[key] = tuple(section[key])
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from exc


def build_config(doc: dict) -> ExperimentConfig:
    validate_doc(doc)
    seed = int(doc.get("seed", 0))
    scale = str(doc.get("scale", "desk"))
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}")
    rl_doc = dict(doc.get("rl") or {})
    pers_doc = rl_doc.get("personalization")
    if pers_doc is not None:
        rl_doc["personalization"] = PersonalizationConfig(**pers_doc)
    if "loss_kinds" in rl_doc and rl_doc["loss_kinds"] is not None:
        rl_doc["loss_kinds"] = tuple(rl_doc["loss_kinds"])
    doc_built = dict(doc)
    doc_built["rl"] = rl_doc
    try:
        rl = RlSection(**rl_doc)
    except TypeError as exc:
        raise ConfigError(f"config section 'rl': {exc}") from exc
    return ExperimentConfig(
        seed=seed,
        scale=scale,
        text_dir=doc.get("text_dir"),
        universe=_build_section(UniverseConfig, doc, "universe"),
        oracle=_build_section(OracleConfig, doc, "oracle"),
        trace=_build_section(TraceConfig, doc, "trace"),
        collect=_build_section(CollectConfig, doc, "collect"),
        surrogate=_build_section(SurrogateTrainConfig, doc, "surrogate",
                                 ("kernel_heights",)),
        rl=rl,
        baseline=_build_section(BaselineConfig, doc, "baseline"),
        eval=_build_section(EvalConfig, doc, "eval"),
        stealth=_build_section(StealthConfig, doc, "stealth", ("kernel_heights",)),
        adapt=_build_section(AdaptConfig, doc, "adapt"),
        sweep=_build_section(SweepConfig, doc, "sweep",
                             ("alphas", "approaches", "detector_approaches")),
        doc=doc,
    )


def load_config(path: str | Path | None = None, cli_seed: int | None = None,
                cli_scale: str | None = None,
                env: dict | None = None) -> ExperimentConfig:
    """Resolve the effective config: preset <- file <- env <- CLI flags."""
    env = os.environ if env is None else env
    file_doc: dict = {}
    if path is not None:
        try:
            file_doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(file_doc, dict):
            raise ConfigError("config file must contain a JSON object")

    scale = file_doc.get("scale", "desk")
    if env.get("OBFUSIM_SCALE"):
        scale = env["OBFUSIM_SCALE"]
    if cli_scale is not None:
        scale = cli_scale
    if scale not in ("desk", "paper"):
        raise ConfigError(f"scale must be 'desk' or 'paper', got {scale!r}")

    doc = merge_docs(preset_doc(scale), file_doc)
    doc["scale"] = scale
    if env.get("OBFUSIM_SEED"):
        try:
            doc["seed"] = int(env["OBFUSIM_SEED"])
        except ValueError:
            raise ConfigError(f"OBFUSIM_SEED must be an integer, "
                              f"got {env['OBFUSIM_SEED']!r}")
    if cli_seed is not None:
        doc["seed"] = cli_seed
    return build_config(doc)
