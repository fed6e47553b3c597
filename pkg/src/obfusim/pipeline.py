"""Stage runner: artifacts, manifest, and idempotent re-runs.

Each stage hashes the config sections and upstream stages it depends on;
a stage whose recorded hash matches and whose files still exist is
skipped. Heavyweight artifacts carry the stage hash in their filename,
report-facing CSVs keep plain names so runs can be diffed byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import reporting
from .analysis import (DetectorConfig, OracleScorer, SurrogateScorer,
                       adaptiveness, budget_sweep, evaluate_selector,
                       stealth_detection_error)
from .baselines import (BiasIntentSelector, RandIntentSelector,
                        RandomPoolSelector, estimate_bias_weights)
from .config import ExperimentConfig, StealthConfig
from .metrics import Personalization, RewardSpec
from .oracles import OracleSet, build_oracles, calibration_report
from .persona import (fit_mc, generate_synthetic_traces, load_traces_csv,
                      save_personas_jsonl, save_traces_csv, McModel)
from .rlagent import AgentSelector, PolicyAgent, train
from .surrogate import (CollectedData, SurrogateBank, SurrogateLossEvaluator,
                        collect_datasets, select_top, train_surrogate)
from .universe import UrlUniverse, build_universe, load_texts_dir

STAGE_ORDER = (
    "gen-universe", "fit-mc", "collect", "train-surrogates", "train-rl",
    "train-baselines", "evaluate", "stealth", "adapt", "sweep", "report",
)

# stage -> (config paths hashed, upstream stages)
STAGE_SPEC: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "gen-universe": (("universe", "oracle", "text_dir"), ()),
    "fit-mc": (("trace",), ("gen-universe",)),
    "collect": (("collect", "surrogate.min_positive_rate"),
                ("gen-universe", "fit-mc")),
    "train-surrogates": (("surrogate",), ("gen-universe", "collect")),
    "train-rl": (("rl", "surrogate.kernel_heights", "surrogate.filters_per_kernel"),
                 ("gen-universe", "fit-mc", "train-surrogates")),
    "train-baselines": (("baseline", "rl.loss_kinds", "rl.repeat_penalty"),
                        ("gen-universe", "fit-mc", "train-surrogates")),
    "evaluate": (("eval", "rl.loss_kinds"),
                 ("gen-universe", "fit-mc", "train-surrogates", "train-rl",
                  "train-baselines")),
    "stealth": (("stealth",),
                ("gen-universe", "fit-mc", "train-rl", "train-baselines")),
    "adapt": (("adapt",),
              ("gen-universe", "fit-mc", "train-rl", "train-baselines")),
    "sweep": (("sweep", "stealth", "rl"),
              ("gen-universe", "fit-mc", "train-surrogates", "train-rl",
               "train-baselines")),
    "report": ((), ("train-surrogates", "train-rl", "evaluate", "stealth",
                    "adapt", "sweep")),
}

AGENT_KIND_INDEX = {"l1": 0, "l2": 1, "l3": 2, "l2p": 3}


class MissingArtifactError(RuntimeError):
    """An upstream stage has not been run (or is stale) in this run dir."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:10]


def _doc_path(doc: dict, path: str):
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


@dataclass
class RunContext:
    config: ExperimentConfig
    out_dir: Path
    manifest: dict = field(default_factory=dict)
    log: Callable[[str], None] = print

    def __post_init__(self) -> None:
        self.out_dir = Path(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.manifest_path
        if path.exists():
            self.manifest = json.loads(path.read_text())
        else:
            self.manifest = {"format": 1, "stages": {}}

    @property
    def manifest_path(self) -> Path:
        return self.out_dir / "manifest.json"

    def save_manifest(self) -> None:
        self.manifest["config"] = self.config.doc
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2,
                                                 sort_keys=True) + "\n")

    def stage_hash(self, stage: str) -> str:
        sections, upstream = STAGE_SPEC[stage]
        doc = self.config.doc
        payload = {
            "stage": stage,
            "seed": doc.get("seed", 0),
            "sections": {path: _doc_path(doc, path) for path in sections},
            "upstream": {up: self.stage_hash(up) for up in upstream},
        }
        return content_hash(payload)

    def is_current(self, stage: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        if not entry or entry.get("hash") != self.stage_hash(stage):
            return False
        return all((self.out_dir / name).exists()
                   for name in entry["artifacts"].values())

    def require(self, stage: str) -> None:
        if not self.is_current(stage):
            raise MissingArtifactError(
                f"stage '{stage}' has no current artifacts in {self.out_dir}; "
                f"run `obfusim {stage}` (same config and seed) first")

    def artifact_path(self, stage: str, key: str) -> Path:
        self.require(stage)
        entry = self.manifest["stages"][stage]
        if key not in entry["artifacts"]:
            raise MissingArtifactError(f"stage '{stage}' has no artifact {key!r}")
        return self.out_dir / entry["artifacts"][key]

    def record(self, stage: str, artifacts: dict[str, str], duration: float) -> None:
        self.manifest["stages"][stage] = {
            "hash": self.stage_hash(stage),
            "artifacts": artifacts,
            "duration_s": round(duration, 3),
        }
        self.save_manifest()


def _load_universe(ctx: RunContext) -> UrlUniverse:
    return UrlUniverse.load_json(ctx.artifact_path("gen-universe", "universe"))


def _load_oracles(ctx: RunContext) -> OracleSet:
    return OracleSet.load_json(ctx.artifact_path("gen-universe", "oracles"))


def _load_mc(ctx: RunContext) -> McModel:
    return McModel.load_json(ctx.artifact_path("fit-mc", "mc"))


def _load_bank(ctx: RunContext) -> SurrogateBank:
    return SurrogateBank.load_json(ctx.artifact_path("train-surrogates", "bank"))


def _load_agents(ctx: RunContext) -> dict[str, PolicyAgent]:
    ctx.require("train-rl")
    entry = ctx.manifest["stages"]["train-rl"]["artifacts"]
    agents = {}
    for key, name in entry.items():
        if key.startswith("agent-"):
            agents[key[len("agent-"):]] = PolicyAgent.load_json(ctx.out_dir / name)
    return agents


def _load_bias_weights(ctx: RunContext) -> dict[str, np.ndarray]:
    path = ctx.artifact_path("train-baselines", "bias-weights")
    doc = json.loads(path.read_text())
    return {kind: np.asarray(w, dtype=np.float64) for kind, w in doc.items()}


def _agent_seed(seed: int, kind: str) -> int:
    return seed * 8 + AGENT_KIND_INDEX[kind]


def _reward_spec(cfg: ExperimentConfig, kind: str,
                 n_segments: int) -> RewardSpec:
    personalization = None
    if kind == "l2p":
        if cfg.rl.personalization is None:
            raise ValueError("personalized agent requested without rl.personalization")
        personalization = cfg.rl.personalization.to_spec(n_segments)
        kind = "l2"
    return RewardSpec(loss_kind=kind, repeat_penalty=cfg.rl.repeat_penalty,
                      personalization=personalization)


def _detector_config(st: StealthConfig) -> DetectorConfig:
    return DetectorConfig(chunks=st.chunks, kernel_heights=st.kernel_heights,
                          filters_per_kernel=st.filters_per_kernel,
                          epochs=st.epochs, batch_size=st.batch_size, lr=st.lr)


def translate_personalization(spec, bank: SurrogateBank,
                              oracles: OracleSet):
    """Re-express a bank-positional allowed/disallowed split in oracle columns.

    The split is defined over bank positions (the space the agent trains in);
    oracle segment vectors are ordered by oracle id, so scoring against
    oracles needs the same segments addressed by their oracle positions.
    """
    position = {seg.oracle_id: k for k, seg in enumerate(oracles.segments)}
    return Personalization(
        allowed=tuple(position[bank.segments[i].target_id] for i in spec.allowed),
        disallowed=tuple(position[bank.segments[i].target_id]
                         for i in spec.disallowed),
        distortion_weight=spec.distortion_weight)


# --- stage bodies ---------------------------------------------------------

def stage_gen_universe(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    texts = load_texts_dir(cfg.text_dir) if cfg.text_dir else None
    universe = build_universe(cfg.universe, cfg.seed, texts=texts)
    oracles = build_oracles(universe, cfg.oracle, cfg.seed)
    report = calibration_report(oracles, universe, cfg.oracle, cfg.seed)

    h = ctx.stage_hash("gen-universe")
    names = {"universe": f"universe-{h}.json", "oracles": f"oracles-{h}.json",
             "oracle_rates": "oracle_rates.csv"}
    universe.save_json(ctx.out_dir / names["universe"])
    oracles.save_json(ctx.out_dir / names["oracles"])
    rows = []
    for seg, rate in zip(oracles.segments, report["segment_rates"]):
        rows.append({"oracle_id": seg.oracle_id, "kind": "segment",
                     "target_rate": seg.target_rate, "measured_rate": rate})
    for bidder, rate in zip(oracles.bidders, report["bid_class_rates"]):
        rows.append({"oracle_id": bidder.oracle_id, "kind": "bid",
                     "target_rate": None, "measured_rate": rate})
    reporting.write_csv(ctx.out_dir / names["oracle_rates"],
                        ["oracle_id", "kind", "target_rate", "measured_rate"], rows)
    ctx.log(f"  universe: {universe.n_urls} urls, dim {universe.embed_dim}; "
            f"oracles: {oracles.n_segments} segment + {oracles.n_bidders} bid")
    return names


def stage_fit_mc(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    if cfg.trace.trace_file:
        traces = load_traces_csv(cfg.trace.trace_file)
    else:
        universe = _load_universe(ctx)
        traces = generate_synthetic_traces(universe, cfg.trace.n_users,
                                           cfg.trace.steps, cfg.seed,
                                           cfg.trace.zipf_exponent)
    model, diag = fit_mc(traces, max_user_types=cfg.trace.max_user_types)

    h = ctx.stage_hash("fit-mc")
    names = {"mc": f"mc-{h}.json", "traces": f"traces-{h}.csv",
             "mc_diagnostics": "mc_diagnostics.csv"}
    model.save_json(ctx.out_dir / names["mc"])
    save_traces_csv(ctx.out_dir / names["traces"], traces)
    rows = [{"section": "n_users", "key": "", "value": float(diag.n_users)},
            {"section": "n_transitions", "key": "", "value": float(diag.n_transitions)},
            {"section": "user_types", "key": "", "value": float(len(model.user_types))}]
    rows += [{"section": "state_frequency", "key": str(i), "value": v}
             for i, v in enumerate(diag.state_frequencies)]
    rows += [{"section": "autocorrelation", "key": str(lag + 1), "value": v}
             for lag, v in enumerate(diag.autocorrelation)]
    reporting.write_csv(ctx.out_dir / names["mc_diagnostics"],
                        ["section", "key", "value"], rows)
    ctx.log(f"  chain fitted on {diag.n_users} users, "
            f"{len(model.user_types)} user types")
    return names


def stage_collect(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    universe = _load_universe(ctx)
    oracles = _load_oracles(ctx)
    model = _load_mc(ctx)
    data = collect_datasets(universe, oracles, model, cfg.collect.n_personas,
                            cfg.collect.persona_len,
                            (cfg.collect.alpha_low, cfg.collect.alpha_high),
                            cfg.surrogate.min_positive_rate, cfg.seed)

    h = ctx.stage_hash("collect")
    names = {"datasets": f"datasets-{h}.npz", "collect_report": "collect_report.csv"}
    data.save_npz(ctx.out_dir / names["datasets"])
    rows = [{"target_id": ds.target_id, "kind": ds.kind, "n_samples": len(ds.labels),
             "positive_rate": ds.positive_rate, "kept": True}
            for ds in data.datasets]
    rows += [{"target_id": tid, "kind": "segment" if tid.startswith("seg") else "bid",
              "n_samples": len(data.windows), "positive_rate": None, "kept": False}
             for tid in data.dropped]
    reporting.write_csv(ctx.out_dir / names["collect_report"],
                        ["target_id", "kind", "n_samples", "positive_rate", "kept"],
                        rows)
    ctx.log(f"  {len(data.datasets)} datasets kept, {len(data.dropped)} dropped "
            f"(positive rate under {cfg.surrogate.min_positive_rate})")
    return names


def stage_train_surrogates(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    universe = _load_universe(ctx)
    data = CollectedData.load_npz(ctx.artifact_path("collect", "datasets"))
    surrogate_cfg = cfg.surrogate.to_surrogate_config(cfg.window, cfg.embed_dim)

    by_kind: dict[str, list] = {"segment": [], "bid": []}
    for i, dataset in enumerate(data.datasets):
        model = train_surrogate(dataset, universe, surrogate_cfg, cfg.seed + i)
        by_kind[dataset.kind].append(model)
        ctx.log(f"  {dataset.target_id}: balanced acc "
                f"{model.metrics.balanced_accuracy:.3f} "
                f"(tpr {model.metrics.tpr:.3f}, fpr {model.metrics.fpr:.3f})")
    segments = select_top(by_kind["segment"], surrogate_cfg.top_segments)
    bidders = select_top(by_kind["bid"], surrogate_cfg.top_bidders)
    bank = SurrogateBank(segments, bidders)

    h = ctx.stage_hash("train-surrogates")
    names = {"bank": f"bank-{h}.json", "surrogate_models": "surrogate_models.csv"}
    bank.save_json(ctx.out_dir / names["bank"])
    kept = {id(m) for m in segments} | {id(m) for m in bidders}
    rows = []
    for kind in ("segment", "bid"):
        for model in by_kind[kind]:
            m = model.metrics
            rows.append({"target_id": model.target_id, "kind": kind,
                         "tpr": m.tpr, "fpr": m.fpr,
                         "balanced_accuracy": m.balanced_accuracy,
                         "accuracy": m.accuracy,
                         "test_positive_rate": m.test_positive_rate,
                         "selected": id(model) in kept})
    reporting.write_csv(ctx.out_dir / names["surrogate_models"],
                        ["target_id", "kind", "tpr", "fpr", "balanced_accuracy",
                         "accuracy", "test_positive_rate", "selected"], rows)
    ctx.log(f"  bank: {len(segments)} segment + {len(bidders)} bid surrogates")
    return names


def _agent_kinds(cfg: ExperimentConfig) -> list[str]:
    kinds = list(cfg.rl.loss_kinds)
    if cfg.rl.personalization is not None and "l2" in kinds:
        kinds.append("l2p")
    return kinds


def stage_train_rl(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    universe = _load_universe(ctx)
    model = _load_mc(ctx)
    bank = _load_bank(ctx)
    h = ctx.stage_hash("train-rl")
    names: dict[str, str] = {}
    for kind in _agent_kinds(cfg):
        reward = _reward_spec(cfg, kind, len(bank.segments))
        a2c = cfg.rl.to_a2c(universe.n_subcategories, cfg.window, cfg.embed_dim,
                            cfg.surrogate.kernel_heights,
                            cfg.surrogate.filters_per_kernel, reward,
                            kind=reward.loss_kind)
        loss_eval = SurrogateLossEvaluator(bank, universe, reward)
        agent = PolicyAgent(a2c, _agent_seed(cfg.seed, kind))
        # agent init varies per kind; the training persona stream is shared
        # so every agent faces the same environment randomness
        curve = train(agent, model, universe, loss_eval, a2c, cfg.seed)
        names[f"agent-{kind}"] = f"agent-{kind}-{h}.json"
        names[f"curve-{kind}"] = f"learning_curve_{kind}.csv"
        agent.save_json(ctx.out_dir / names[f"agent-{kind}"])
        reporting.write_csv(ctx.out_dir / names[f"curve-{kind}"],
                            ["round", "mean_total_reward", "mean_final_loss",
                             "policy_loss", "value_loss", "entropy", "grad_norm",
                             "obf_steps"], curve)
        first, last = curve[0], curve[-1]
        ctx.log(f"  agent {kind}: reward {first['mean_total_reward']:.4f} -> "
                f"{last['mean_total_reward']:.4f} over {len(curve)} rounds")
    return names


def stage_train_baselines(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    universe = _load_universe(ctx)
    model = _load_mc(ctx)
    bank = _load_bank(ctx)
    weights: dict[str, list[float]] = {}
    for kind in cfg.rl.loss_kinds:
        reward = RewardSpec(loss_kind=kind, repeat_penalty=0.0)
        loss_eval = SurrogateLossEvaluator(bank, universe, reward)
        w = estimate_bias_weights(universe, model, loss_eval, cfg.seed,
                                  cfg.baseline.samples_per_subcat,
                                  cfg.baseline.base_len)
        weights[kind] = [float(v) for v in w]
        ctx.log(f"  bias weights ({kind}): max {max(weights[kind]):.4f}, "
                f"nonzero {sum(v > 0 for v in weights[kind])}/{len(w)}")

    h = ctx.stage_hash("train-baselines")
    names = {"bias-weights": f"bias-weights-{h}.json",
             "bias_weights": "bias_weights.csv"}
    (ctx.out_dir / names["bias-weights"]).write_text(
        json.dumps(weights, indent=2, sort_keys=True) + "\n")
    rows = [{"loss_kind": kind, "subcategory": i, "weight": v}
            for kind in sorted(weights) for i, v in enumerate(weights[kind])]
    reporting.write_csv(ctx.out_dir / names["bias_weights"],
                        ["loss_kind", "subcategory", "weight"], rows)
    return names


def _selector_factories(cfg: ExperimentConfig, universe: UrlUniverse,
                        agents: dict[str, PolicyAgent],
                        bias: dict[str, np.ndarray]
                        ) -> dict[str, Callable[[], object]]:
    """Fresh-selector factories for every approach this run can evaluate."""
    factories: dict[str, Callable[[], object]] = {
        "control": lambda: None,
        "adnauseam": lambda: RandomPoolSelector(universe.ad_pool),
        "trackthis": lambda: RandomPoolSelector(universe.curated_pool),
        "rand-intent": lambda: RandIntentSelector(),
    }
    for kind, w in bias.items():
        factories[f"bias-intent-{kind}"] = (
            lambda w=w: BiasIntentSelector(w))
    for kind, agent in agents.items():
        factories[f"rl-{kind}"] = (lambda agent=agent: AgentSelector(agent))
    return factories


EVAL_COLUMNS = [
    "scorer", "approach", "alpha", "n_personas",
    "l1_mean", "l1_se", "l1_excluded",
    "l2_mean", "l2_se", "l2_added_mean", "l2_removed_mean",
    "l3_mean", "l3_se", "l4_mean", "l4_se",
    "l2_allowed_mean", "l2_disallowed_mean",
]


def stage_evaluate(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    universe = _load_universe(ctx)
    oracles = _load_oracles(ctx)
    model = _load_mc(ctx)
    bank = _load_bank(ctx)
    agents = _load_agents(ctx)
    bias = _load_bias_weights(ctx)
    factories = _selector_factories(cfg, universe, agents, bias)
    scorers = {"surrogate": SurrogateScorer(bank, universe),
               "oracle": OracleScorer(oracles, universe)}
    personalization = None
    if cfg.rl.personalization is not None:
        personalization = cfg.rl.personalization.to_spec(len(bank.segments))
    per_scorer_spec = {"surrogate": personalization,
                       "oracle": (translate_personalization(personalization,
                                                            bank, oracles)
                                  if personalization is not None else None)}

    summary_rows: list[dict] = []
    persona_rows: list[dict] = []
    names = {"privacy": "privacy_metrics.csv",
             "metrics_personas": "metrics_personas.csv"}
    dump_paths: dict[str, str] = {}
    for scorer_name, scorer in scorers.items():
        for approach in sorted(factories):
            selector = factories[approach]()
            alpha = 0.0 if approach == "control" else cfg.eval.alpha
            scorer_spec = per_scorer_spec[scorer_name]
            wants_pers = scorer_spec is not None and approach.startswith("rl-l2")
            result = evaluate_selector(
                universe, scorer, model, selector, alpha, cfg.eval.n_personas,
                cfg.eval.persona_len, cfg.eval.init_len, cfg.seed,
                approach=approach,
                keep_personas=(scorer_name == "surrogate" and cfg.eval.dump_personas),
                personalization=scorer_spec if wants_pers else None)
            summary_rows.append({"scorer": scorer_name, "approach": approach,
                                 "alpha": alpha, "n_personas": result.n_personas,
                                 **result.aggregates})
            for row in result.rows:
                for metric in ("l1", "l2", "l2_added", "l2_removed", "l3", "l4",
                               "l2_allowed", "l2_disallowed"):
                    if metric not in row:
                        continue
                    value = row[metric]
                    persona_rows.append({
                        "scorer": scorer_name, "approach": approach,
                        "persona_id": row["persona_id"], "metric": metric,
                        "value": value, "excluded": value is None})
            if result.personas:
                key = f"personas-{approach}"
                fname = f"personas_{approach}.jsonl"
                save_personas_jsonl(ctx.out_dir / fname, result.personas)
                dump_paths[key] = fname
            ctx.log(f"  {scorer_name}/{approach}: "
                    f"l2 {result.aggregates.get('l2_mean')}")

    reporting.write_csv(ctx.out_dir / names["privacy"], EVAL_COLUMNS, summary_rows)
    reporting.write_csv(ctx.out_dir / names["metrics_personas"],
                        ["scorer", "approach", "persona_id", "metric", "value",
                         "excluded"], persona_rows)
    return {**names, **dump_paths}


def stage_stealth(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    universe = _load_universe(ctx)
    model = _load_mc(ctx)
    agents = _load_agents(ctx)
    bias = _load_bias_weights(ctx)
    factories = _selector_factories(cfg, universe, agents, bias)
    factories.pop("control")
    st = cfg.stealth
    det = _detector_config(st)

    rows = []
    for approach in sorted(factories):
        error = stealth_detection_error(
            universe, model, factories[approach](), st.alpha, st.n_per_class,
            st.persona_len, st.init_len, det, cfg.seed)
        rows.append({"approach": approach, "alpha": st.alpha,
                     "n_per_class": st.n_per_class, "detection_error": error,
                     "note": ""})
        ctx.log(f"  {approach}: detection error {error:.3f}")
    calib_approach = "rl-l2" if "rl-l2" in factories else sorted(factories)[0]
    calib = stealth_detection_error(
        universe, model, factories[calib_approach](), st.alpha, st.n_per_class,
        st.persona_len, st.init_len, det, cfg.seed, shuffle_labels=True)
    rows.append({"approach": "shuffled-labels", "alpha": st.alpha,
                 "n_per_class": st.n_per_class, "detection_error": calib,
                 "note": f"label-permutation control on {calib_approach} personas"})
    ctx.log(f"  shuffled-label control: {calib:.3f} (chance is 0.5)")

    names = {"stealth": "stealth.csv"}
    reporting.write_csv(ctx.out_dir / names["stealth"],
                        ["approach", "alpha", "n_per_class", "detection_error",
                         "note"], rows)
    return names


def stage_adapt(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    universe = _load_universe(ctx)
    model = _load_mc(ctx)
    agents = _load_agents(ctx)
    bias = _load_bias_weights(ctx)
    factories = _selector_factories(cfg, universe, agents, bias)
    chosen = [name for name in sorted(factories)
              if name.startswith(("rl-", "bias-intent-")) or name == "rand-intent"]
    ad = cfg.adapt

    rows = []
    names = {"adaptiveness": "adaptiveness.csv"}
    for approach in chosen:
        matrix, off = adaptiveness(universe, model, factories[approach], ad.alpha,
                                   ad.n_types, ad.personas_per_type,
                                   ad.persona_len, ad.init_len, cfg.seed)
        rows.append({"approach": approach, "off_diagonal_mean": off,
                     "n_types": matrix.shape[0],
                     "personas_per_type": ad.personas_per_type})
        fname = f"adaptiveness_matrix_{approach}.csv"
        matrix_rows = [{"type_i": i, **{f"type_{j}": matrix[i, j]
                                        for j in range(matrix.shape[1])}}
                       for i in range(matrix.shape[0])]
        reporting.write_csv(ctx.out_dir / fname,
                            ["type_i"] + [f"type_{j}" for j in range(matrix.shape[1])],
                            matrix_rows)
        names[f"matrix-{approach}"] = fname
        ctx.log(f"  {approach}: mean pairwise distance {off:.4f}")
    reporting.write_csv(ctx.out_dir / names["adaptiveness"],
                        ["approach", "off_diagonal_mean", "n_types",
                         "personas_per_type"], rows)
    return names


def stage_sweep(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    universe = _load_universe(ctx)
    oracles = _load_oracles(ctx)
    model = _load_mc(ctx)
    bank = _load_bank(ctx)
    agents = _load_agents(ctx)
    bias = _load_bias_weights(ctx)
    scorer = OracleScorer(oracles, universe)
    det = _detector_config(cfg.stealth)
    sw = cfg.sweep

    base_factories = _selector_factories(cfg, universe, agents, bias)
    unknown = [a for a in sw.approaches if a not in base_factories]
    if unknown:
        raise ValueError(f"sweep approaches not available: {unknown}; "
                         f"have {sorted(base_factories)}")

    trained_cache: dict[tuple[str, float], PolicyAgent] = {}

    def factory_for(name: str) -> Callable[[float], object]:
        if name.startswith("rl-") and sw.retrain:
            kind = name[len("rl-"):]

            def retrained(alpha: float) -> object:
                key = (kind, alpha)
                if key not in trained_cache:
                    reward = _reward_spec(cfg, kind, len(bank.segments))
                    a2c = cfg.rl.to_a2c(universe.n_subcategories, cfg.window,
                                        cfg.embed_dim, cfg.surrogate.kernel_heights,
                                        cfg.surrogate.filters_per_kernel, reward,
                                        alpha=alpha, kind=reward.loss_kind)
                    loss_eval = SurrogateLossEvaluator(bank, universe, reward)
                    agent_seed = (_agent_seed(cfg.seed, kind) * 10000
                                  + int(round(alpha * 1000)))
                    agent = PolicyAgent(a2c, agent_seed)
                    train(agent, model, universe, loss_eval, a2c,
                          cfg.seed * 10000 + int(round(alpha * 1000)))
                    trained_cache[key] = agent
                return AgentSelector(trained_cache[key])

            return retrained
        return lambda alpha, name=name: base_factories[name]()

    rows: list[dict] = []
    for approach in sw.approaches:
        use_detector = approach in sw.detector_approaches and sw.detector_personas > 0
        result = budget_sweep(
            universe, scorer, model, {approach: factory_for(approach)},
            sw.alphas, sw.n_personas, sw.persona_len, sw.init_len, cfg.seed,
            detector_config=det if use_detector else None,
            detector_personas=sw.detector_personas if use_detector else 0)
        rows.extend(result)
        ctx.log(f"  {approach}: {len(result)} budget points")

    names = {"sweep": "sweep.csv"}
    columns = ["approach", "alpha"] + EVAL_COLUMNS[4:] + ["detection_error"]
    reporting.write_csv(ctx.out_dir / names["sweep"], columns, rows)
    return names


def stage_report(cfg: ExperimentConfig, ctx: RunContext) -> dict[str, str]:
    names: dict[str, str] = {}

    curves = {}
    for key, fname in ctx.manifest["stages"]["train-rl"]["artifacts"].items():
        if key.startswith("curve-"):
            curves[key[len("curve-"):]] = reporting.read_csv(ctx.out_dir / fname)
    reporting.fig_learning_curves(curves, ctx.out_dir / "learning_curves.png")
    names["fig-curves"] = "learning_curves.png"

    surrogate_rows = reporting.read_csv(
        ctx.artifact_path("train-surrogates", "surrogate_models"))
    reporting.fig_surrogates(surrogate_rows, ctx.out_dir / "surrogate_models.png")
    names["fig-surrogates"] = "surrogate_models.png"

    sweep_rows = reporting.read_csv(ctx.artifact_path("sweep", "sweep"))
    reporting.fig_sweep(sweep_rows, ctx.out_dir / "sweep.png")
    names["fig-sweep"] = "sweep.png"
    if reporting.fig_sweep_detection(sweep_rows, ctx.out_dir / "sweep_detection.png"):
        names["fig-sweep-detection"] = "sweep_detection.png"

    stealth_rows = reporting.read_csv(ctx.artifact_path("stealth", "stealth"))
    reporting.fig_stealth(stealth_rows, ctx.out_dir / "stealth.png")
    names["fig-stealth"] = "stealth.png"

    matrices = {}
    for key, fname in ctx.manifest["stages"]["adapt"]["artifacts"].items():
        if key.startswith("matrix-"):
            grid = reporting.read_csv(ctx.out_dir / fname)
            n = len(grid)
            mat = np.array([[float(row[f"type_{j}"]) for j in range(n)]
                            for row in grid])
            matrices[key[len("matrix-"):]] = mat
    reporting.fig_adaptiveness(matrices, ctx.out_dir / "adaptiveness.png")
    names["fig-adaptiveness"] = "adaptiveness.png"

    privacy_rows = reporting.read_csv(ctx.artifact_path("evaluate", "privacy"))
    adapt_rows = reporting.read_csv(ctx.artifact_path("adapt", "adaptiveness"))
    summary = {
        "surrogates_selected": sum(r["selected"] == "true" for r in surrogate_rows),
        "surrogates_trained": len(surrogate_rows),
        "privacy_l2_by_approach": {
            r["approach"]: float(r["l2_mean"]) for r in privacy_rows
            if r["scorer"] == "oracle" and r.get("l2_mean")},
        "privacy_l3_by_approach": {
            r["approach"]: float(r["l3_mean"]) for r in privacy_rows
            if r["scorer"] == "oracle" and r.get("l3_mean")},
        "detection_error_by_approach": {
            r["approach"]: float(r["detection_error"]) for r in stealth_rows
            if r.get("detection_error")},
        "adaptiveness_by_approach": {
            r["approach"]: float(r["off_diagonal_mean"]) for r in adapt_rows},
    }
    (ctx.out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    names["summary"] = "summary.json"
    ctx.log(f"  report rendered: {len(names)} files")
    return names


STAGE_FUNCS: dict[str, Callable[[ExperimentConfig, RunContext], dict[str, str]]] = {
    "gen-universe": stage_gen_universe,
    "fit-mc": stage_fit_mc,
    "collect": stage_collect,
    "train-surrogates": stage_train_surrogates,
    "train-rl": stage_train_rl,
    "train-baselines": stage_train_baselines,
    "evaluate": stage_evaluate,
    "stealth": stage_stealth,
    "adapt": stage_adapt,
    "sweep": stage_sweep,
    "report": stage_report,
}


def run_stage(stage: str, cfg: ExperimentConfig, ctx: RunContext,
              force: bool = False) -> bool:
    """Run one stage; returns False when skipped as already current."""
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    for upstream in STAGE_SPEC[stage][1]:
        ctx.require(upstream)
    if not force and ctx.is_current(stage):
        ctx.log(f"[{stage}] up to date, skipping")
        return False
    ctx.log(f"[{stage}] running")
    start = time.perf_counter()
    artifacts = STAGE_FUNCS[stage](cfg, ctx)
    duration = time.perf_counter() - start
    ctx.record(stage, artifacts, duration)
    ctx.log(f"[{stage}] done in {duration:.1f}s")
    return True


def run_pipeline(stages: list[str], cfg: ExperimentConfig, out_dir: str | Path,
                 force: bool = False, log: Callable[[str], None] = print) -> RunContext:
    ctx = RunContext(cfg, Path(out_dir), log=log)
    for stage in stages:
        run_stage(stage, cfg, ctx, force=force)
    return ctx
