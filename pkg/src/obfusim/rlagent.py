"""Advantage actor-critic agent that picks obfuscation URL subcategories.

The policy network is the shared text-CNN encoder over the last-window
embedding matrix, an LSTM cell carried across the obfuscation steps of one
persona (reset per episode), and two dense heads: a softmax over intent
subcategories and a scalar state value. Rollouts build personas through
``persona.build_persona`` with the agent as the selector; rewards are the
per-step change in the profile loss minus a repeat penalty. Updates replay
each episode, backpropagate through time over its steps, and apply one
clipped SGD-momentum step per batch of episodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .metrics import RewardSpec, reward as step_reward, Personalization
from .nn import TextCnnEncoder, LstmCell, DenseHead, SgdOptimizer
from .nn.checkpoint import arrays_to_payload, payload_to_arrays
from .oracles import last_window_ids
from .persona import McModel, Persona, SOURCE_OBF, build_persona
from .universe import UrlUniverse


@dataclass(frozen=True)
class A2cConfig:
    n_actions: int
    window: int = 20
    embed_dim: int = 300
    kernel_heights: tuple[int, ...] = (3, 4, 5)
    filters_per_kernel: int = 100
    hidden_dim: int = 256
    discount: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 0.001
    momentum: float = 0.9
    clip_norm: float = 5.0
    rounds: int = 300
    personas_per_round: int = 50
    persona_len: int = 100
    init_len: int = 20
    alpha: float = 0.1
    reward: RewardSpec = field(default_factory=RewardSpec)

    def __post_init__(self) -> None:
        if self.n_actions < 1:
            raise ValueError("n_actions must be >= 1")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must be in [0, 1]")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")


class LossEvaluator(Protocol):
    """Anything that scores an in-progress persona's profile loss."""

    def loss(self, persona: Persona) -> float: ...


class PolicyAgent:
    def __init__(self, config: A2cConfig, seed: int) -> None:
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA2C]))
        self.encoder = TextCnnEncoder(
            config.window, config.embed_dim, config.kernel_heights,
            config.filters_per_kernel, rng=rng)
        self.lstm = LstmCell(self.encoder.output_dim, config.hidden_dim, rng=rng)
        self.actor = DenseHead((config.hidden_dim, config.n_actions),
                               final="softmax", rng=rng)
        self.critic = DenseHead((config.hidden_dim, 1), final="identity", rng=rng)
        self._state = self.lstm.init_state(1)

    def params(self):
        return (self.encoder.params() + self.lstm.params()
                + self.actor.params() + self.critic.params())

    def begin_episode(self) -> None:
        self._state = self.lstm.init_state(1)

    def act(self, window_emb: np.ndarray, rng: np.random.Generator,
            mode: str = "sample") -> tuple[int, np.ndarray, float]:
        """One policy step; advances the episode LSTM state.

        Returns (action, action probabilities, state value). ``mode`` is
        "sample" for stochastic selection or "argmax" for the greedy action
        (ties resolve to the lowest action id).
        """
        feats = self.encoder.forward(window_emb[None, :, :])
        h, self._state = self.lstm.step(feats, self._state)
        probs = self.actor.forward(h)[0]
        value = float(self.critic.forward(h)[0, 0])
        if mode == "argmax":
            action = int(np.argmax(probs))
        elif mode == "sample":
            action = int(rng.choice(self.config.n_actions, p=probs))
        else:
            raise ValueError(f"unknown act mode {mode!r}")
        return action, probs, value

    def to_payload(self) -> dict:
        doc = asdict(self.config)
        doc["kernel_heights"] = list(self.config.kernel_heights)
        doc["reward"] = _reward_doc(self.config.reward)
        arrays = {f"p{i}.{p.name}": p.value for i, p in enumerate(self.params())}
        return {"config": doc, "arrays": arrays_to_payload(arrays)}

    @classmethod
    def from_payload(cls, doc: dict) -> "PolicyAgent":
        cfg_doc = dict(doc["config"])
        cfg_doc["kernel_heights"] = tuple(cfg_doc["kernel_heights"])
        cfg_doc["reward"] = _reward_from_doc(cfg_doc["reward"])
        agent = cls(A2cConfig(**cfg_doc), seed=0)
        arrays = payload_to_arrays(doc["arrays"])
        for i, p in enumerate(agent.params()):
            p.value[...] = arrays[f"p{i}.{p.name}"]
        return agent

    def fork(self, config: A2cConfig | None = None) -> "PolicyAgent":
        """Independent copy of this policy, optionally rebound to a config.

        The copy shares no arrays with the original, so it can be trained
        further (e.g. under a personalized reward) without touching the
        deployed policy. A new config must keep the same dimensions; only
        reward and schedule fields may differ.
        """
        clone = PolicyAgent.from_payload(self.to_payload())
        if config is not None:
            for field_name in ("n_actions", "window", "embed_dim",
                               "kernel_heights", "filters_per_kernel",
                               "hidden_dim"):
                if getattr(config, field_name) != getattr(self.config, field_name):
                    raise ValueError(f"fork config changes {field_name}")
            clone.config = config
        return clone

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_payload(), sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "PolicyAgent":
        return cls.from_payload(json.loads(Path(path).read_text()))


def _reward_doc(spec: RewardSpec) -> dict:
    doc = {"loss_kind": spec.loss_kind, "repeat_penalty": spec.repeat_penalty,
           "personalization": None}
    if spec.personalization is not None:
        doc["personalization"] = {
            "allowed": list(spec.personalization.allowed),
            "disallowed": list(spec.personalization.disallowed),
            "distortion_weight": spec.personalization.distortion_weight,
        }
    return doc


def _reward_from_doc(doc: dict) -> RewardSpec:
    pers = doc.get("personalization")
    personalization = None
    if pers is not None:
        personalization = Personalization(
            allowed=tuple(pers["allowed"]),
            disallowed=tuple(pers["disallowed"]),
            distortion_weight=float(pers["distortion_weight"]),
        )
    return RewardSpec(loss_kind=doc["loss_kind"],
                      repeat_penalty=float(doc["repeat_penalty"]),
                      personalization=personalization)


@dataclass
class StepRecord:
    window_ids: np.ndarray
    action: int
    reward: float = 0.0
    value: float = 0.0
    loss_after: float = 0.0


@dataclass
class EpisodeTrace:
    steps: list[StepRecord]
    persona: Persona
    loss_initial: float = 0.0
    loss_final: float = 0.0

    def total_reward(self) -> float:
        return sum(s.reward for s in self.steps)


class AgentSelector:
    """persona.Selector adapter: agent action -> subcategory -> URL."""

    def __init__(self, agent: PolicyAgent, mode: str = "sample",
                 record: bool = False) -> None:
        self.agent = agent
        self.mode = mode
        self.record = record
        self.records: list[StepRecord] = []

    def begin(self, persona: Persona) -> None:
        self.agent.begin_episode()
        self.records = []

    def select(self, persona: Persona, universe: UrlUniverse,
               rng: np.random.Generator) -> int:
        if self.agent.config.n_actions != universe.n_subcategories:
            raise ValueError(
                f"agent has {self.agent.config.n_actions} actions but universe "
                f"has {universe.n_subcategories} subcategories")
        window = last_window_ids(persona.all_ids(), self.agent.config.window)
        emb = universe.window_embeddings(window)
        action, _, value = self.agent.act(emb, rng, self.mode)
        if self.record:
            self.records.append(StepRecord(window_ids=window.copy(),
                                           action=action, value=value))
        urls = universe.intent_subcategories[action]
        return int(urls[rng.integers(0, len(urls))])


def rollout(agent: PolicyAgent, model: McModel, universe: UrlUniverse,
            loss_eval: LossEvaluator, config: A2cConfig,
            rng: np.random.Generator, n_personas: int,
            mode: str = "sample") -> list[EpisodeTrace]:
    """Generate episodes with per-obfuscation-step rewards filled in."""
    traces: list[EpisodeTrace] = []
    for _ in range(n_personas):
        selector = AgentSelector(agent, mode=mode, record=True)
        loss_prev = [0.0]
        url_counts: dict[int, int] = {}

        def on_visit(persona: Persona, i: int, src: str) -> None:
            if src != SOURCE_OBF:
                return
            url = persona.visits[-1][0]
            url_counts[url] = url_counts.get(url, 0) + 1
            loss_now = loss_eval.loss(persona)
            r = step_reward(loss_now, loss_prev[0], url_counts[url],
                            config.reward.repeat_penalty)
            loss_prev[0] = loss_now
            record = selector.records[-1]
            record.reward = r
            record.loss_after = loss_now

        persona = build_persona(model, universe, config.alpha, config.persona_len,
                                config.init_len, selector, rng, on_visit=on_visit)
        traces.append(EpisodeTrace(
            steps=selector.records, persona=persona,
            loss_initial=0.0, loss_final=loss_prev[0]))
    return traces


def discounted_returns(rewards: Sequence[float], discount: float) -> np.ndarray:
    out = np.empty(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + discount * running
        out[t] = running
    return out


def _entropy(probs: np.ndarray) -> float:
    p = probs[probs > 1e-12]
    return float(-np.sum(p * np.log(p)))


def a2c_forward_backward(agent: PolicyAgent, universe: UrlUniverse,
                         traces: Sequence[EpisodeTrace], config: A2cConfig,
                         frozen_advantages: list[np.ndarray] | None = None
                         ) -> tuple[float, dict]:
    """Replay episodes, accumulate gradients, and return the scalar objective.

    The objective is mean over steps of
    ``-log pi(a) * A + value_coef * (G - V)^2 - entropy_coef * H``
    with the advantage A = G - V treated as a constant. Passing
    ``frozen_advantages`` (one array per trace) pins A across repeated
    calls, which the finite-difference tests rely on.
    """
    n_steps = sum(len(t.steps) for t in traces)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "mean_abs_value": 0.0, "steps": n_steps}
    if n_steps == 0:
        return 0.0, stats

    objective = 0.0
    for trace_idx, trace in enumerate(traces):
        if not trace.steps:
            continue
        agent.begin_episode()
        state = agent.lstm.init_state(1)
        enc_caches, lstm_caches, actor_caches, critic_caches = [], [], [], []
        probs_list, values = [], []
        for step in trace.steps:
            emb = universe.window_embeddings(step.window_ids)[None, :, :]
            feats, enc_cache = agent.encoder.forward_cached(emb)
            h, state, lstm_cache = agent.lstm.step_cached(feats, state)
            probs, actor_cache = agent.actor.forward_cached(h)
            value, critic_cache = agent.critic.forward_cached(h)
            enc_caches.append(enc_cache)
            lstm_caches.append(lstm_cache)
            actor_caches.append(actor_cache)
            critic_caches.append(critic_cache)
            probs_list.append(probs[0])
            values.append(float(value[0, 0]))

        rewards = [s.reward for s in trace.steps]
        returns = discounted_returns(rewards, config.discount)
        values_arr = np.asarray(values)
        if frozen_advantages is not None:
            advantages = frozen_advantages[trace_idx]
        else:
            advantages = returns - values_arr

        d_h_list = []
        for t, step in enumerate(trace.steps):
            probs = probs_list[t]
            a = step.action
            log_p = float(np.log(max(probs[a], 1e-12)))
            ent = _entropy(probs)
            adv = float(advantages[t])
            td = returns[t] - values_arr[t]
            objective += (-log_p * adv + config.value_coef * td ** 2
                          - config.entropy_coef * ent) / n_steps
            stats["policy_loss"] += -log_p * adv / n_steps
            stats["value_loss"] += td ** 2 / n_steps
            stats["entropy"] += ent / n_steps
            stats["mean_abs_value"] += abs(values_arr[t]) / n_steps

            onehot = np.zeros_like(probs)
            onehot[a] = 1.0
            safe_log = np.log(np.clip(probs, 1e-12, None))
            d_logits = ((probs - onehot) * adv
                        + config.entropy_coef * probs * (safe_log + ent)) / n_steps
            d_value = np.array([[-2.0 * config.value_coef * td / n_steps]])
            d_h_actor = agent.actor.backward_from_logits(d_logits[None, :],
                                                         actor_caches[t])
            d_h_critic = agent.critic.backward(d_value, critic_caches[t])
            d_h_list.append(d_h_actor + d_h_critic)

        d_feats_list = agent.lstm.backward_sequence(d_h_list, lstm_caches)
        for t in range(len(trace.steps)):
            agent.encoder.backward(d_feats_list[t], enc_caches[t])

    return float(objective), stats


def a2c_update(agent: PolicyAgent, universe: UrlUniverse,
               traces: Sequence[EpisodeTrace], config: A2cConfig,
               optimizer: SgdOptimizer) -> dict:
    """One training update over a batch of episodes."""
    objective, stats = a2c_forward_backward(agent, universe, traces, config)
    if not np.isfinite(objective):
        raise RuntimeError(f"training diverged: non-finite objective {objective}")
    if stats["mean_abs_value"] > 1e3:
        raise RuntimeError(
            f"training diverged: mean |V| = {stats['mean_abs_value']:.1f}")
    stats["objective"] = objective
    stats["grad_norm"] = optimizer.step() if stats["steps"] else 0.0
    return stats


def train(agent: PolicyAgent, model: McModel, universe: UrlUniverse,
          loss_eval: LossEvaluator, config: A2cConfig, seed: int) -> list[dict]:
    """Full training run; returns one learning-curve row per round."""
    optimizer = SgdOptimizer(agent.params(), lr=config.lr,
                             momentum=config.momentum, clip_norm=config.clip_norm)
    round_seeds = np.random.SeedSequence([seed, 0x7124]).spawn(config.rounds)
    curve: list[dict] = []
    for rnd in range(config.rounds):
        rng = np.random.default_rng(round_seeds[rnd])
        traces = rollout(agent, model, universe, loss_eval, config, rng,
                         config.personas_per_round)
        stats = a2c_update(agent, universe, traces, config, optimizer)
        rewards = [t.total_reward() for t in traces]
        losses = [t.loss_final for t in traces]
        curve.append({
            "round": rnd,
            "mean_total_reward": float(np.mean(rewards)) if rewards else 0.0,
            "mean_final_loss": float(np.mean(losses)) if losses else 0.0,
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "entropy": stats["entropy"],
            "grad_norm": stats["grad_norm"],
            "obf_steps": stats["steps"],
        })
    return curve
