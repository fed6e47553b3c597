"""Policy agent, rollout reward accounting, and the actor-critic update."""

import numpy as np
import pytest

from obfusim.metrics import RewardSpec
from obfusim.persona import Persona
from obfusim.rlagent import (
    A2cConfig,
    AgentSelector,
    EpisodeTrace,
    PolicyAgent,
    StepRecord,
    a2c_forward_backward,
    a2c_update,
    discounted_returns,
    rollout,
    train,
)
from obfusim.nn.gradcheck import grad_check
from obfusim.nn.optim import SgdOptimizer

SEED = 7


class CountObfLoss:
    """Profile loss stub: the number of obfuscation visits so far."""

    def loss(self, persona):
        return float(persona.obf_count())


def tiny_config(n_actions, **kw):
    base = dict(n_actions=n_actions, window=3, embed_dim=16, kernel_heights=(2,),
                filters_per_kernel=2, hidden_dim=3, rounds=2, personas_per_round=2,
                persona_len=14, init_len=2, alpha=0.3, lr=0.05,
                reward=RewardSpec("l2"))
    base.update(kw)
    return A2cConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(0)
    with pytest.raises(ValueError):
        tiny_config(4, discount=1.5)
    with pytest.raises(ValueError):
        tiny_config(4, alpha=1.0)


def test_act_probabilities_and_modes(mini_universe, rng):
    agent = PolicyAgent(tiny_config(6), SEED)
    emb = mini_universe.window_embeddings(np.array([1, 2, 3]))
    agent.begin_episode()
    action, probs, value = agent.act(emb, rng)
    assert 0 <= action < 6
    assert probs.shape == (6,)
    assert probs.sum() == pytest.approx(1.0)
    assert np.isfinite(value)
    agent.begin_episode()
    greedy, probs2, _ = agent.act(emb, rng, mode="argmax")
    assert greedy == int(np.argmax(probs2))
    with pytest.raises(ValueError):
        agent.act(emb, rng, mode="best")


def test_fresh_agent_near_uniform(mini_universe, rng):
    """An untrained policy must not already prefer some subcategory."""
    n = 10
    agent = PolicyAgent(tiny_config(n), SEED)
    entropies = []
    for _ in range(50):
        agent.begin_episode()
        ids = rng.integers(0, mini_universe.n_urls, 3)
        _, probs, _ = agent.act(mini_universe.window_embeddings(ids), rng)
        p = probs[probs > 0]
        entropies.append(float(-np.sum(p * np.log(p))))
    assert np.mean(entropies) > 0.95 * np.log(n)


def test_lstm_state_resets_per_episode(mini_universe, rng):
    agent = PolicyAgent(tiny_config(6), SEED)
    emb = mini_universe.window_embeddings(np.array([4, 5, 6]))
    agent.begin_episode()
    _, first, _ = agent.act(emb, rng)
    _, second, _ = agent.act(emb, rng)
    assert not np.allclose(first, second)   # state advanced within the episode
    agent.begin_episode()
    _, again, _ = agent.act(emb, rng)
    np.testing.assert_allclose(again, first, rtol=1e-12)


def test_selector_maps_action_to_subcategory(mini_universe, mini_mc):
    rng = np.random.default_rng(SEED)
    n = mini_universe.n_subcategories
    agent = PolicyAgent(tiny_config(n), SEED)
    selector = AgentSelector(agent, record=True)
    traces = rollout(agent, mini_mc, mini_universe, CountObfLoss(),
                     tiny_config(n, persona_len=30), rng, n_personas=1)
    trace = traces[0]
    obf_urls = trace.persona.obf_ids()
    assert len(trace.steps) == len(obf_urls)
    for step, url in zip(trace.steps, obf_urls):
        assert url in set(mini_universe.subcategory_urls(step.action).tolist())


def test_selector_rejects_action_mismatch(mini_universe):
    rng = np.random.default_rng(SEED)
    agent = PolicyAgent(tiny_config(5), SEED)   # universe has 8 subcategories
    selector = AgentSelector(agent)
    persona = Persona()
    selector.begin(persona)
    with pytest.raises(ValueError, match="subcategories"):
        selector.select(persona, mini_universe, rng)


def test_rollout_telescoping_identity(mini_universe, mini_mc):
    """With no repeat penalty, episode reward sums to exactly the final loss."""
    rng = np.random.default_rng(SEED)
    n = mini_universe.n_subcategories
    config = tiny_config(n, persona_len=40, alpha=0.25)
    agent = PolicyAgent(config, SEED)
    traces = rollout(agent, mini_mc, mini_universe, CountObfLoss(), config,
                     rng, n_personas=6)
    for trace in traces:
        assert trace.loss_initial == 0.0
        assert trace.total_reward() == trace.loss_final
        assert trace.loss_final == float(trace.persona.obf_count())
        assert len(trace.steps) == trace.persona.obf_count()


def test_rollout_repeat_penalty_accounting(mini_universe, mini_mc):
    """Penalty totals follow the closed form over per-URL pick counts."""
    rng = np.random.default_rng(SEED)
    n = mini_universe.n_subcategories
    delta = 0.05
    config = tiny_config(n, persona_len=60, alpha=0.4,
                         reward=RewardSpec("l2", repeat_penalty=delta))
    agent = PolicyAgent(config, SEED)
    traces = rollout(agent, mini_mc, mini_universe, CountObfLoss(), config,
                     rng, n_personas=4)
    for trace in traces:
        counts = {}
        for url in trace.persona.obf_ids():
            counts[url] = counts.get(url, 0) + 1
        penalty = delta * sum(c * (c - 1) / 2 for c in counts.values())
        expected = trace.loss_final - penalty
        assert trace.total_reward() == pytest.approx(expected, abs=1e-12)


def test_discounted_returns_reference():
    rewards = [1.0, 0.0, 2.0, -1.0]
    gamma = 0.9
    expected = []
    for t in range(4):
        total = 0.0
        for k in range(t, 4):
            total += rewards[k] * gamma ** (k - t)
        expected.append(total)
    np.testing.assert_allclose(discounted_returns(rewards, gamma), expected,
                               rtol=1e-12)


def test_a2c_gradients_with_frozen_advantages(mini_universe, rng):
    """Finite-difference check of the full update path through BPTT."""
    config = tiny_config(5)
    agent = PolicyAgent(config, SEED)
    traces = []
    advantages = []
    for _ in range(2):
        steps = [StepRecord(window_ids=rng.integers(0, mini_universe.n_urls, 3),
                            action=int(rng.integers(0, 5)),
                            reward=float(rng.normal()))
                 for _ in range(3)]
        traces.append(EpisodeTrace(steps=steps, persona=Persona()))
        advantages.append(rng.normal(size=3))

    def loss_fn():
        objective, _ = a2c_forward_backward(agent, mini_universe, traces, config,
                                            frozen_advantages=advantages)
        return objective

    assert grad_check(loss_fn, agent.params()) < 1e-3


def test_a2c_update_moves_policy_toward_reward(mini_universe, rng):
    """A large positive advantage on one action must raise its probability."""
    config = tiny_config(5, lr=0.5, entropy_coef=0.0)
    agent = PolicyAgent(config, SEED)
    ids = rng.integers(0, mini_universe.n_urls, 3)
    emb = mini_universe.window_embeddings(ids)
    agent.begin_episode()
    _, before, _ = agent.act(emb, rng)
    optimizer = SgdOptimizer(agent.params(), lr=config.lr,
                             momentum=0.0, clip_norm=config.clip_norm)
    trace = EpisodeTrace(steps=[StepRecord(window_ids=ids, action=2, reward=5.0)],
                         persona=Persona())
    for _ in range(5):
        a2c_update(agent, mini_universe, [trace], config, optimizer)
    agent.begin_episode()
    _, after, _ = agent.act(emb, rng)
    assert after[2] > before[2]


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_a2c_update_rejects_nonfinite(mini_universe, rng):
    config = tiny_config(5)
    agent = PolicyAgent(config, SEED)
    optimizer = SgdOptimizer(agent.params(), lr=config.lr)
    trace = EpisodeTrace(steps=[StepRecord(window_ids=rng.integers(0, 10, 3),
                                           action=1, reward=float("inf"))],
                         persona=Persona())
    with pytest.raises(RuntimeError, match="diverged"):
        a2c_update(agent, mini_universe, [trace], config, optimizer)


def test_a2c_empty_batch_is_noop(mini_universe):
    config = tiny_config(5)
    agent = PolicyAgent(config, SEED)
    objective, stats = a2c_forward_backward(
        agent, mini_universe, [EpisodeTrace(steps=[], persona=Persona())], config)
    assert objective == 0.0
    assert stats["steps"] == 0


def test_agent_payload_round_trip(mini_universe, rng, tmp_path):
    config = tiny_config(6)
    agent = PolicyAgent(config, SEED)
    path = tmp_path / "agent.json"
    agent.save_json(path)
    clone = PolicyAgent.load_json(path)
    emb = mini_universe.window_embeddings(rng.integers(0, mini_universe.n_urls, 3))
    agent.begin_episode()
    clone.begin_episode()
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    a1, p1, v1 = agent.act(emb, r1)
    a2, p2, v2 = clone.act(emb, r2)
    assert a1 == a2 and v1 == v2
    np.testing.assert_array_equal(p1, p2)
    assert clone.config == agent.config


def test_train_returns_curve(mini_universe, mini_mc):
    n = mini_universe.n_subcategories
    config = tiny_config(n, rounds=3, personas_per_round=2, persona_len=16)
    agent = PolicyAgent(config, SEED)
    curve = train(agent, mini_mc, mini_universe, CountObfLoss(), config, SEED)
    assert len(curve) == 3
    assert [row["round"] for row in curve] == [0, 1, 2]
    for row in curve:
        for key in ("mean_total_reward", "mean_final_loss", "policy_loss",
                    "value_loss", "entropy", "grad_norm", "obf_steps"):
            assert key in row
    # deterministic given the same seed
    agent2 = PolicyAgent(config, SEED)
    curve2 = train(agent2, mini_mc, mini_universe, CountObfLoss(), config, SEED)
    assert curve == curve2
