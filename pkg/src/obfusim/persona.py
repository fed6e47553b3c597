"""Browsing traces, the 4-state Markov chain, and persona construction.

The chain has four states: the user's three most-visited URL categories
(by the 10% share rule) and a catch-all for every remaining category. A
user type is the ordered triple of concrete categories bound to states
0..2; the model keeps the most common types seen in the traces. Personas
interleave chain-driven user visits with obfuscation visits chosen by a
pluggable selector at a per-slot Bernoulli rate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .universe import UrlUniverse

N_STATES = 4
TOP_CATEGORIES = 3
SHARE_RULE = 0.10

SOURCE_USER = "user"
SOURCE_OBF = "obf"


@dataclass
class BrowsingTrace:
    user_id: str
    visits: list[tuple[int, int]]   # (url_id, category)


def load_traces_csv(path: str | Path) -> list[BrowsingTrace]:
    """Read traces from CSV with columns user_id,seq_no,url_id,category."""
    rows: dict[str, list[tuple[int, int, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"user_id", "seq_no", "url_id", "category"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"trace CSV must have columns {sorted(required)}")
        for row in reader:
            rows.setdefault(row["user_id"], []).append(
                (int(row["seq_no"]), int(row["url_id"]), int(row["category"])))
    traces = []
    for user_id in rows:
        ordered = sorted(rows[user_id])
        traces.append(BrowsingTrace(
            user_id=user_id,
            visits=[(url, cat) for _, url, cat in ordered]))
    return traces


def save_traces_csv(path: str | Path, traces: Sequence[BrowsingTrace]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "seq_no", "url_id", "category"])
        for trace in traces:
            for seq_no, (url, cat) in enumerate(trace.visits):
                writer.writerow([trace.user_id, seq_no, url, cat])


def generate_synthetic_traces(universe: UrlUniverse, n_users: int, steps: int,
                              seed: int, zipf_exponent: float = 1.0
                              ) -> list[BrowsingTrace]:
    """Synthetic per-user traces with Zipf-weighted category preferences.

    Each user gets an independent random category ranking; visit categories
    are drawn i.i.d. from the Zipf weights and the URL uniformly within the
    category. This stands in for real trace data when none is supplied.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7ACE5]))
    n_cats = len(universe.user_categories)
    ranks = np.arange(1, n_cats + 1, dtype=np.float64)
    base_weights = 1.0 / ranks ** zipf_exponent
    traces = []
    for u in range(n_users):
        order = rng.permutation(n_cats)
        weights = np.empty(n_cats)
        weights[order] = base_weights
        weights = weights / weights.sum()
        cats = rng.choice(n_cats, size=steps, p=weights)
        visits = []
        for cat in cats:
            urls = universe.user_categories[int(cat)]
            visits.append((int(urls[rng.integers(0, len(urls))]), int(cat)))
        traces.append(BrowsingTrace(user_id=f"u{u:05d}", visits=visits))
    return traces


@dataclass
class McModel:
    transition: np.ndarray                 # (4, 4) row-stochastic
    stationary: np.ndarray                 # (4,)
    user_types: list[tuple[int, int, int]]  # per type: categories for states 0..2
    n_categories: int

    def validate(self) -> None:
        if self.transition.shape != (N_STATES, N_STATES):
            raise ValueError(f"transition must be 4x4, got {self.transition.shape}")
        if not np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        if np.any(self.transition < 0.0):
            raise ValueError("transition entries must be >= 0")
        fixed = self.stationary @ self.transition
        if not np.allclose(fixed, self.stationary, atol=1e-6):
            raise ValueError("stationary vector is not a fixed point")

    def to_json(self) -> dict:
        return {
            "transition": self.transition.tolist(),
            "stationary": self.stationary.tolist(),
            "user_types": [list(t) for t in self.user_types],
            "n_categories": self.n_categories,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "McModel":
        model = cls(
            transition=np.asarray(doc["transition"], dtype=np.float64),
            stationary=np.asarray(doc["stationary"], dtype=np.float64),
            user_types=[tuple(t) for t in doc["user_types"]],
            n_categories=int(doc["n_categories"]),
        )
        model.validate()
        return model

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "McModel":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class McDiagnostics:
    state_frequencies: np.ndarray
    autocorrelation: np.ndarray            # lags 1..len
    n_users: int
    n_transitions: int


def _stationary_of(transition: np.ndarray) -> np.ndarray:
    """Stationary distribution via the eigenvector at eigenvalue 1."""
    vals, vecs = np.linalg.eig(transition.T)
    idx = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


def assign_states(trace: BrowsingTrace) -> tuple[tuple[int, int, int], list[int]]:
    """Map a trace to its user type and per-visit state sequence.

    The three states are the categories holding more than a 10% share of
    the user's visits, ranked by share (ties broken by category id) and
    padded with the next-most-frequent categories when fewer than three
    qualify. All other categories collapse into state 3.
    """
    cats = [cat for _, cat in trace.visits]
    if not cats:
        raise ValueError(f"trace {trace.user_id} is empty")
    counts: dict[int, int] = {}
    for cat in cats:
        counts[cat] = counts.get(cat, 0) + 1
    total = len(cats)
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    qualified = [c for c in ranked if counts[c] / total > SHARE_RULE]
    top = qualified[:TOP_CATEGORIES]
    for cat in ranked:
        if len(top) >= TOP_CATEGORIES:
            break
        if cat not in top:
            top.append(cat)
    while len(top) < TOP_CATEGORIES:            # degenerate short vocabularies
        top.append(top[-1])
    state_of = {cat: i for i, cat in enumerate(top[:TOP_CATEGORIES])}
    states = [state_of.get(cat, N_STATES - 1) for cat in cats]
    return (top[0], top[1], top[2]), states


def fit_mc(traces: Sequence[BrowsingTrace], max_user_types: int = 100,
           acf_lags: int = 10) -> tuple[McModel, McDiagnostics]:
    """Fit the shared 4-state chain and the user-type table from traces.

    Transition counts are pooled over users and add-one smoothed. The
    stationary distribution is computed from the smoothed matrix. User
    types are the ``max_user_types`` most common category triples, most
    frequent first (ties by triple).
    """
    if not traces:
        raise ValueError("need at least one trace")
    counts = np.zeros((N_STATES, N_STATES))
    type_counts: dict[tuple[int, int, int], int] = {}
    state_freq = np.zeros(N_STATES)
    acf_num = np.zeros(acf_lags)
    acf_den = 0.0
    n_cats = 0
    n_transitions = 0
    for trace in traces:
        user_type, states = assign_states(trace)
        type_counts[user_type] = type_counts.get(user_type, 0) + 1
        n_cats = max(n_cats, max(cat for _, cat in trace.visits) + 1)
        arr = np.asarray(states)
        for a, b in zip(arr[:-1], arr[1:]):
            counts[a, b] += 1.0
        n_transitions += max(len(arr) - 1, 0)
        for s in arr:
            state_freq[s] += 1.0
        centered = arr - arr.mean()
        var = float(np.sum(centered ** 2))
        if var > 0.0:
            acf_den += var
            for lag in range(1, min(acf_lags, len(arr) - 1) + 1):
                acf_num[lag - 1] += float(np.sum(centered[:-lag] * centered[lag:]))

    smoothed = counts + 1.0
    transition = smoothed / smoothed.sum(axis=1, keepdims=True)
    stationary = _stationary_of(transition)
    ordered_types = sorted(type_counts, key=lambda t: (-type_counts[t], t))
    model = McModel(
        transition=transition,
        stationary=stationary,
        user_types=ordered_types[:max_user_types],
        n_categories=n_cats,
    )
    model.validate()
    diagnostics = McDiagnostics(
        state_frequencies=state_freq / max(state_freq.sum(), 1.0),
        autocorrelation=acf_num / acf_den if acf_den > 0.0 else np.zeros(acf_lags),
        n_users=len(traces),
        n_transitions=n_transitions,
    )
    return model, diagnostics


class PersonaSampler:
    """Walks the chain for one user type and emits user URL visits."""

    def __init__(self, model: McModel, user_type: tuple[int, int, int],
                 universe: UrlUniverse, rng: np.random.Generator) -> None:
        self.model = model
        self.user_type = user_type
        self.universe = universe
        self.rng = rng
        n_cats = len(universe.user_categories)
        self.rest = [c for c in range(n_cats) if c not in set(user_type)]
        if not self.rest:
            self.rest = list(user_type)
        self.state = int(rng.choice(N_STATES, p=model.stationary))

    def next_url(self) -> tuple[int, int]:
        """Advance one step; returns (url_id, category)."""
        state = self.state
        if state < TOP_CATEGORIES:
            cat = self.user_type[state]
        else:
            cat = self.rest[int(self.rng.integers(0, len(self.rest)))]
        urls = self.universe.user_categories[cat]
        url = int(urls[self.rng.integers(0, len(urls))])
        self.state = int(self.rng.choice(N_STATES, p=self.model.transition[state]))
        return url, cat


@dataclass
class Persona:
    visits: list[tuple[int, str]] = field(default_factory=list)  # (url_id, source)
    alpha: float = 0.0
    user_type_id: int = -1

    def all_ids(self) -> list[int]:
        return [url for url, _ in self.visits]

    def user_ids(self) -> list[int]:
        return [url for url, src in self.visits if src == SOURCE_USER]

    def obf_ids(self) -> list[int]:
        return [url for url, src in self.visits if src == SOURCE_OBF]

    def obf_count(self) -> int:
        return len(self.obf_ids())

    def to_json_line(self) -> str:
        return json.dumps({
            "alpha": self.alpha,
            "user_type_id": self.user_type_id,
            "visits": [[url, src] for url, src in self.visits],
        }, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "Persona":
        doc = json.loads(line)
        return cls(
            visits=[(int(url), str(src)) for url, src in doc["visits"]],
            alpha=float(doc["alpha"]),
            user_type_id=int(doc["user_type_id"]),
        )


def save_personas_jsonl(path: str | Path, personas: Sequence[Persona]) -> None:
    with open(path, "w") as fh:
        for p in personas:
            fh.write(p.to_json_line() + "\n")


def load_personas_jsonl(path: str | Path) -> list[Persona]:
    with open(path) as fh:
        return [Persona.from_json_line(line) for line in fh if line.strip()]


class Selector(Protocol):
    """Chooses obfuscation URLs while a persona is being built."""

    def begin(self, persona: Persona) -> None: ...

    def select(self, persona: Persona, universe: UrlUniverse,
               rng: np.random.Generator) -> int: ...


VisitHook = Callable[[Persona, int, str], None]


def build_persona(model: McModel, universe: UrlUniverse, alpha: float,
                  length: int, init_len: int, selector: Selector | None,
                  rng: np.random.Generator, user_type_id: int | None = None,
                  on_visit: VisitHook | None = None) -> Persona:
    """Generate one persona of ``length`` visits.

    The first ``init_len`` visits always come from the chain; afterwards
    each slot is an obfuscation visit with probability ``alpha`` (i.i.d.),
    with the URL chosen by ``selector``. ``on_visit`` fires after every
    appended visit, which is where training hooks compute per-step losses.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    if init_len < 0 or init_len > length:
        raise ValueError(f"init_len must be in [0, {length}], got {init_len}")
    if alpha > 0.0 and selector is None:
        raise ValueError("alpha > 0 requires a selector")
    if user_type_id is None:
        user_type_id = int(rng.integers(0, len(model.user_types)))
    user_type = model.user_types[user_type_id]
    sampler = PersonaSampler(model, user_type, universe, rng)
    persona = Persona(alpha=alpha, user_type_id=user_type_id)
    if selector is not None:
        selector.begin(persona)
    for i in range(length):
        if i >= init_len and alpha > 0.0 and rng.random() < alpha:
            url = selector.select(persona, universe, rng)
            src = SOURCE_OBF
        else:
            url, _ = sampler.next_url()
            src = SOURCE_USER
        persona.visits.append((url, src))
        if on_visit is not None:
            on_visit(persona, i, src)
    return persona


def plan_rate(user_rate: float, alpha: float) -> float:
    """Obfuscation arrival rate that sustains budget ``alpha`` against
    a user event rate: user_rate * alpha / (1 - alpha)."""
    if user_rate <= 0.0:
        raise ValueError(f"user_rate must be positive, got {user_rate}")
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    return user_rate * alpha / (1.0 - alpha)


@dataclass(frozen=True)
class ArrivalPlan:
    """How obfuscation events are interleaved with user events."""

    user_rate: float
    alpha: float
    kind: str = "bernoulli-slots"   # or "poisson"

    def __post_init__(self) -> None:
        if self.kind not in ("bernoulli-slots", "poisson"):
            raise ValueError(f"unknown arrival kind {self.kind!r}")
        plan_rate(self.user_rate, self.alpha)   # validates inputs

    @property
    def obf_rate(self) -> float:
        return plan_rate(self.user_rate, self.alpha)

    def sample_obf_times(self, horizon: float, rng: np.random.Generator) -> np.ndarray:
        """Poisson arrival times on [0, horizon) at the obfuscation rate."""
        if self.kind != "poisson":
            raise ValueError("sample_obf_times applies to poisson plans")
        n = rng.poisson(self.obf_rate * horizon)
        return np.sort(rng.uniform(0.0, horizon, size=n))
