"""Privacy loss metrics comparing tracker views of obfuscated vs base profiles.

Conventions: ``x_obf`` / ``x_base`` are binary segment vectors for the
obfuscated and base profile, ``b_*`` are binary high-bid indicators, and
``v_*`` are raw bid values. ``l1`` can be undefined (no segments on the
obfuscated profile); it then returns None and aggregation code must count
the exclusion rather than fold it into a mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LOSS_KINDS = ("l1", "l2", "l3")


def _as_binary(name: str, x: Sequence[int]) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return arr.astype(np.int64)


def _check_lengths(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")


def l1(x_obf: Sequence[int], x_base: Sequence[int]) -> float | None:
    """Fraction of obfuscated-profile segments that are false (not on base).

    Returns None when the obfuscated profile carries no segments at all,
    which makes the ratio undefined.
    """
    xo = _as_binary("x_obf", x_obf)
    xu = _as_binary("x_base", x_base)
    _check_lengths(xo, xu)
    total = int(xo.sum())
    if total == 0:
        return None
    false_segments = int(np.sum((xo == 1) & (xu == 0)))
    return false_segments / total


def l2(x_obf: Sequence[int], x_base: Sequence[int]) -> int:
    """Number of segments that differ between the two profiles (XOR count)."""
    xo = _as_binary("x_obf", x_obf)
    xu = _as_binary("x_base", x_base)
    _check_lengths(xo, xu)
    return int(np.sum(xo ^ xu))


def l2_split(x_obf: Sequence[int], x_base: Sequence[int]) -> tuple[int, int]:
    """L2 broken into (segments added by obfuscation, segments removed)."""
    xo = _as_binary("x_obf", x_obf)
    xu = _as_binary("x_base", x_base)
    _check_lengths(xo, xu)
    added = int(np.sum((xo == 1) & (xu == 0)))
    removed = int(np.sum((xo == 0) & (xu == 1)))
    return added, removed


def l3(b_obf: Sequence[int], b_base: Sequence[int]) -> float:
    """Mean signed change in high-bid indicators across bidders."""
    bo = _as_binary("b_obf", b_obf)
    bu = _as_binary("b_base", b_base)
    _check_lengths(bo, bu)
    if bo.size == 0:
        raise ValueError("l3 needs at least one bidder")
    return float(np.mean(bo.astype(np.float64) - bu.astype(np.float64)))


def l4(v_obf: Sequence[float], v_base: Sequence[float]) -> float:
    """Ratio of total bid value on the obfuscated profile to the base one."""
    vo = np.asarray(v_obf, dtype=np.float64)
    vu = np.asarray(v_base, dtype=np.float64)
    _check_lengths(vo, vu)
    if np.any(vo < 0.0) or np.any(vu < 0.0):
        raise ValueError("bid values must be non-negative")
    denom = float(vu.sum())
    if denom <= 0.0:
        raise ValueError("base profile has zero total bid value")
    return float(vo.sum()) / denom


def reward(loss_now: float, loss_prev: float, repeat_count: int,
           repeat_penalty: float) -> float:
    """Per-step reward: loss gain minus a penalty for re-picking the same URL.

    ``repeat_count`` is how many times the just-chosen URL has been chosen
    within the current profile, including this pick, so a first pick costs
    nothing.
    """
    if repeat_count < 1:
        raise ValueError(f"repeat_count must be >= 1, got {repeat_count}")
    return loss_now - loss_prev - repeat_penalty * (repeat_count - 1)


@dataclass(frozen=True)
class Personalization:
    """Split of segment indices into user-allowed and user-disallowed sets."""

    allowed: tuple[int, ...]
    disallowed: tuple[int, ...]
    distortion_weight: float = 0.1

    def __post_init__(self) -> None:
        overlap = set(self.allowed) & set(self.disallowed)
        if overlap:
            raise ValueError(f"allowed/disallowed overlap: {sorted(overlap)}")
        if self.distortion_weight < 0.0:
            raise ValueError("distortion_weight must be >= 0")


def personalized_l2(x_obf: Sequence[int], x_base: Sequence[int],
                    spec: Personalization) -> float:
    """L2 over allowed segments minus weighted L2 over disallowed ones."""
    xo = _as_binary("x_obf", x_obf)
    xu = _as_binary("x_base", x_base)
    _check_lengths(xo, xu)
    allowed = np.asarray(spec.allowed, dtype=np.int64)
    disallowed = np.asarray(spec.disallowed, dtype=np.int64)
    l2_allowed = int(np.sum(xo[allowed] ^ xu[allowed])) if allowed.size else 0
    l2_disallowed = int(np.sum(xo[disallowed] ^ xu[disallowed])) if disallowed.size else 0
    return l2_allowed - spec.distortion_weight * l2_disallowed


@dataclass(frozen=True)
class RewardSpec:
    """What the per-step training reward is made of."""

    loss_kind: str = "l2"
    repeat_penalty: float = 0.0
    personalization: Personalization | None = None

    def __post_init__(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.repeat_penalty < 0.0:
            raise ValueError("repeat_penalty must be >= 0")
        if self.personalization is not None and self.loss_kind != "l2":
            raise ValueError("personalization applies to the l2 loss only")


@dataclass
class MetricAccumulator:
    """Mean tracker that counts undefined (None) samples separately."""

    total: float = 0.0
    count: int = 0
    excluded: int = 0
    values: list = field(default_factory=list)

    def add(self, value: float | None) -> None:
        if value is None:
            self.excluded += 1
            return
        self.total += float(value)
        self.count += 1
        self.values.append(float(value))

    def mean(self) -> float | None:
        if self.count == 0:
            return None
        return self.total / self.count

    def std_error(self) -> float | None:
        if self.count < 2:
            return None
        return float(np.std(self.values, ddof=1) / np.sqrt(self.count))
