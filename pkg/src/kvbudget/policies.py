"""Eviction policies: turn prefill attention plus a budget into per-head kept positions.

All policies compress once, right after prefill. Budgets are per-head counts,
shared by every head of a layer, and are capped at the sequence length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .budget import BudgetPlan, pyramid_plan, uncertainty_profile, uniform_plan, zigzag_plan
from .cache import EvictionDecision
from .model import ConfigError, LayerState, WindowError  # noqa: F401
from .tensor import rank_desc


class PolicyKind(str, Enum):
    FULL = "fullkv"
    STREAMING = "streamingllm"
    H2O = "h2o"
    SNAPKV = "snapkv"
    PYRAMID = "pyramidkv"
    ZIGZAG = "zigzag"


_FIELD_ALIASES = {
    "w": "window",
    "window": "window",
    "sink": "sink_count",
    "sink_count": "sink_count",
    "recent": "recent_fraction",
    "recent_fraction": "recent_fraction",
    "kernel": "pool_kernel",
    "pool_kernel": "pool_kernel",
    "min_ratio": "pyramid_min_ratio",
    "pyramid_min_ratio": "pyramid_min_ratio",
    "b_bound": "b_bound",
    "bound": "b_bound",
    "eps": "eps",
    "allow_undersized": "allow_undersized",
    "label": "label",
}


@dataclass(frozen=True)
class PolicyConfig:
    """Policy choice plus parameters.

    ``b_bound=None`` means half the mean budget at decision time.
    ``allow_undersized`` lets ZigZag layers whose budget does not exceed the
    window keep only their most recent ``budget`` positions instead of failing.
    """

    kind: PolicyKind = PolicyKind.ZIGZAG
    window: int = 8
    sink_count: int = 4
    recent_fraction: float = 0.5
    pool_kernel: int = 7
    pyramid_min_ratio: float = 0.125
    b_bound: int | None = None
    eps: float = 0.1
    allow_undersized: bool = False
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ConfigError("pool_kernel must be an odd count >= 1")
        for name in ("recent_fraction", "pyramid_min_ratio"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {value}")
        if self.sink_count < 0:
            raise ConfigError("sink_count must be >= 0")
        if self.b_bound is not None and self.b_bound < 0:
            raise ConfigError("b_bound must be >= 0")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind is PolicyKind.ZIGZAG and self.b_bound is not None:
            return f"zigzag-bound{self.b_bound}"
        return self.kind.value

    def bound_for(self, budget: int) -> int:
        return budget // 2 if self.b_bound is None else self.b_bound

    @classmethod
    def parse(cls, text: str, **defaults) -> "PolicyConfig":
        """Parse ``kind[:key=value,...]``, e.g. ``zigzag:b_bound=0,label=zz0``."""
        kind, _, rest = text.partition(":")
        fields = dict(defaults)
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            key = _FIELD_ALIASES.get(key.strip())
            if key is None:
                raise ConfigError(f"unknown policy parameter in {text!r}")
            fields[key] = _coerce(key, value.strip())
        return cls(kind=PolicyKind(kind.strip().lower()), **fields)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "window": self.window,
            "sink_count": self.sink_count,
            "recent_fraction": self.recent_fraction,
            "pool_kernel": self.pool_kernel,
            "pyramid_min_ratio": self.pyramid_min_ratio,
            "b_bound": self.b_bound,
            "eps": self.eps,
            "allow_undersized": self.allow_undersized,
            "label": self.label,
        }


def _coerce(key: str, value: str):
    if key in ("window", "sink_count", "pool_kernel", "b_bound"):
        return None if value.lower() == "none" else int(value)
    if key == "allow_undersized":
        return value.lower() in ("1", "true", "yes")
    if key == "label":
        return value
    return float(value)


def max_pool1d(scores, kernel: int) -> np.ndarray:
    """Same-length max pooling; the window is clipped at the edges."""
    scores = np.asarray(scores, dtype=np.float64)
    if kernel <= 1 or scores.shape[-1] == 0:
        return scores.copy()
    half = kernel // 2
    pad = [(0, 0)] * (scores.ndim - 1) + [(half, half)]
    padded = np.pad(scores, pad, mode="constant", constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=-1)
    return windows.max(axis=-1)


def window_column_sums(state: LayerState, window: int) -> np.ndarray:
    """Column sums of the last ``window`` query rows over every key position, ``(h, n)``."""
    return state.window_rows(window).sum(axis=1)


def importance_scores(
    states: Sequence[LayerState], window: int, pool_kernel: int = 1
) -> list[np.ndarray]:
    """Per layer ``(h, n - window)`` scores of the prefix tokens.

    Each score is the attention the last ``window`` queries pay to that
    position, then max-pooled over neighbouring positions.
    """
    out = []
    for state in states:
        prefix = window_column_sums(state, window)[:, : state.n - window]
        out.append(max_pool1d(prefix, pool_kernel))
    return out


def select_with_window(
    state: LayerState,
    budget: int,
    window: int,
    pool_kernel: int,
    allow_undersized: bool = False,
) -> EvictionDecision:
    n = state.n
    if budget >= n:
        return EvictionDecision.keep_all(state.layer, state.num_heads, n)
    if budget <= window:
        if not allow_undersized:
            raise ConfigError(
                f"layer {state.layer}: budget {budget} must exceed the window {window}"
            )
        recent = np.arange(n - budget, n)
        return EvictionDecision(state.layer, tuple(recent for _ in range(state.num_heads)), budget)
    raw = window_column_sums(state, window)[:, : n - window]
    pooled = max_pool1d(raw, pool_kernel)
    tail = np.arange(n - window, n)
    slots = budget - window
    kept = []
    for h in range(state.num_heads):
        # pooled score first, raw score breaks pooling ties so a peak beats its neighbours
        chosen = rank_desc(pooled[h], raw[h])[:slots]
        kept.append(np.concatenate([np.sort(chosen), tail]))
    return EvictionDecision(state.layer, tuple(kept), budget)


def _check_layers(states: Sequence[LayerState], plan: BudgetPlan) -> None:
    if plan.num_layers != len(states):
        raise ConfigError(f"plan covers {plan.num_layers} layers, trace has {len(states)}")


def decide_full(states: Sequence[LayerState]) -> list[EvictionDecision]:
    return [EvictionDecision.keep_all(s.layer, s.num_heads, s.n) for s in states]


def decide_streaming(
    n: int, num_heads: int, plan: BudgetPlan, sink_count: int = 4
) -> list[EvictionDecision]:
    """Keep the first ``sink_count`` positions and the most recent rest."""
    decisions = []
    for layer, budget in enumerate(plan.capped(n)):
        if budget >= n:
            decisions.append(EvictionDecision.keep_all(layer, num_heads, n))
            continue
        if budget <= sink_count:
            raise ConfigError(f"budget {budget} must exceed sink_count {sink_count}")
        kept = np.concatenate([np.arange(sink_count), np.arange(n - (budget - sink_count), n)])
        decisions.append(EvictionDecision(layer, tuple(kept for _ in range(num_heads)), budget))
    return decisions


def decide_h2o(
    states: Sequence[LayerState], plan: BudgetPlan, recent_fraction: float = 0.5
) -> list[EvictionDecision]:
    """Recent window of ``ceil(recent_fraction*B)`` plus heavy hitters by cumulative attention.

    Heavy hitters rank by column sums over every prompt query when the state
    carries them, otherwise over the stored observation rows.
    """
    _check_layers(states, plan)
    decisions = []
    for state, budget in zip(states, plan.capped(states[0].n)):
        n = state.n
        if budget >= n:
            decisions.append(EvictionDecision.keep_all(state.layer, state.num_heads, n))
            continue
        recent = min(budget, math.ceil(recent_fraction * budget))
        mass = state.column_mass if state.column_mass is not None else state.attention.sum(axis=1)
        older = n - recent
        kept = []
        for h in range(state.num_heads):
            heavy = rank_desc(mass[h, :older])[: budget - recent]
            kept.append(np.concatenate([np.sort(heavy), np.arange(older, n)]))
        decisions.append(EvictionDecision(state.layer, tuple(kept), budget))
    return decisions


def decide_snapkv(
    states: Sequence[LayerState], plan: BudgetPlan, window: int = 8, pool_kernel: int = 7
) -> list[EvictionDecision]:
    """Observation window plus the top pooled-importance prefix positions."""
    _check_layers(states, plan)
    return [
        select_with_window(s, b, window, pool_kernel)
        for s, b in zip(states, plan.capped(states[0].n))
    ]


def decide_pyramidkv(
    states: Sequence[LayerState], plan: BudgetPlan, window: int = 8, pool_kernel: int = 7
) -> list[EvictionDecision]:
    """SnapKV selection under depth-shrinking budgets from :func:`pyramid_plan`."""
    return decide_snapkv(states, plan, window, pool_kernel)


def decide_zigzag(
    states: Sequence[LayerState],
    budget: int,
    b_bound: int,
    window: int = 8,
    pool_kernel: int = 7,
    eps: float = 0.1,
    allow_undersized: bool = False,
) -> tuple[list[EvictionDecision], BudgetPlan]:
    """Allocate by layer uncertainty (LMBA), then select SnapKV-style per layer.

    Needs every layer's attention before any budget is known.
    """
    from .metrics import lmba

    profile = uncertainty_profile([lmba(s, window, eps) for s in states])
    plan = zigzag_plan(budget, len(states), profile, b_bound)
    n = states[0].n
    decisions = [
        select_with_window(s, b, window, pool_kernel, allow_undersized)
        for s, b in zip(states, plan.capped(n))
    ]
    return decisions, plan


def decide(
    states: Sequence[LayerState], config: PolicyConfig, budget: int
) -> tuple[list[EvictionDecision], BudgetPlan]:
    """Run the policy named by ``config`` at mean budget ``budget``."""
    L = len(states)
    n = states[0].n
    kind = config.kind
    if kind is PolicyKind.FULL:
        return decide_full(states), uniform_plan(n, L)
    if kind is PolicyKind.ZIGZAG:
        return decide_zigzag(
            states,
            budget,
            config.bound_for(budget),
            config.window,
            config.pool_kernel,
            config.eps,
            config.allow_undersized,
        )
    if kind is PolicyKind.PYRAMID:
        plan = pyramid_plan(budget, L, config.pyramid_min_ratio)
        return decide_pyramidkv(states, plan, config.window, config.pool_kernel), plan
    plan = uniform_plan(budget, L)
    if kind is PolicyKind.STREAMING:
        return decide_streaming(n, states[0].num_heads, plan, config.sink_count), plan
    if kind is PolicyKind.H2O:
        return decide_h2o(states, plan, config.recent_fraction), plan
    return decide_snapkv(states, plan, config.window, config.pool_kernel), plan
