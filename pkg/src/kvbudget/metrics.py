"""Diagnostics comparing partial-cache inference against the full cache.

``mba``/``lmba`` measure how many tokens a head needs to keep 90% of its
attention; ``lmbo`` does the same for the layer's hidden output; the two loss
functions score a concrete eviction decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cache import EvictionDecision
from .model import LayerState, PrefillResult, ToyModel, final_token_forward, prefill
from .policies import select_with_window
from .tensor import cosine_similarity

# "sum reaches 1 - eps" is treated as satisfied up to this slack; without it a
# uniform row over 10 keys needs 10 entries because 9 * 0.1 rounds below 0.9.
MASS_SLACK = 1e-9


class MetricError(ValueError):
    pass


def _check_eps(eps: float) -> None:
    if not 0 < eps < 1:
        raise MetricError(f"eps must lie in (0, 1), got {eps}")


def mba(row, eps: float = 0.1) -> int:
    """Fewest entries whose total keeps the attention loss below ``eps``."""
    _check_eps(eps)
    row = np.asarray(row, dtype=np.float64).ravel()
    cumulative = np.cumsum(np.sort(row)[::-1])
    hits = np.nonzero(cumulative >= 1.0 - eps - MASS_SLACK)[0]
    if hits.size == 0:
        raise MetricError("attention row never reaches the target mass; does it sum to 1?")
    return int(hits[0]) + 1


def head_mba(state: LayerState, window: int, eps: float = 0.1) -> np.ndarray:
    rows = state.window_rows(window).mean(axis=1)
    return np.array([mba(r, eps) for r in rows])


def lmba(state: LayerState, window: int, eps: float = 0.1) -> float:
    """Mean over heads of the MBA of each head's window-averaged attention row."""
    return float(head_mba(state, window, eps).mean())


def lmba_profile(states: Sequence[LayerState], window: int, eps: float = 0.1) -> list[float]:
    return [lmba(s, window, eps) for s in states]


def _single_layer_decisions(
    result: PrefillResult, layer: int, budget: int, window: int, pool_kernel: int
) -> list[EvictionDecision]:
    decisions = []
    for s in result.states:
        if s.layer == layer:
            decisions.append(select_with_window(s, budget, window, pool_kernel))
        else:
            decisions.append(EvictionDecision.keep_all(s.layer, s.num_heads, s.n))
    return decisions


def layer_output_similarity_loss(
    model: ToyModel,
    result: PrefillResult,
    layer: int,
    budget: int,
    window: int = 8,
    pool_kernel: int = 7,
) -> float:
    """``1 - cos(y, y_hat)`` for ``layer`` evicted alone to ``budget``."""
    reference = final_token_forward(model, result).outputs[layer]
    decisions = _single_layer_decisions(result, layer, budget, window, pool_kernel)
    partial = final_token_forward(model, result, decisions).outputs[layer]
    return 1.0 - cosine_similarity(reference, partial)


def lmbo(
    model: ToyModel,
    tokens,
    layer: int,
    window: int = 8,
    pool_kernel: int = 7,
    eps: float = 0.1,
    result: PrefillResult | None = None,
) -> int:
    """Smallest single-layer budget keeping the layer's output within ``eps`` of full cache.

    Scans budgets ``window+1 .. n`` in order; similarity need not be monotone in
    the budget, so the first hit is the answer.
    """
    _check_eps(eps)
    if result is None:
        result = prefill(model, tokens, window)
    n = result.n
    start = min(window + 1, n)
    for budget in range(start, n + 1):
        if layer_output_similarity_loss(model, result, layer, budget, window, pool_kernel) < eps:
            return budget
    raise MetricError(f"layer {layer}: no budget up to n={n} reaches the threshold")


def lmbo_profile(
    model: ToyModel,
    result: PrefillResult,
    window: int = 8,
    pool_kernel: int = 7,
    eps: float = 0.1,
) -> list[int]:
    return [
        lmbo(model, None, l, window, pool_kernel, eps, result=result)
        for l in range(model.config.num_layers)
    ]


def _retained_window_mass(
    states: Sequence[LayerState], decisions: Sequence[EvictionDecision], window: int
) -> list[np.ndarray]:
    """Per layer ``(h, window)`` mass each observation query keeps."""
    out = []
    for state, decision in zip(states, decisions):
        rows = state.window_rows(window)
        mask = np.zeros((state.num_heads, state.n), dtype=bool)
        for h, kept in enumerate(decision.kept):
            mask[h, kept] = True
        out.append((rows * mask[:, None, :]).sum(axis=2))
    return out


def attention_loss(
    states: Sequence[LayerState],
    decisions: Sequence[EvictionDecision],
    window: int,
    target: float = 0.9,
) -> np.ndarray:
    """Per-layer mean shortfall ``max(0, target - retained mass)`` over heads and window queries."""
    return np.array(
        [np.maximum(0.0, target - m).mean() for m in _retained_window_mass(states, decisions, window)]
    )


def attention_mass_loss(
    states: Sequence[LayerState], decisions: Sequence[EvictionDecision], window: int
) -> np.ndarray:
    """Per-layer ``1 - mean retained mass``."""
    return np.array(
        [max(0.0, 1.0 - m.mean()) for m in _retained_window_mass(states, decisions, window)]
    )


def retained_mass_per_layer(
    states: Sequence[LayerState], decisions: Sequence[EvictionDecision], window: int
) -> np.ndarray:
    return np.array([m.mean() for m in _retained_window_mass(states, decisions, window)])


def output_loss(
    model: ToyModel, result: PrefillResult, decisions: Sequence[EvictionDecision]
) -> np.ndarray:
    """Per-layer ``1 - cos(y, y_hat)`` at the final prompt token under one coherent partial pass."""
    reference = final_token_forward(model, result).outputs
    partial = final_token_forward(model, result, list(decisions)).outputs
    return np.array([1.0 - cosine_similarity(y, y_hat) for y, y_hat in zip(reference, partial)])


def needle_retention(decisions: Sequence[EvictionDecision], needles) -> float:
    """Fraction of (layer, head) caches that still hold every needle position."""
    needles = np.asarray(sorted(set(int(p) for p in needles)), dtype=np.int64)
    cells = [np.all(np.isin(needles, kept)) for d in decisions for kept in d.kept]
    if not cells:
        return 0.0
    return float(np.mean(cells))


@dataclass
class MetricsReport:
    policy: str
    budget: int | None = None
    b_bound: int | None = None
    seed: int | None = None
    layer_budgets: list[int] | None = None
    lmba: list[float] | None = None
    lmbo: list[int] | None = None
    attn_loss: list[float] | None = None
    attn_loss_mass: list[float] | None = None
    out_loss: list[float] | None = None
    needle_retention: float | None = None
    extra: dict = field(default_factory=dict)

    PER_LAYER = ("layer_budgets", "lmba", "lmbo", "attn_loss", "attn_loss_mass", "out_loss")

    @property
    def num_layers(self) -> int:
        return max((len(getattr(self, k)) for k in self.PER_LAYER if getattr(self, k) is not None), default=0)

    def per_layer(self) -> dict:
        return {k: getattr(self, k) for k in self.PER_LAYER if getattr(self, k) is not None}

    def aggregate(self) -> dict:
        agg = {}
        for key, values in self.per_layer().items():
            if not values:
                continue
            arr = np.asarray(values, dtype=np.float64)
            agg[f"{key}_mean"] = float(arr.mean())
            agg[f"{key}_sum"] = float(arr.sum())
            agg[f"{key}_max"] = float(arr.max())
        if self.needle_retention is not None:
            agg["needle_retention"] = self.needle_retention
        return agg

    def to_dict(self) -> dict:
        meta = {"policy": self.policy, "B": self.budget, "B_bound": self.b_bound, "seed": self.seed}
        meta.update(self.extra)
        return {"meta": meta, "per_layer": self.per_layer(), "aggregate": self.aggregate()}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        meta = dict(data["meta"])
        report = cls(
            policy=meta.pop("policy"),
            budget=meta.pop("B", None),
            b_bound=meta.pop("B_bound", None),
            seed=meta.pop("seed", None),
            extra=meta,
        )
        for key, values in data.get("per_layer", {}).items():
            if key not in cls.PER_LAYER:
                raise MetricError(f"unknown per-layer metric {key!r}")
            setattr(report, key, list(values))
        report.needle_retention = data.get("aggregate", {}).get("needle_retention")
        return report
