"""Per-layer key/value storage keyed by original token position."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CacheError(ValueError):
    """Cache contents and a request disagree (unknown or colliding positions)."""


def _as_positions(kept) -> np.ndarray:
    if isinstance(kept, (set, frozenset)):
        kept = sorted(kept)
    return np.unique(np.asarray(kept, dtype=np.int64).ravel())


@dataclass(frozen=True)
class EvictionDecision:
    """Positions each head of one layer keeps.

    ``kept[h]`` is an ascending int array. ``budget`` is the per-head count
    the policy was allowed; ``None`` means unconstrained.
    """

    layer: int
    kept: tuple[np.ndarray, ...]
    budget: int | None = None

    def __post_init__(self):
        kept = tuple(_as_positions(k) for k in self.kept)
        object.__setattr__(self, "kept", kept)
        if self.budget is not None:
            for h, k in enumerate(kept):
                if k.size > self.budget:
                    raise CacheError(
                        f"layer {self.layer} head {h} keeps {k.size} > budget {self.budget}"
                    )

    @classmethod
    def keep_all(cls, layer: int, num_heads: int, n: int) -> "EvictionDecision":
        full = np.arange(n)
        return cls(layer, tuple(full for _ in range(num_heads)))

    @property
    def num_heads(self) -> int:
        return len(self.kept)

    def kept_counts(self) -> list[int]:
        return [int(k.size) for k in self.kept]

    def restricted(self, limit: int) -> "EvictionDecision":
        """Same decision with positions ``>= limit`` dropped."""
        return EvictionDecision(self.layer, tuple(k[k < limit] for k in self.kept))


@dataclass
class KVCache:
    layer: int
    positions: list[np.ndarray]
    keys: list[np.ndarray]
    values: list[np.ndarray]
    capacity: int | None = None
    head_dim: int = field(init=False)

    def __post_init__(self):
        if not (len(self.positions) == len(self.keys) == len(self.values)):
            raise CacheError("per-head lists differ in length")
        self.head_dim = self.keys[0].shape[1] if self.keys else 0
        for h, pos in enumerate(self.positions):
            if pos.size and np.any(np.diff(pos) <= 0):
                raise CacheError(f"head {h} positions are not strictly increasing")
            if self.keys[h].shape[0] != pos.size or self.values[h].shape[0] != pos.size:
                raise CacheError(f"head {h} key/value rows do not match positions")

    @classmethod
    def empty(cls, layer: int, num_heads: int, head_dim: int) -> "KVCache":
        return cls(
            layer,
            [np.zeros(0, dtype=np.int64) for _ in range(num_heads)],
            [np.zeros((0, head_dim)) for _ in range(num_heads)],
            [np.zeros((0, head_dim)) for _ in range(num_heads)],
        )

    @classmethod
    def from_arrays(cls, layer: int, keys, values, positions=None) -> "KVCache":
        """Build from ``(h, n, d)`` key and value arrays (every head sees the same positions)."""
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        n = keys.shape[1]
        pos = np.arange(n) if positions is None else np.asarray(positions, dtype=np.int64)
        return cls(
            layer,
            [pos.copy() for _ in range(keys.shape[0])],
            [keys[h].copy() for h in range(keys.shape[0])],
            [values[h].copy() for h in range(values.shape[0])],
        )

    @property
    def num_heads(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return max((p.size for p in self.positions), default=0)

    def max_position(self) -> int:
        return max((int(p[-1]) for p in self.positions if p.size), default=-1)

    def append(self, position: int, keys, values) -> None:
        """Add one token's ``(h, d)`` key and value rows at ``position``."""
        if position <= self.max_position():
            raise CacheError(
                f"layer {self.layer}: position {position} collides with cached position "
                f"{self.max_position()}"
            )
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        for h in range(self.num_heads):
            self.positions[h] = np.append(self.positions[h], position)
            self.keys[h] = np.vstack([self.keys[h], keys[h][None, :]])
            self.values[h] = np.vstack([self.values[h], values[h][None, :]])


def apply_eviction(cache: KVCache, decision: EvictionDecision) -> KVCache:
    """Return a new cache holding only the decided positions, order preserved."""
    if decision.num_heads != cache.num_heads:
        raise CacheError(
            f"decision has {decision.num_heads} heads, cache has {cache.num_heads}"
        )
    positions, keys, values = [], [], []
    for h in range(cache.num_heads):
        cached = cache.positions[h]
        kept = decision.kept[h]
        mask = np.isin(cached, kept)
        if int(mask.sum()) != kept.size:
            missing = np.setdiff1d(kept, cached)
            raise CacheError(
                f"layer {cache.layer} head {h}: positions {missing.tolist()} are not cached"
            )
        positions.append(cached[mask])
        keys.append(cache.keys[h][mask])
        values.append(cache.values[h][mask])
    return KVCache(cache.layer, positions, keys, values, capacity=decision.budget)


def retained_attention_mass(row, kept) -> float:
    row = np.asarray(row, dtype=np.float64)
    kept = _as_positions(kept)
    if kept.size and (kept[0] < 0 or kept[-1] >= row.size):
        raise CacheError("kept position outside the attention row")
    return float(row[kept].sum())
