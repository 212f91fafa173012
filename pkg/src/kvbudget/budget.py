"""Per-layer cache budgets from a mean budget ``B`` and a layer count ``L``.

Every plan conserves the total exactly: ``sum(budgets) == B * L``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class AllocationError(ValueError):
    """The requested allocation cannot be satisfied."""


@dataclass(frozen=True)
class BudgetPlan:
    budgets: tuple[int, ...]
    scheme: str

    @property
    def total(self) -> int:
        return sum(self.budgets)

    @property
    def num_layers(self) -> int:
        return len(self.budgets)

    def capped(self, n: int) -> tuple[int, ...]:
        """Budgets clipped to the sequence length (surplus is not redistributed)."""
        return tuple(min(b, n) for b in self.budgets)

    def __getitem__(self, layer: int) -> int:
        return self.budgets[layer]


@dataclass(frozen=True)
class UncertaintyProfile:
    lmba: tuple[float, ...]
    uncertainty: tuple[float, ...]


def _check(B: int, L: int) -> None:
    if B < 1 or L < 1:
        raise AllocationError(f"need B >= 1 and L >= 1, got B={B}, L={L}")


def largest_remainder(quotas, total: int) -> list[int]:
    """Round real quotas to integers summing to ``total`` (Hamilton's method).

    Floors first, then hands the missing units to the largest fractional
    parts; ties go to the lower index.
    """
    quotas = np.asarray(quotas, dtype=np.float64)
    base = np.floor(quotas).astype(np.int64)
    missing = int(total - base.sum())
    if missing < 0 or missing > quotas.size:
        raise AllocationError(f"quotas sum to {quotas.sum()}, cannot round to {total}")
    remainders = quotas - base
    order = np.lexsort((np.arange(quotas.size), -remainders))
    base[order[:missing]] += 1
    return base.tolist()


def uniform_plan(B: int, L: int) -> BudgetPlan:
    _check(B, L)
    return BudgetPlan((B,) * L, "uniform")


def pyramid_plan(B: int, L: int, min_ratio: float) -> BudgetPlan:
    """Linearly shrinking budgets from layer 0 down to ``max(1, round(min_ratio*B))``."""
    _check(B, L)
    if not 0 < min_ratio <= 1:
        raise AllocationError(f"min_ratio must lie in (0, 1], got {min_ratio}")
    b_min = max(1, round(min_ratio * B))
    if b_min * L > B * L:
        raise AllocationError(f"B_min {b_min} exceeds the mean budget {B}")
    if L == 1:
        return BudgetPlan((B,), "pyramid")
    b_max = 2 * B - b_min
    step = (b_max - b_min) / (L - 1)
    budgets = [math.floor(b_max - l * step) for l in range(L)]
    budgets[-1] = b_min
    budgets[0] += B * L - sum(budgets)
    return BudgetPlan(tuple(budgets), "pyramid")


def uncertainty_profile(lmba) -> UncertaintyProfile:
    lmba = np.asarray(lmba, dtype=np.float64).ravel()
    if lmba.size == 0 or np.any(lmba < 0) or not np.all(np.isfinite(lmba)):
        raise AllocationError("LMBA values must be finite and non-negative")
    total = lmba.sum()
    if total <= 0:
        raise AllocationError("all LMBA values are zero; uncertainty is undefined")
    return UncertaintyProfile(tuple(lmba.tolist()), tuple((lmba / total).tolist()))


def zigzag_quotas(B: int, L: int, profile: UncertaintyProfile, b_bound: int) -> np.ndarray:
    """Real-valued budgets: ``b_bound + (B - b_bound) * L * uncertainty_l``."""
    u = np.asarray(profile.uncertainty, dtype=np.float64)
    return b_bound + (B - b_bound) * L * u


def zigzag_plan(B: int, L: int, profile: UncertaintyProfile, b_bound: int) -> BudgetPlan:
    """Uncertainty-weighted budgets with a guaranteed per-layer floor ``b_bound``.

    ``b_bound=0`` gives the purely proportional split. Integer rounding uses
    largest remainders; layers that land below ``max(1, b_bound)`` are topped
    up from the largest budgets (least uncertain first among equals).
    """
    _check(B, L)
    if len(profile.uncertainty) != L:
        raise AllocationError(f"profile has {len(profile.uncertainty)} layers, expected {L}")
    if not 0 <= b_bound <= B:
        raise AllocationError(f"B_bound must lie in [0, B={B}], got {b_bound}")
    quotas = zigzag_quotas(B, L, profile, b_bound)
    budgets = largest_remainder(quotas, B * L)
    floor = max(1, b_bound)
    u = profile.uncertainty
    for l in range(L):
        while budgets[l] < floor:
            donor = max(
                (j for j in range(L) if budgets[j] > floor),
                key=lambda j: (budgets[j], -u[j], j),
            )
            budgets[donor] -= 1
            budgets[l] += 1
    return BudgetPlan(tuple(budgets), "zigzag" if b_bound else "zigzag-unbounded")
