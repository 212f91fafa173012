"""
Splitting a cache budget across layers
======================================

Three allocators turn a mean per-layer budget ``B`` into integer per-layer
budgets that always sum to ``B * L``.
"""

# %%
# Uniform and pyramid plans
# -------------------------
# The uniform plan gives every layer ``B``. The pyramid plan shrinks linearly
# with depth down to ``min_ratio * B``.
from kvbudget import pyramid_plan, uncertainty_profile, uniform_plan, zigzag_plan

B, L = 64, 6
print("uniform ", uniform_plan(B, L).budgets)
print("pyramid ", pyramid_plan(B, L, 0.125).budgets)

# %%
# Uncertainty-driven plan
# -----------------------
# Layers whose attention is spread thin (large LMBA) get more room. Every layer
# keeps at least ``b_bound``; ``b_bound=0`` is the purely proportional split.
lmba_per_layer = [2.0, 3.5, 40.0, 55.0, 6.0, 1.0]
profile = uncertainty_profile(lmba_per_layer)
print("uncertainty", [round(u, 3) for u in profile.uncertainty])
for b_bound in (0, 16, 32, 64):
    plan = zigzag_plan(B, L, profile, b_bound)
    print(f"b_bound={b_bound:>2}", plan.budgets, "total", plan.total)

# %%
# ``b_bound = B`` collapses back to the uniform plan; smaller bounds move
# budget toward the uncertain middle layers.
