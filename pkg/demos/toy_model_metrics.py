"""
Measuring how much cache each layer needs
=========================================

Build the seeded toy decoder, run a prompt, and read off per-layer LMBA
(attention-based) and LMBO (output-based) budget estimates.
"""

# %%
import numpy as np

from kvbudget import ModelConfig, build_model, lmba_profile, prefill
from kvbudget.metrics import lmbo_profile, mba

# %%
# A single attention row
# ----------------------
# MBA is the fewest entries holding 90% of the mass.
print("MBA of [0.5, 0.3, 0.15, 0.05]:", mba([0.5, 0.3, 0.15, 0.05]))
print("MBA of uniform over 10 keys:  ", mba(np.full(10, 0.1)))

# %%
# Prefill the toy model
# ---------------------
config = ModelConfig(num_layers=4, num_heads=4, head_dim=8, vocab_size=64, seed=0)
model = build_model(config)
tokens = np.random.default_rng(0).integers(64, size=48)
window = 4
result = prefill(model, tokens, window)
print("weights checksum", model.checksum())

# %%
# LMBA is cheap (attention only); LMBO replays the final token once per
# candidate budget, so it is the slower of the two.
print("LMBA per layer", lmba_profile(result.states, window))
print("LMBO per layer", lmbo_profile(model, result, window, pool_kernel=1))

# %%
# Randomly initialised attention is close to uniform, so both estimates sit
# near the prompt length. Synthetic traces (see ``policy_comparison.py``)
# give sharper contrasts.
