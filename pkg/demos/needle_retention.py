"""
Do planted tokens survive eviction?
===================================

A needle is a prompt position that every observation query attends to.
Retention is the fraction of (layer, head) caches still holding it.
"""

# %%
from kvbudget import SynthSpec, generate_synth, needle_retention, uniform_plan
from kvbudget.policies import decide_snapkv, decide_streaming, decide_zigzag

L, h, n, w, B = 4, 4, 256, 8, 32
needles = [60, 128, 190]
trace = generate_synth(SynthSpec(L, h, n, w, [1, 4, 64, 256], seed=3, needles=needles))
states = trace.to_states()

# %%
# StreamingLLM keeps only the first few and the most recent positions, so a
# mid-context needle is gone. Score-based policies see the spike and keep it.
streaming = decide_streaming(n, h, uniform_plan(B, L))
snapkv = decide_snapkv(states, uniform_plan(B, L), w, pool_kernel=1)
zigzag, plan = decide_zigzag(states, B, B // 2, w, pool_kernel=1)
print("streamingllm", needle_retention(streaming, needles))
print("snapkv      ", needle_retention(snapkv, needles))
print("zigzag      ", needle_retention(zigzag, needles), "budgets", plan.budgets)

# %%
# The same sweep over lengths and depths is available from the command line::
#
#     kvbudget needle --policy zigzag --policy streamingllm --budget 32 \
#         --lengths 64,128,256 --depths 0.1,0.5,0.9 --out runs/needle
