"""Per-layer KV-cache budgeting, eviction policies and retention metrics on a toy decoder."""

from .budget import (
    AllocationError,
    BudgetPlan,
    UncertaintyProfile,
    largest_remainder,
    pyramid_plan,
    uncertainty_profile,
    uniform_plan,
    zigzag_plan,
)
from .cache import CacheError, EvictionDecision, KVCache, apply_eviction, retained_attention_mass
from .metrics import (
    MetricsReport,
    attention_loss,
    attention_mass_loss,
    lmba,
    lmba_profile,
    lmbo,
    mba,
    needle_retention,
    output_loss,
)
from .model import (
    ConfigError,
    InputError,
    LayerState,
    ModelConfig,
    ToyModel,
    build_model,
    decode_step,
    final_token_forward,
    prefill,
)
from .policies import PolicyConfig, PolicyKind, decide, importance_scores
from .tensor import cosine_similarity, matmul, softmax_rows, top_k_indices
from .traceio import SynthSpec, TraceFile, generate_synth, load_trace, save_trace

__version__ = "0.1.0"
