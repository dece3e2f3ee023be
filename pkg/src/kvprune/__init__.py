"""Norm-halting KV-cache pruning on a deterministic toy transformer."""

from kvprune.baselines import (
    BudgetSpec,
    attn_ranked_halt,
    h2o_like,
    snapkv_like,
    streaming_llm,
)
from kvprune.model import KvCache, Model, ModelConfig, StepOutput, build_model, decode_step, prefill
from kvprune.pruner import (
    PruneDecision,
    PrunerConfig,
    apply_decisions,
    halt_index,
    prune_batch,
    prune_layer,
    rank_positions,
    reduce_attention,
)
from kvprune.tensor import CausalMask, DimensionError, attention, masked_softmax

__all__ = [
    "BudgetSpec",
    "CausalMask",
    "DimensionError",
    "KvCache",
    "Model",
    "ModelConfig",
    "PruneDecision",
    "PrunerConfig",
    "StepOutput",
    "apply_decisions",
    "attention",
    "attn_ranked_halt",
    "build_model",
    "decode_step",
    "h2o_like",
    "halt_index",
    "masked_softmax",
    "prefill",
    "prune_batch",
    "prune_layer",
    "rank_positions",
    "reduce_attention",
    "snapkv_like",
    "streaming_llm",
]
