"""Token-sharded multi-party transformer inference with exact recombination."""
__version__ = "0.1.0"

from .toy_model import ModelConfig, ModelWeights, forward_full, forward_prefix, greedy_decode, new_model
from .sharding import AttackBudget, ShardPlan, build_plan, gap_profile, validate_plan
from .netsim import NetworkParams, Router, measure_run, predicted_comm_bytes
from .protocol import cascade_forward, cascade_generate, assemble_logits
from .attack import estimate_cost, layer0_meu_attack, vocab_match

__all__ = [
    "ModelConfig", "ModelWeights", "new_model", "forward_prefix", "forward_full", "greedy_decode",
    "AttackBudget", "ShardPlan", "build_plan", "gap_profile", "validate_plan",
    "NetworkParams", "Router", "measure_run", "predicted_comm_bytes",
    "cascade_forward", "cascade_generate", "assemble_logits",
    "vocab_match", "layer0_meu_attack", "estimate_cost",
]
