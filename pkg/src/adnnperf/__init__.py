"""Performance testing for adaptive neural networks.

One-shot generation of inputs that make gated or early-exit models spend
more computation, plus the cost model, metrics and defences around it.
"""

from .adnn import AdnnSpec, BlockTrace, build_model, forward_with_trace, load_model, reference_spec, save_model, train_adnn
from .budget import L2, LINF, PerturbationBudget, clip_sample
from .flops import CONDITIONAL_SKIPPING, EARLY_TERMINATION, CostProfile, hard_cost, soft_cost
from .metrics import TestSuite, block_coverage, degradation_success, i_flops, pcc

__all__ = [
    "AdnnSpec",
    "BlockTrace",
    "CONDITIONAL_SKIPPING",
    "CostProfile",
    "EARLY_TERMINATION",
    "L2",
    "LINF",
    "PerturbationBudget",
    "TestSuite",
    "block_coverage",
    "build_model",
    "clip_sample",
    "degradation_success",
    "forward_with_trace",
    "hard_cost",
    "i_flops",
    "load_model",
    "pcc",
    "reference_spec",
    "save_model",
    "soft_cost",
    "train_adnn",
]
