"""Calibration-driven adaptive rank allocation for low-rank compression of transformer weights."""

from .allocate import (
    AllocationConfig,
    AllocationPlan,
    allocate_ratios,
    balanced_ranks,
    brute_force_ranks,
    ratio_allocation,
    sublayer_importance,
    sublayer_rank_budget,
)
from .decompose import (
    EnergyProfile,
    FactorPair,
    ScaleVector,
    afm_decompose,
    joint_qk_decompose,
    pca_decompose,
    plain_svd_decompose,
    rank_for_ratio,
    weighted_svd_decompose,
)
from .errors import MGAAError
from .harness import ToyModel, ToyModelConfig, apply_plan, collect_calibration, forward, init_toy_model
from .kernels import BACKEND
from .pipeline import CompressionReport, compare_uniform, eval_model, mgaa_compress

__version__ = "0.1.0"

__all__ = [
    "AllocationConfig",
    "AllocationPlan",
    "BACKEND",
    "CompressionReport",
    "EnergyProfile",
    "FactorPair",
    "MGAAError",
    "ScaleVector",
    "ToyModel",
    "ToyModelConfig",
    "afm_decompose",
    "allocate_ratios",
    "apply_plan",
    "balanced_ranks",
    "brute_force_ranks",
    "collect_calibration",
    "compare_uniform",
    "eval_model",
    "forward",
    "init_toy_model",
    "joint_qk_decompose",
    "mgaa_compress",
    "pca_decompose",
    "plain_svd_decompose",
    "rank_for_ratio",
    "ratio_allocation",
    "sublayer_importance",
    "sublayer_rank_budget",
    "weighted_svd_decompose",
]
