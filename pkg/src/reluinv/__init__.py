"""Exact input reconstruction from the gradients of ReLU-activated linear layers."""
from .capture_io import load_capture, save_capture
from .decomp import LowRankPair, estimate_batch_rank, initial_decomposition
from .disagg import (
    AttackConfig, CandidatePool, ReconstructionReport, compute_score, fix_scale, greedy_filt, init_filt,
    ortho_complement, polish, run_attack, sparsity_count,
)
from .flsim import (
    GradientCapture, MlpModel, Protocol, capture_dpsgd, capture_fedavg, capture_fedsgd, forward, init_mlp,
)
from .metrics import match_and_score, psnr
from .rounding import RoundingConfig, kernel_direction, round_via_sampling
from .sphere import L1, LogCosh, NegL4, OptimizerConfig, optimize_on_sphere, run_restarts

__version__ = "0.1.0"
