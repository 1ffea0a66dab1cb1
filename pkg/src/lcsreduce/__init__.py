"""Task-driven reduction of hybrid (complementarity) systems.

Learns a low-mode linear complementarity model from closed-loop MPC data of
a larger system and controls the larger system with it.
"""
from .env import EnvConfig, Environment, generate_full_lcs, make_rng
from .errors import LcsReduceError
from .lcs import LcsParams, lcs_rollout, lcs_step, mode_signature
from .learner import ViolationHyper, train, violation_loss
from .loop import LoopConfig, run
from .mpc import QuadCost, TrustRegion, plan, receding_rollout

__version__ = "0.1.0"

__all__ = ["EnvConfig", "Environment", "LcsParams", "LcsReduceError", "LoopConfig", "QuadCost",
           "TrustRegion", "ViolationHyper", "generate_full_lcs", "lcs_rollout", "lcs_step",
           "make_rng", "mode_signature", "plan", "receding_rollout", "run", "train",
           "violation_loss"]
