"""Uniform sampling, rounding and volume estimation for polytopes with a
lazily evaluated ball walk."""
from .geometry import (AffineMap, ContractError, Polytope, apply_affine, ball_log_volume,
                       distance_to_boundary, load_polytope, make_body, membership_full,
                       save_polytope, slack)
from .lazy_oracle import DeadlineLedger, ledger_init
from .rounding import (RoundingConfig, RoundingResult, estimate_moments, initial_interior_point,
                       round_bounded, round_polytope, warm_start)
from .volume import volume_rescale, volume_telescoping
from .walks import (FrameBall, WalkConfig, WalkStats, ball_walk_run, default_parameters,
                    hit_and_run_step, make_rng, paper_parameters, sample_uniform_batch,
                    sample_unit_ball, speedy_to_uniform)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
