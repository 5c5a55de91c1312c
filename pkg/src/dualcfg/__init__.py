"""Dual classifier-free guidance for two-condition latent diffusion."""
from .core import (
    CONTENT_DOMINANT,
    DEFAULT_N_STEPS,
    DESCRIPTION_DOMINANT,
    JOINT,
    ConditionPair,
    GuidanceWeights,
    NoiseSchedule,
    ddim_step,
    dual_cfg_combine,
    forward_diffuse,
    make_schedule,
    sample,
    unified_cfg_combine,
)
from .oracle import OracleScore, ToyWorld, WorldSpec, default_world, verify_score_decomposition

__version__ = "0.1.0"

__all__ = [
    "CONTENT_DOMINANT",
    "DEFAULT_N_STEPS",
    "DESCRIPTION_DOMINANT",
    "JOINT",
    "ConditionPair",
    "GuidanceWeights",
    "NoiseSchedule",
    "OracleScore",
    "ToyWorld",
    "WorldSpec",
    "ddim_step",
    "default_world",
    "dual_cfg_combine",
    "forward_diffuse",
    "make_schedule",
    "sample",
    "unified_cfg_combine",
    "verify_score_decomposition",
]
