"""Phantom X-ray RL fine-tuning library.

Reinforcement learning with comparative feedback for a report-conditioned
diffusion generator, trained and evaluated on synthetic chest phantoms.
"""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config
from .diffusion import Denoiser, DiffusionSchedule, PretrainedGenerator, Trajectory, make_schedule, sample_trajectory
from .evalkit import auroc, frechet_feature_distance, one_sided_improvement, ssim, ssim_diversity
from .exceptions import (
    ArtifactIOError,
    BadMagicError,
    CheckpointError,
    ConfigError,
    DatasetError,
    DatasetMismatchError,
    FrozenModelError,
    HashMismatchError,
    MissingOptimizerStateError,
    NonFiniteError,
    OffPolicyError,
    OutputLockedError,
    PhantomRLError,
    ShapeMismatchError,
    TrainingDivergenceError,
    TruncatedPayloadError,
    UnregisteredParameterError,
    UnsupportedVersionError,
)
from .models import MetricReport, PhantomAttrs, PostureParams, RewardBreakdown, RewardWeights, RLConfig, StepStats
from .numcore import AdamOptimizer, ParamStore, RngStream, rng_stream
from .phantom import PhantomSample, apply_affine, generate_sample, make_dataset
from .rewards import RewardModels, score_pairs, total_reward
from .rlcf import AnchorModel, PolicyModel, finetune, policy_gradient_step
from .textcond import Condition, build_condition, tokenize

__all__ = [
    # Main classes
    "Config",
    "PolicyModel",
    "AnchorModel",
    "Denoiser",
    "DiffusionSchedule",
    "PretrainedGenerator",
    "RewardModels",
    "ParamStore",
    "AdamOptimizer",
    "RngStream",
    "Checkpoint",
    "Condition",
    "Trajectory",
    "PhantomSample",
    # Data models
    "PhantomAttrs",
    "PostureParams",
    "RewardWeights",
    "RewardBreakdown",
    "RLConfig",
    "StepStats",
    "MetricReport",
    # Functions
    "rng_stream",
    "make_schedule",
    "sample_trajectory",
    "tokenize",
    "build_condition",
    "apply_affine",
    "generate_sample",
    "make_dataset",
    "score_pairs",
    "total_reward",
    "policy_gradient_step",
    "finetune",
    "auroc",
    "frechet_feature_distance",
    "ssim",
    "ssim_diversity",
    "one_sided_improvement",
    "save_checkpoint",
    "load_checkpoint",
    # Exceptions
    "PhantomRLError",
    "ConfigError",
    "ShapeMismatchError",
    "NonFiniteError",
    "UnregisteredParameterError",
    "MissingOptimizerStateError",
    "FrozenModelError",
    "OffPolicyError",
    "TrainingDivergenceError",
    "DatasetError",
    "DatasetMismatchError",
    "ArtifactIOError",
    "OutputLockedError",
    "CheckpointError",
    "BadMagicError",
    "UnsupportedVersionError",
    "HashMismatchError",
    "TruncatedPayloadError",
]
