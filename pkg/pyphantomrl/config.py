"""Flat key=value configuration shared by every pipeline stage."""

import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .constants import K_LABELS
from .exceptions import ArtifactIOError, ConfigError
from .models import RewardWeights, RLConfig

logger = logging.getLogger(__name__)

# Keys that do not change what a run computes, only where it lands.
_UNHASHED_KEYS = frozenset({"output_dir"})

_AUTO = ("", "auto", "none")


class Config(BaseModel):
    """Every tunable of the pipeline.

    Defaults follow the desk-scale profile; the full-scale profile differs only in
    batch size (see `full_scale_profile`).
    """

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = Field(0, ge=0, description="Master seed of every RNG stream")
    image_size: int = Field(32, ge=8, description="Phantom edge length in pixels")
    T: int = Field(50, ge=1, description="Diffusion steps")
    beta_min: Optional[float] = Field(None, description="First beta; auto = 1e-4*1000/T")
    beta_max: Optional[float] = Field(None, description="Last beta; auto = 0.02*1000/T")
    d_tau: int = Field(32, ge=1, description="Condition embedding width")
    d_model: int = Field(64, ge=8, description="Denoiser token width")
    n_ace: int = Field(3, ge=0, description="Adaptive condition embedding rows (N)")
    m_max: int = Field(74, ge=1, description="Maximum report tokens (M)")
    k_labels: int = Field(K_LABELS, description="Label classes (fixed at 4)")
    lambda_align: float = Field(1.0, ge=0.0, description="Posture reward weight")
    lambda_diag: float = Field(10.0, ge=0.0, description="Diagnostic reward weight")
    lambda_consist: float = Field(10.0, ge=0.0, description="Consistency reward weight")
    batch_size: int = Field(16, ge=1, description="RL rollout pairs per step")
    lr: float = Field(3e-4, gt=0.0, description="RL learning rate")
    rl_steps: int = Field(300, ge=0, description="RL steps")
    shared_noise: bool = Field(True, description="Anchor reuses the policy noise")
    whiten_rewards: bool = Field(False, description="Per-batch reward standardisation")
    grad_clip: float = Field(1.0, ge=0.0, description="Global gradient-norm clip; 0 disables")
    comparative: bool = Field(True, description="Anchor-relative diag/consist rewards")
    soft_accuracy: bool = Field(False, description="Soft per-image accuracy for r_diag")
    output_dir: str = Field("runs/default", description="Where artifacts are written")

    n_train: int = Field(5000, ge=1, description="Training phantoms")
    n_test: int = Field(1000, ge=1, description="Test phantoms")
    canonical_k: int = Field(500, ge=1, description="Images averaged into the canonical mean")
    pretrain_steps: int = Field(3000, ge=0, description="Denoiser pretraining steps")
    pretrain_batch: int = Field(64, ge=1, description="Denoiser pretraining batch")
    pretrain_lr: float = Field(1e-3, gt=0.0, description="Denoiser pretraining learning rate")
    reward_epochs: int = Field(40, ge=1, description="Epochs for each reward model")
    reward_batch: int = Field(64, ge=2, description="Reward-model minibatch")
    reward_lr: float = Field(1e-3, gt=0.0, description="Reward-model learning rate")
    d_embed: int = Field(32, ge=2, description="Joint embedding width of the dual encoder")
    temperature: float = Field(0.07, gt=0.0, description="Contrastive temperature")
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    checkpoint_every: int = Field(50, ge=0, description="RL checkpoint period; 0 disables")
    eval_reports: int = Field(256, ge=2, description="Held-out reports used by eval")
    ssim_pairs: int = Field(1000, ge=1, description="Random pairs for SSIM diversity")
    precision: Literal["float32", "float64"] = Field("float32", description="Tensor storage precision")

    @field_validator("beta_min", "beta_max", mode="before")
    @classmethod
    def parse_auto(cls, v: Any) -> Any:
        """Treat empty/auto/none as "derive from T"."""
        if isinstance(v, str) and v.strip().lower() in _AUTO:
            return None
        return v

    @field_validator("k_labels")
    @classmethod
    def check_k_labels(cls, v: int) -> int:
        """The phantom label set is fixed."""
        if v != K_LABELS:
            raise ValueError(f"k_labels must be {K_LABELS}")
        return v

    @field_validator("image_size")
    @classmethod
    def check_image_size(cls, v: int) -> int:
        """The denoiser patches images into 8x8 tiles."""
        if v % 8:
            raise ValueError("image_size must be a multiple of 8")
        return v

    @model_validator(mode="after")
    def check_betas(self) -> "Config":
        """Explicit betas must satisfy 0 < beta_min <= beta_max < 1."""
        lo, hi = self.betas()
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({lo}, {hi})")
        return self

    def betas(self) -> Tuple[float, float]:
        """Resolved (beta_min, beta_max), rescaled to T when not given."""
        scale = 1000.0 / self.T
        lo = self.beta_min if self.beta_min is not None else min(1e-4 * scale, 0.5)
        hi = self.beta_max if self.beta_max is not None else min(0.02 * scale, 0.999)
        return lo, hi

    @property
    def weights(self) -> RewardWeights:
        """Lambda triple."""
        return RewardWeights(align=self.lambda_align, diag=self.lambda_diag, consist=self.lambda_consist)

    @property
    def output_path(self) -> Path:
        """Output directory as a Path."""
        return Path(self.output_dir)

    def rl_config(self) -> RLConfig:
        """Project the RL-loop settings."""
        return RLConfig(
            batch_size=self.batch_size,
            lr=self.lr,
            weights=self.weights,
            total_steps=self.rl_steps,
            T=self.T,
            shared_noise=self.shared_noise,
            whiten_rewards=self.whiten_rewards,
            grad_clip=self.grad_clip,
            comparative=self.comparative,
            soft_accuracy=self.soft_accuracy,
            checkpoint_every=self.checkpoint_every,
            adam_betas=(self.adam_beta1, self.adam_beta2),
            adam_eps=self.adam_eps,
        )

    # ---- text form -------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "Config":
        """Parse `key=value` lines; `#` starts a comment."""
        return cls.from_mapping(parse_key_values(text.splitlines(), source))

    @classmethod
    def from_file(cls, path: Path) -> "Config":
        """Load a config file.

        Raises:
            ArtifactIOError: If the file cannot be read
            ConfigError: If a key is unknown or a value fails validation
        """
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ArtifactIOError(str(path), e)
        return cls.from_text(text, source=str(path))

    @classmethod
    def from_mapping(cls, values: Dict[str, Any]) -> "Config":
        """Validate a mapping, converting pydantic errors to ConfigError."""
        try:
            return cls(**values)
        except ValidationError as e:
            raise _config_error(e)

    def with_overrides(self, overrides: Iterable[str]) -> "Config":
        """Return a copy with `key=value` overrides applied."""
        values = self.model_dump()
        values.update(parse_key_values(overrides, "<overrides>"))
        return Config.from_mapping(values)

    def to_text(self, include_unhashed: bool = True) -> str:
        """Canonical rendering: sorted keys, one per line."""
        lines = []
        for key, value in sorted(self.model_dump().items()):
            if not include_unhashed and key in _UNHASHED_KEYS:
                continue
            lines.append(f"{key}={_render(value)}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Short sha256 of everything that affects results."""
        digest = hashlib.sha256(self.to_text(include_unhashed=False).encode("utf-8"))
        return digest.hexdigest()[:16]

    # ---- profiles --------------------------------------------------------

    @classmethod
    def full_scale_profile(cls, **overrides: Any) -> "Config":
        """Batch 81, lr 3e-4, lambda (1, 10, 10), N=3, M<=74."""
        values: Dict[str, Any] = {"batch_size": 81, "lr": 3e-4, "n_ace": 3, "m_max": 74}
        values.update(overrides)
        return cls.from_mapping(values)

    @classmethod
    def smoke_profile(cls, **overrides: Any) -> "Config":
        """Desk-scale acceptance profile: B=16, T=50, 300 steps, 32x32."""
        values: Dict[str, Any] = {"batch_size": 16, "T": 50, "rl_steps": 300, "image_size": 32}
        values.update(overrides)
        return cls.from_mapping(values)


def parse_key_values(lines: Iterable[str], source: str) -> Dict[str, str]:
    """Split `key=value` lines into a dict, rejecting malformed lines."""
    values: Dict[str, str] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key=value, got '{raw.strip()}'")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{number}: empty key")
        values[key] = value.strip()
    return values


def _render(value: Any) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _config_error(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    key = ".".join(str(part) for part in first.get("loc", ())) or None
    if first.get("type") == "extra_forbidden":
        return ConfigError("Unknown configuration key", key=key)
    return ConfigError(f"Invalid configuration value: {first.get('msg')}", key=key)
