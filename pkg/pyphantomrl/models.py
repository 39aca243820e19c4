"""Pydantic models for phantom attributes, rewards, training stats and metrics."""

import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator

from .constants import FINDING_NAMES, Finding, PostureRange


class PhantomAttrs(BaseModel):
    """Findings stamped onto one phantom, plus the anatomy jitter seeds."""

    model_config = ConfigDict(frozen=True)

    effusion: bool = Field(False, description="Bottom-of-lung fluid gradient")
    cardiomegaly: bool = Field(False, description="Enlarged cardiac silhouette")
    opacity: bool = Field(False, description="Round lung opacity")
    opacity_side: Optional[Literal["left", "right"]] = Field(
        None, description="Patient side of the opacity (present iff opacity)"
    )
    opacity_size: Optional[Literal["small", "large"]] = Field(
        None, description="Opacity size class (present iff opacity)"
    )
    device: bool = Field(False, description="Thin bright support-device line")
    jitter: Tuple[float, float, float, float] = Field(
        (0.0, 0.0, 0.0, 0.0),
        description="Anatomy shape jitter: lung width, lung height, heart offset, diaphragm height",
    )

    @model_validator(mode="after")
    def check_opacity_details(self) -> "PhantomAttrs":
        """Side and size exist exactly when an opacity exists."""
        has_details = self.opacity_side is not None and self.opacity_size is not None
        has_any = self.opacity_side is not None or self.opacity_size is not None
        if self.opacity and not has_details:
            raise ValueError("opacity requires opacity_side and opacity_size")
        if not self.opacity and has_any:
            raise ValueError("opacity_side/opacity_size given without opacity")
        return self

    @computed_field
    @property
    def labels(self) -> List[int]:
        """K-bit label vector in Finding order."""
        flags = {
            Finding.EFFUSION: self.effusion,
            Finding.CARDIOMEGALY: self.cardiomegaly,
            Finding.OPACITY: self.opacity,
            Finding.DEVICE: self.device,
        }
        return [int(flags[finding]) for finding in Finding]

    @computed_field
    @property
    def findings(self) -> List[str]:
        """Names of the positive findings."""
        return [name for name, bit in zip(FINDING_NAMES, self.labels) if bit]


class PostureParams(BaseModel):
    """Affine posture: scale about the centre, then rotation, then translation."""

    model_config = ConfigDict(frozen=True)

    s_x: float = Field(1.0, description="Horizontal scale (unitless)")
    s_y: float = Field(1.0, description="Vertical scale (unitless)")
    t_x: float = Field(0.0, description="Horizontal translation, fraction of image width")
    t_y: float = Field(0.0, description="Vertical translation, fraction of image height")
    theta: float = Field(0.0, description="Rotation in radians")

    @classmethod
    def identity(cls) -> "PostureParams":
        """The canonical pose."""
        return cls()

    @classmethod
    def from_vector(cls, values) -> "PostureParams":
        """Build from (s_x, s_y, t_x, t_y, theta)."""
        s_x, s_y, t_x, t_y, theta = (float(v) for v in values)
        return cls(s_x=s_x, s_y=s_y, t_x=t_x, t_y=t_y, theta=theta)

    def as_vector(self) -> Tuple[float, float, float, float, float]:
        """Return (s_x, s_y, t_x, t_y, theta)."""
        return (self.s_x, self.s_y, self.t_x, self.t_y, self.theta)

    def is_finite(self) -> bool:
        """True when every field is finite."""
        return all(math.isfinite(v) for v in self.as_vector())

    def within_sampling_range(self) -> bool:
        """True when the pose lies inside the generator's sampling ranges."""
        lo, hi = PostureRange.SCALE
        return (
            lo <= self.s_x <= hi
            and lo <= self.s_y <= hi
            and abs(self.t_x) <= PostureRange.TRANSLATION
            and abs(self.t_y) <= PostureRange.TRANSLATION
            and abs(self.theta) <= PostureRange.ROTATION
        )


class RewardWeights(BaseModel):
    """The lambda triple weighting the three reward components."""

    model_config = ConfigDict(frozen=True)

    align: float = Field(1.0, ge=0.0, description="Weight of the posture-alignment reward")
    diag: float = Field(10.0, ge=0.0, description="Weight of the diagnostic reward")
    consist: float = Field(10.0, ge=0.0, description="Weight of the consistency reward")

    def as_tuple(self) -> Tuple[float, float, float]:
        """Return (align, diag, consist)."""
        return (self.align, self.diag, self.consist)

    def mask_label(self) -> str:
        """Short label of which components are switched on."""
        parts = [
            name
            for name, weight in (("align", self.align), ("diag", self.diag), ("consist", self.consist))
            if weight > 0
        ]
        return "+".join(parts) if parts else "none"


class RewardBreakdown(BaseModel):
    """Reward components for one (policy image, anchor image, report) triple."""

    model_config = ConfigDict(frozen=True)

    r_align: float = Field(..., description="Posture-alignment reward (absolute)")
    r_diag: float = Field(..., description="Diagnostic reward")
    r_consist: float = Field(..., description="Report-consistency reward")
    weights: RewardWeights = Field(default_factory=RewardWeights, description="Lambda triple used")

    @computed_field
    @property
    def total(self) -> float:
        """Weighted sum of the three components."""
        return (
            self.weights.align * self.r_align
            + self.weights.diag * self.r_diag
            + self.weights.consist * self.r_consist
        )


class RLConfig(BaseModel):
    """Settings of the fine-tuning loop."""

    batch_size: int = Field(16, ge=1, description="Rollout pairs per step (B)")
    lr: float = Field(3e-4, gt=0.0, description="Adam learning rate")
    weights: RewardWeights = Field(default_factory=RewardWeights, description="Lambda triple")
    total_steps: int = Field(300, ge=0, description="Number of policy-gradient steps")
    T: int = Field(50, ge=1, description="Diffusion steps per rollout")
    shared_noise: bool = Field(True, description="Policy and anchor consume identical noise")
    whiten_rewards: bool = Field(False, description="Standardise rewards per batch before weighting")
    grad_clip: float = Field(1.0, ge=0.0, description="Global-norm clip, 0 disables")
    comparative: bool = Field(True, description="Subtract anchor scores from diag/consist rewards")
    soft_accuracy: bool = Field(False, description="Use mean true-bit probability as accuracy")
    checkpoint_every: int = Field(50, ge=0, description="Checkpoint period in steps, 0 disables")
    adam_betas: Tuple[float, float] = Field((0.9, 0.999), description="Adam moment decay rates")
    adam_eps: float = Field(1e-8, gt=0.0, description="Adam epsilon")


class StepStats(BaseModel):
    """Summary of one policy-gradient step."""

    step: int = Field(..., ge=0, description="Step index")
    mean_r_align: float
    std_r_align: float
    mean_r_diag: float
    std_r_diag: float
    mean_r_consist: float
    std_r_consist: float
    mean_total: float
    grad_norm: float = Field(..., description="Global gradient norm before clipping")
    seconds: float = Field(..., description="Wall time of the step")

    def is_finite(self) -> bool:
        """True when every statistic is finite."""
        return all(math.isfinite(v) for v in self.model_dump().values() if isinstance(v, float))

    def log_row(self) -> List[str]:
        """Row for the training log CSV (without the config hash)."""
        return [
            str(self.step),
            repr(self.mean_r_align),
            repr(self.mean_r_diag),
            repr(self.mean_r_consist),
            repr(self.mean_total),
            repr(self.grad_norm),
            f"{self.seconds:.3f}",
        ]


class DatasetManifest(BaseModel):
    """What `manifest.txt` records about a dumped dataset."""

    seed: int
    n_train: int = Field(..., ge=1)
    n_test: int = Field(..., ge=1)
    image_size: int = Field(..., ge=8)
    version: int
    config_hash: str = ""
    dataset_hash: str = ""

    def to_text(self) -> str:
        """Render as key=value lines."""
        return "".join(f"{key}={value}\n" for key, value in self.model_dump().items())

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        """Parse key=value lines."""
        values: Dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        return cls(**values)


class PostureFitReport(BaseModel):
    """Held-out errors of the fitted posture regressor."""

    translation_mae: float = Field(..., description="Mean |t| error, fraction of width")
    rotation_mae: float = Field(..., description="Mean |theta| error, radians")
    scale_mae: float = Field(..., description="Mean |s| error")
    identity_error: float = Field(..., description="Largest field error on a canonical phantom")
    n_samples: int

    @computed_field
    @property
    def passed(self) -> bool:
        """Gate: |t| < 0.02, |theta| < 0.02 rad, scale < 0.03."""
        return self.translation_mae < 0.02 and self.rotation_mae < 0.02 and self.scale_mae < 0.03


class ClassifierFitReport(BaseModel):
    """Held-out AUROC of the fitted phantom classifier."""

    per_class_auroc: Dict[str, float]
    macro_auroc: float
    n_samples: int

    @computed_field
    @property
    def passed(self) -> bool:
        """Gate: every class at AUROC >= 0.95."""
        return min(self.per_class_auroc.values()) >= 0.95


class DualEncoderFitReport(BaseModel):
    """Held-out retrieval quality of the fitted dual encoder."""

    top1_retrieval: float = Field(..., description="Report-to-image top-1 accuracy among 32 candidates")
    own_report_preference: float = Field(
        ..., description="Share of images scoring their own report above a mismatched one"
    )
    n_samples: int

    @computed_field
    @property
    def passed(self) -> bool:
        """Gate: retrieval >= 80% and own-report preference >= 90%."""
        return self.top1_retrieval >= 0.8 and self.own_report_preference >= 0.9


class MetricReport(BaseModel):
    """Evaluation of one generator (one row of metrics.csv / ablation.csv)."""

    name: str = Field(..., description="Model or configuration label")
    mean_r_align: float
    per_class_auroc: Dict[str, float]
    macro_auroc: float
    mean_similarity: float = Field(..., description="Mean cosine similarity of image and own report")
    frechet_distance: float
    ssim_diversity: float
    n_samples: int = Field(..., gt=0)
    n_reference: int = Field(..., gt=0)
    dataset_hash: str
    config_hash: str

    def csv_header(self) -> List[str]:
        """Column names in row order."""
        return (
            ["name", "mean_r_align"]
            + [f"auroc_{name}" for name in FINDING_NAMES]
            + [
                "macro_auroc",
                "mean_similarity",
                "frechet_distance",
                "ssim_diversity",
                "n_samples",
                "n_reference",
                "dataset_hash",
                "config_hash",
            ]
        )

    def csv_row(self) -> List[str]:
        """Values in header order; floats in shortest round-trip form."""
        return (
            [self.name, repr(self.mean_r_align)]
            + [repr(self.per_class_auroc[name]) for name in FINDING_NAMES]
            + [
                repr(self.macro_auroc),
                repr(self.mean_similarity),
                repr(self.frechet_distance),
                repr(self.ssim_diversity),
                str(self.n_samples),
                str(self.n_reference),
                self.dataset_hash,
                self.config_hash,
            ]
        )
