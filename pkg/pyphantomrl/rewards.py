"""Goal-oriented reward models and the combined comparative reward.

Three frozen networks score generated images:

* ``PostureModel`` regresses the affine posture of an image.
* ``ClassifierModel`` predicts the K finding probabilities.
* ``DualEncoder`` embeds images and reports into one unit-norm space.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .constants import K_LABELS, PostureRange, Vocabulary
from .exceptions import FrozenModelError, NonFiniteError, ShapeMismatchError
from .models import (
    ClassifierFitReport,
    DualEncoderFitReport,
    PhantomAttrs,
    PostureFitReport,
    PostureParams,
    RewardBreakdown,
    RewardWeights,
)
from .numcore import AdamOptimizer, ParamStore, RngStream, as_image_batch, gradients_of, seeded
from .phantom import render_canonical
from .textcond import DEFAULT_M_MAX, pad_tokens, tokenize

logger = logging.getLogger(__name__)

# Regressor outputs are normalised posture offsets; these undo the normalisation.
POSTURE_SCALE = torch.tensor([0.15, 0.15, 0.1, 0.1, 0.15])
POSTURE_SHIFT = torch.tensor([1.0, 1.0, 0.0, 0.0, 0.0])

FEATURE_DIM = 16
RETRIEVAL_CANDIDATES = 32


def _coord_channels(x: torch.Tensor) -> torch.Tensor:
    b, _, h, w = x.shape
    ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([grid_x, grid_y]).expand(b, 2, h, w)
    return torch.cat([x, coords], dim=1)


def _conv_trunk(in_channels: int, image_size: int) -> Tuple[nn.Sequential, int]:
    trunk = nn.Sequential(
        nn.Conv2d(in_channels, 16, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(16, 32, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
    )
    return trunk, 32 * (image_size // 4) ** 2


class PostureModel(nn.Module):
    """CNN regressor image -> (s_x, s_y, t_x, t_y, theta) with coordinate channels."""

    def __init__(self, image_size: int = 32):
        super().__init__()
        self.trunk, width = _conv_trunk(3, image_size)
        self.head = nn.Sequential(nn.Linear(width, 64), nn.ReLU(), nn.Linear(64, 5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Normalised posture offsets, (B, 5)."""
        return self.head(self.trunk(_coord_channels(x)))

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Clamped posture vectors, (B, 5)."""
        psi = self(x) * POSTURE_SCALE.to(x.dtype) + POSTURE_SHIFT.to(x.dtype)
        lo, hi = PostureRange.CLAMP_SCALE
        t_max, theta_max = PostureRange.CLAMP_TRANSLATION, PostureRange.CLAMP_ROTATION
        return torch.cat(
            [psi[:, :2].clamp(lo, hi), psi[:, 2:4].clamp(-t_max, t_max), psi[:, 4:].clamp(-theta_max, theta_max)],
            dim=1,
        )


class ClassifierModel(nn.Module):
    """Multi-label CNN with a 16-wide penultimate layer."""

    def __init__(self, image_size: int = 32, k_labels: int = K_LABELS):
        super().__init__()
        self.trunk, width = _conv_trunk(1, image_size)
        self.penultimate = nn.Sequential(nn.Linear(width, FEATURE_DIM), nn.ReLU())
        self.head = nn.Linear(FEATURE_DIM, k_labels)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate activations, (B, 16)."""
        return self.penultimate(self.trunk(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits, (B, K)."""
        return self.head(self.features(x))

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        """Per-class probabilities in (0, 1), (B, K)."""
        return torch.sigmoid(self(x))


class DualEncoder(nn.Module):
    """Image and report towers projecting into a unit-norm joint space."""

    def __init__(self, image_size: int = 32, d_embed: int = 32, m_max: int = DEFAULT_M_MAX, d_text: int = 32):
        super().__init__()
        self.m_max = m_max
        self.image_trunk, width = _conv_trunk(1, image_size)
        self.image_proj = nn.Sequential(nn.Linear(width, 64), nn.ReLU(), nn.Linear(64, d_embed))
        self.token = nn.Embedding(Vocabulary.size(), d_text)
        self.position = nn.Parameter(torch.randn(m_max, d_text) * 0.02)
        self.text_layer = nn.TransformerEncoderLayer(
            d_text, nhead=4, dim_feedforward=2 * d_text, dropout=0.0, batch_first=True
        )
        self.text_proj = nn.Linear(d_text, d_embed)

    def encode_images(self, x: torch.Tensor) -> torch.Tensor:
        """Unit-norm image embeddings, (B, d_e)."""
        return F.normalize(self.image_proj(self.image_trunk(x)), dim=1)

    def encode_tokens(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Unit-norm report embeddings from padded ids, (B, d_e)."""
        h = self.token(ids) + self.position[: ids.shape[1]]
        h = self.text_layer(h, src_key_padding_mask=mask)
        keep = (~mask).to(h.dtype).unsqueeze(-1)
        pooled = (h * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        return F.normalize(self.text_proj(pooled), dim=1)

    def encode_reports(self, reports: Sequence[str]) -> torch.Tensor:
        """Tokenize and embed report texts."""
        ids, mask = pad_tokens([tokenize(r, self.m_max) for r in reports])
        return self.encode_tokens(ids, mask)


def freeze(module: nn.Module) -> nn.Module:
    """Switch a fitted model to inference mode with all parameters frozen."""
    module.eval()
    for param in module.parameters():
        param.requires_grad_(False)
    return module


def _check_frozen(module: nn.Module, name: str) -> None:
    if any(p.requires_grad for p in module.parameters()):
        raise FrozenModelError(f"{name} must be frozen before scoring")


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _fit(
    name: str,
    module: nn.Module,
    loss_fn: Callable[[np.ndarray], torch.Tensor],
    n: int,
    stream: RngStream,
    epochs: int,
    batch_size: int,
    lr: float,
    min_batch: int = 1,
) -> nn.Module:
    store = ParamStore.from_modules({name: module})
    optimizer = AdamOptimizer(store, lr=lr)
    module.train()
    for epoch in range(epochs):
        order = stream.child(f"epoch{epoch}").permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < min_batch:
                continue
            loss = loss_fn(idx)
            optimizer.step(gradients_of(loss, store))
            total += float(loss)
            batches += 1
        if not math.isfinite(total):
            raise NonFiniteError(f"{name} training loss")
        logger.debug(f"{name} epoch {epoch}: mean loss {total / max(batches, 1):.5f}")
    return freeze(module)


def _posture_targets(psis: Sequence[PostureParams]) -> torch.Tensor:
    raw = torch.tensor([p.as_vector() for p in psis], dtype=torch.get_default_dtype())
    return (raw - POSTURE_SHIFT.to(raw.dtype)) / POSTURE_SCALE.to(raw.dtype)


def fit_posture(
    images: torch.Tensor,
    psis: Sequence[PostureParams],
    stream: RngStream,
    epochs: int = 40,
    batch_size: int = 64,
    lr: float = 1e-3,
) -> PostureModel:
    """Squared-error regression of psi_true from the image.

    Raises:
        ValueError: If the training set is empty
    """
    if len(psis) == 0:
        raise ValueError("fit_posture needs at least one sample")
    images = as_image_batch(images)
    targets = _posture_targets(psis)
    with seeded(stream.child("init")):
        model = PostureModel(images.shape[-1])

    def loss_fn(idx: np.ndarray) -> torch.Tensor:
        sel = torch.from_numpy(idx)
        return ((model(images[sel]) - targets[sel]) ** 2).mean()

    return _fit("posture", model, loss_fn, len(psis), stream.child("fit"), epochs, batch_size, lr)


def fit_classifier(
    images: torch.Tensor,
    labels: Sequence[Sequence[int]],
    stream: RngStream,
    epochs: int = 40,
    batch_size: int = 64,
    lr: float = 1e-3,
) -> ClassifierModel:
    """Per-class logistic loss on the label vectors.

    Raises:
        ValueError: If the training set is empty
    """
    if len(labels) == 0:
        raise ValueError("fit_classifier needs at least one sample")
    images = as_image_batch(images)
    targets = torch.tensor([list(lab) for lab in labels], dtype=torch.get_default_dtype())
    with seeded(stream.child("init")):
        model = ClassifierModel(images.shape[-1], targets.shape[1])

    def loss_fn(idx: np.ndarray) -> torch.Tensor:
        sel = torch.from_numpy(idx)
        return F.binary_cross_entropy_with_logits(model(images[sel]), targets[sel])

    return _fit("classifier", model, loss_fn, len(labels), stream.child("fit"), epochs, batch_size, lr)


def fit_dual_encoder(
    images: torch.Tensor,
    reports: Sequence[str],
    stream: RngStream,
    epochs: int = 40,
    batch_size: int = 64,
    lr: float = 1e-3,
    d_embed: int = 32,
    temperature: float = 0.07,
    m_max: int = DEFAULT_M_MAX,
) -> DualEncoder:
    """Symmetric in-batch contrastive training.

    Raises:
        ValueError: If fewer than two pairs or a batch size below 2 is given
    """
    if len(reports) < 2 or batch_size < 2:
        raise ValueError("fit_dual_encoder needs batches of at least two pairs")
    images = as_image_batch(images)
    ids, mask = pad_tokens([tokenize(r, m_max) for r in reports])
    with seeded(stream.child("init")):
        model = DualEncoder(images.shape[-1], d_embed=d_embed, m_max=m_max)

    def loss_fn(idx: np.ndarray) -> torch.Tensor:
        sel = torch.from_numpy(idx)
        width = int((~mask[sel]).sum(dim=1).max())
        img = model.encode_images(images[sel])
        txt = model.encode_tokens(ids[sel, :width], mask[sel, :width])
        logits = img @ txt.T / temperature
        target = torch.arange(len(idx))
        return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))

    return _fit("dual_encoder", model, loss_fn, len(reports), stream.child("fit"), epochs, batch_size, lr, min_batch=2)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def estimate_posture(model: PostureModel, image) -> PostureParams:
    """Clamped posture estimate for a single (H, W) image.

    Raises:
        NonFiniteError: If the image has NaN or infinite pixels
    """
    return estimate_postures(model, as_image_batch([np.asarray(image)]))[0]


def estimate_postures(model: PostureModel, images: torch.Tensor) -> List[PostureParams]:
    """Clamped posture estimates for an image batch."""
    images = as_image_batch(images)
    if not torch.isfinite(images).all():
        raise NonFiniteError("image")
    with torch.no_grad():
        psi = model.predict(images).to(torch.float64).numpy()
    return [PostureParams.from_vector(row) for row in psi]


def reward_align(psi: PostureParams) -> float:
    """-(max(|s_x-1|, |s_y-1|) + |theta|/(2 pi) + ||t||)."""
    scale = max(abs(psi.s_x - 1.0), abs(psi.s_y - 1.0))
    return -(scale + abs(psi.theta) / (2.0 * math.pi) + math.hypot(psi.t_x, psi.t_y))


def accuracy(probabilities: Sequence[float], labels: Sequence[int], soft: bool = False) -> float:
    """Share of classes predicted correctly at threshold 0.5.

    With ``soft`` the mean probability assigned to the true bit is returned.

    Raises:
        ShapeMismatchError: If the lengths differ from K
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != (K_LABELS,) or labels.shape != (K_LABELS,):
        bad = labels.shape if probs.shape == (K_LABELS,) else probs.shape
        raise ShapeMismatchError("label vector", (K_LABELS,), bad)
    if soft:
        return float(np.mean(np.where(labels == 1, probs, 1.0 - probs)))
    return float(np.mean((probs >= 0.5).astype(int) == labels))


def _class_probabilities(classifier: ClassifierModel, images: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return classifier.probabilities(as_image_batch(images)).to(torch.float64).numpy()


def _image_embeddings(encoder: DualEncoder, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return encoder.encode_images(as_image_batch(images)).to(torch.float64)


def _report_embeddings(encoder: DualEncoder, reports: Sequence[str]) -> torch.Tensor:
    with torch.no_grad():
        return encoder.encode_reports(reports).to(torch.float64)


def reward_diag(
    x,
    x_anchor,
    labels: Sequence[int],
    classifier: ClassifierModel,
    soft: bool = False,
    comparative: bool = True,
) -> float:
    """accuracy(G(x)) - accuracy(G(x_anchor)); the anchor term is dropped when not comparative."""
    ours = accuracy(_class_probabilities(classifier, [np.asarray(x)])[0], labels, soft)
    if not comparative:
        return ours
    theirs = accuracy(_class_probabilities(classifier, [np.asarray(x_anchor)])[0], labels, soft)
    return ours - theirs


def reward_consist(x, x_anchor, report: str, encoder: DualEncoder, comparative: bool = True) -> float:
    """Cosine similarity gap to the report between x and x_anchor."""
    text = _report_embeddings(encoder, [report])[0]
    ours = float(_image_embeddings(encoder, [np.asarray(x)])[0] @ text)
    if not comparative:
        return ours
    theirs = float(_image_embeddings(encoder, [np.asarray(x_anchor)])[0] @ text)
    return ours - theirs


@dataclass
class RewardModels:
    """The three frozen reward networks and their held-out fit reports."""

    posture: PostureModel
    classifier: ClassifierModel
    dual_encoder: DualEncoder
    reports: Dict[str, dict] = field(default_factory=dict)

    def check_frozen(self) -> None:
        """Raise FrozenModelError if any network still trains."""
        _check_frozen(self.posture, "posture model")
        _check_frozen(self.classifier, "classifier")
        _check_frozen(self.dual_encoder, "dual encoder")

    def modules(self) -> Dict[str, nn.Module]:
        return {"posture": self.posture, "classifier": self.classifier, "dual_encoder": self.dual_encoder}


def score_pairs(
    images: torch.Tensor,
    anchor_images: torch.Tensor,
    reports: Sequence[str],
    labels: Sequence[Sequence[int]],
    models: RewardModels,
    weights: RewardWeights,
    comparative: bool = True,
    soft_accuracy: bool = False,
) -> List[RewardBreakdown]:
    """Reward breakdown for every (x, x_anchor, report) triple of a batch.

    Policy and anchor images pass through each network as separate batches of
    the same size, so identical images get bit-identical scores.
    """
    models.check_frozen()
    images = as_image_batch(images)
    anchor_images = as_image_batch(anchor_images)
    if images.shape != anchor_images.shape or len(reports) != images.shape[0] or len(labels) != images.shape[0]:
        raise ShapeMismatchError("reward batch", tuple(images.shape), tuple(anchor_images.shape))
    psis = estimate_postures(models.posture, images)
    probs = _class_probabilities(models.classifier, images)
    text = _report_embeddings(models.dual_encoder, reports)
    sims = (_image_embeddings(models.dual_encoder, images) * text).sum(dim=1).numpy()
    if comparative:
        anchor_probs = _class_probabilities(models.classifier, anchor_images)
        anchor_sims = (_image_embeddings(models.dual_encoder, anchor_images) * text).sum(dim=1).numpy()

    breakdowns = []
    for i, psi in enumerate(psis):
        r_diag = accuracy(probs[i], labels[i], soft_accuracy)
        r_consist = float(sims[i])
        if comparative:
            r_diag -= accuracy(anchor_probs[i], labels[i], soft_accuracy)
            r_consist -= float(anchor_sims[i])
        breakdowns.append(
            RewardBreakdown(r_align=reward_align(psi), r_diag=r_diag, r_consist=r_consist, weights=weights)
        )
    return breakdowns


def total_reward(
    x,
    x_anchor,
    report: str,
    labels: Sequence[int],
    models: RewardModels,
    weights: Optional[RewardWeights] = None,
    comparative: bool = True,
    soft_accuracy: bool = False,
) -> RewardBreakdown:
    """Weighted reward of one pair; psi is estimated on x."""
    return score_pairs(
        as_image_batch([np.asarray(x)]),
        as_image_batch([np.asarray(x_anchor)]),
        [report],
        [labels],
        models,
        weights or RewardWeights(),
        comparative,
        soft_accuracy,
    )[0]


# ---------------------------------------------------------------------------
# Held-out evaluation
# ---------------------------------------------------------------------------


def evaluate_posture(model: PostureModel, images: torch.Tensor, psis: Sequence[PostureParams], image_size: int = 32) -> PostureFitReport:
    """Held-out posture errors plus the error on a canonical, finding-free phantom."""
    estimates = estimate_postures(model, images)
    est = np.array([p.as_vector() for p in estimates])
    true = np.array([p.as_vector() for p in psis])
    err = np.abs(est - true)
    identity = estimate_posture(model, render_canonical(PhantomAttrs(), image_size))
    identity_error = float(np.max(np.abs(np.array(identity.as_vector()) - np.array(PostureParams().as_vector()))))
    return PostureFitReport(
        translation_mae=float(err[:, 2:4].mean()),
        rotation_mae=float(err[:, 4].mean()),
        scale_mae=float(err[:, :2].mean()),
        identity_error=identity_error,
        n_samples=len(psis),
    )


def evaluate_classifier(model: ClassifierModel, images: torch.Tensor, labels: Sequence[Sequence[int]]) -> ClassifierFitReport:
    """Held-out per-class and macro AUROC."""
    from .evalkit import per_class_auroc  # evalkit imports this module

    probs = _class_probabilities(model, images)
    per_class = per_class_auroc(probs, np.asarray(labels))
    defined = [v for v in per_class.values() if math.isfinite(v)]
    return ClassifierFitReport(
        per_class_auroc=per_class,
        macro_auroc=float(np.mean(defined)) if defined else float("nan"),
        n_samples=len(labels),
    )


def attribute_key(attrs: PhantomAttrs) -> Tuple:
    """Attributes a report can state; images sharing them count as the same retrieval target."""
    return (attrs.effusion, attrs.cardiomegaly, attrs.opacity, attrs.opacity_side, attrs.opacity_size, attrs.device)


def evaluate_dual_encoder(
    model: DualEncoder,
    images: torch.Tensor,
    reports: Sequence[str],
    attrs: Sequence[PhantomAttrs],
    stream: RngStream,
    candidates: int = RETRIEVAL_CANDIDATES,
) -> DualEncoderFitReport:
    """Report-to-image top-1 retrieval in groups of 32 and own-report preference.

    A retrieval is correct when the retrieved image has the same reportable
    attributes as the query's own image. The mismatched report for the
    preference check comes from an image with different attributes.
    """
    n = len(reports)
    order = stream.permutation(n)
    img = _image_embeddings(model, as_image_batch(images))
    txt = _report_embeddings(model, reports)
    keys = [attribute_key(a) for a in attrs]

    hits, queries = 0, 0
    for start in range(0, n - candidates + 1, candidates):
        group = order[start : start + candidates]
        sims = txt[group] @ img[group].T
        best = sims.argmax(dim=1).numpy()
        for row, i in enumerate(group):
            hits += keys[group[best[row]]] == keys[i]
            queries += 1

    preferred, compared = 0, 0
    for pos, i in enumerate(order):
        for step in range(1, n):
            j = order[(pos + step) % n]
            if keys[j] != keys[i]:
                break
        else:
            continue
        preferred += float(img[i] @ txt[i]) > float(img[i] @ txt[j])
        compared += 1

    return DualEncoderFitReport(
        top1_retrieval=hits / queries if queries else 0.0,
        own_report_preference=preferred / compared if compared else 0.0,
        n_samples=n,
    )


def summarize_reports(models: RewardModels) -> List[Tuple[str, str, bool]]:
    """(model, headline metric, passed) rows for display."""
    rows = []
    for name, report in models.reports.items():
        metrics = ", ".join(f"{k}={v:.4f}" for k, v in report.items() if isinstance(v, float))
        rows.append((name, metrics, bool(report.get("passed", False))))
    return rows
