"""Procedural chest phantoms with known posture, template reports and labels.

Images are float32 arrays of shape (H, W) with values in [0, 1]. The layout
follows radiological convention: the patient's left appears on the image
right.
"""

import json
import logging
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from scipy.special import expit

from .constants import (
    DATASET_VERSION,
    FINDING_KEYWORDS,
    MANIFEST_NAME,
    META_NAME,
    NEGATION,
    SENTENCE_END,
    K_LABELS,
    Finding,
    PostureRange,
)
from .exceptions import DatasetError
from .models import DatasetManifest, PhantomAttrs, PostureParams
from .numcore import RngStream, rng_stream
from .utils import atomic_write_text, image_to_bytes, read_pgm, sha256_hex, write_pgm

logger = logging.getLogger(__name__)

DEFAULT_IMAGE_SIZE = 32
DEFAULT_CANONICAL_K = 500

# Probability of each finding being present.
FINDING_RATES = {"effusion": 0.3, "cardiomegaly": 0.3, "opacity": 0.35, "device": 0.25}
NEGATIVE_MENTION_RATE = 0.5

POSITIVE_TEMPLATES = {
    Finding.EFFUSION: ("effusion is present .", "effusion is seen .", "effusion present ."),
    Finding.CARDIOMEGALY: (
        "cardiomegaly is present .",
        "the heart is enlarged .",
        "cardiomegaly present .",
        "heart enlarged .",
    ),
    Finding.OPACITY: (
        "a {size} opacity in the {side} lung .",
        "a {size} round opacity is seen in the {side} lung .",
        "{size} opacity in the {side} lung .",
    ),
    Finding.DEVICE: ("a support device is present .", "support device is seen .", "device present ."),
}

NEGATIVE_TEMPLATES = {
    Finding.EFFUSION: "no effusion .",
    Finding.CARDIOMEGALY: "no cardiomegaly .",
    Finding.OPACITY: "no opacity .",
    Finding.DEVICE: "no device .",
}

NORMAL_REPORT = "lungs clear ."


class PhantomSample(BaseModel):
    """One rendered phantom with its ground truth."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    index: int = Field(..., ge=0, description="Index within its split")
    split: str = Field(..., description="train or test")
    image: np.ndarray = Field(..., description="H x W float32 image in [0, 1]")
    attrs: PhantomAttrs
    psi_true: PostureParams
    report: str
    stream_label: str = Field(..., description="RNG stream the sample was drawn from")

    @property
    def labels(self) -> List[int]:
        """Label vector derived from the attributes."""
        return self.attrs.labels

    def meta(self) -> dict:
        """Metadata line for meta.jsonl."""
        return {
            "index": self.index,
            "attrs": self.attrs.model_dump(exclude={"labels", "findings"}),
            "psi_true": self.psi_true.model_dump(),
            "report": self.report,
            "labels": self.labels,
        }


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray, float]:
    centre = (size - 1) / 2.0
    coords = (np.arange(size, dtype=np.float64) - centre) / (size / 2.0)
    v, u = np.meshgrid(coords, coords, indexing="ij")
    return u, v, 2.0 / size


def _soft_ellipse(u, v, cu, cv, ru, rv, pixel) -> np.ndarray:
    radius = np.sqrt(((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2)
    inside = (1.0 - radius) * min(ru, rv)
    return expit(inside / (0.5 * pixel))


def _segment_distance(u, v, a, b) -> np.ndarray:
    (ax, ay), (bx, by) = a, b
    dx, dy = bx - ax, by - ay
    t = np.clip(((u - ax) * dx + (v - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(u - (ax + t * dx), v - (ay + t * dy))


def render_canonical(attrs: PhantomAttrs, size: int = DEFAULT_IMAGE_SIZE, offsets: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
    """Render the phantom in canonical pose.

    Args:
        attrs: Findings and anatomy jitter
        size: Image edge length
        offsets: Small (u, v) offset of the opacity centre

    Returns:
        (size, size) float array in [0, 1]
    """
    u, v, px = _grid(size)
    j_width, j_height, j_heart, j_diaphragm = attrs.jitter

    image = 0.55 * _soft_ellipse(u, v, 0.0, 0.05, 0.8, 0.86, px)

    lung_w = 0.26 * (1.0 + 0.06 * j_width)
    lung_h = 0.5 * (1.0 + 0.06 * j_height)
    lungs = np.zeros_like(u)
    diaphragm = np.zeros_like(u)
    for side in (-1.0, 1.0):
        cu = 0.36 * side
        arc = 0.36 + 0.04 * j_diaphragm + 0.9 * (u - cu) ** 2
        below = expit((v - arc) / (0.5 * px))
        lungs = np.maximum(lungs, _soft_ellipse(u, v, cu, -0.08, lung_w, lung_h, px) * (1.0 - below))
        band = np.exp(-((v - arc) ** 2) / (2 * (0.6 * px) ** 2)) * (np.abs(u - cu) < lung_w)
        diaphragm = np.maximum(diaphragm, band)
    image -= 0.35 * lungs
    image += 0.15 * diaphragm

    mediastinum = expit((0.1 - np.abs(u)) / (0.5 * px)) * expit((0.3 - v) / (0.5 * px)) * expit((v + 0.7) / (0.5 * px))
    image += 0.22 * mediastinum

    heart_r = (0.34, 0.24) if attrs.cardiomegaly else (0.2, 0.15)
    image += 0.22 * _soft_ellipse(u, v, 0.08 + 0.04 * j_heart, 0.28, heart_r[0], heart_r[1], px)

    if attrs.effusion:
        gradient = np.clip((v - 0.0) / 0.35, 0.0, 1.0)
        image += 0.3 * gradient * lungs

    if attrs.opacity:
        side = 1.0 if attrs.opacity_side == "left" else -1.0
        radius = 0.09 if attrs.opacity_size == "small" else 0.17
        cu, cv = 0.36 * side + offsets[0], -0.15 + offsets[1]
        blob = np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * radius**2))
        image += 0.35 * blob * np.maximum(lungs, 0.3)

    if attrs.device:
        points = [(0.6, -0.72), (0.18, -0.35), (0.12, 0.22)]
        distance = np.min([_segment_distance(u, v, a, b) for a, b in zip(points, points[1:])], axis=0)
        wire = expit((0.5 * px - distance) / (0.3 * px))
        image = np.maximum(image, 0.95 * wire)

    return np.clip(image, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Posture
# ---------------------------------------------------------------------------


def affine_matrix(psi: PostureParams, shape: Tuple[int, int]) -> np.ndarray:
    """Forward 3x3 map in (x, y) pixel coordinates: scale about the centre, rotate, translate."""
    height, width = shape
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    cos_t, sin_t = np.cos(psi.theta), np.sin(psi.theta)
    centre = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    uncentre = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    scale = np.diag([psi.s_x, psi.s_y, 1.0])
    rotate = np.array([[cos_t, -sin_t, 0.0], [sin_t, cos_t, 0.0], [0.0, 0.0, 1.0]])
    translate = np.array([[1.0, 0.0, psi.t_x * width], [0.0, 1.0, psi.t_y * height], [0.0, 0.0, 1.0]])
    return translate @ centre @ rotate @ scale @ uncentre


def warp(image: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Bilinear resampling of ``image`` under a forward (x, y) map; out-of-frame pixels are 0."""
    inverse = np.linalg.inv(forward)
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    matrix = swap @ inverse[:2, :2] @ swap
    offset = swap @ inverse[:2, 2]
    out = ndimage.affine_transform(
        np.asarray(image, dtype=np.float64), matrix, offset=offset, order=1, mode="constant", cval=0.0
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_affine(image: np.ndarray, psi: PostureParams) -> np.ndarray:
    """Apply the posture ``psi`` to an image.

    Raises:
        ValueError: If psi has a non-finite field or the image leaves [0, 1]
    """
    if not psi.is_finite():
        raise ValueError(f"non-finite posture {psi}")
    image = np.asarray(image)
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("apply_affine expects an image in [0, 1]")
    return warp(image, affine_matrix(psi, image.shape))


def sample_posture(stream: RngStream) -> PostureParams:
    """Draw a posture inside the documented sampling ranges."""
    lo, hi = PostureRange.SCALE
    s_x, s_y = stream.uniform((2,), lo, hi)
    t_x, t_y = stream.uniform((2,), -PostureRange.TRANSLATION, PostureRange.TRANSLATION)
    theta = float(stream.uniform((), -PostureRange.ROTATION, PostureRange.ROTATION))
    return PostureParams(s_x=float(s_x), s_y=float(s_y), t_x=float(t_x), t_y=float(t_y), theta=theta)


# ---------------------------------------------------------------------------
# Attributes and reports
# ---------------------------------------------------------------------------


def sample_attrs(stream: RngStream) -> PhantomAttrs:
    """Draw findings and jitter."""
    draws = stream.uniform((7,))
    opacity = bool(draws[2] < FINDING_RATES["opacity"])
    return PhantomAttrs(
        effusion=bool(draws[0] < FINDING_RATES["effusion"]),
        cardiomegaly=bool(draws[1] < FINDING_RATES["cardiomegaly"]),
        opacity=opacity,
        opacity_side=("left" if draws[4] < 0.5 else "right") if opacity else None,
        opacity_size=("small" if draws[5] < 0.5 else "large") if opacity else None,
        device=bool(draws[3] < FINDING_RATES["device"]),
        jitter=tuple(float(x) for x in stream.uniform((4,), -1.0, 1.0)),
    )


def labels_from_attrs(attrs: PhantomAttrs) -> List[int]:
    """K-bit label vector of the attributes."""
    return list(attrs.labels)


def make_report(attrs: PhantomAttrs, stream: RngStream) -> str:
    """Template report with synonym choice, optional negative mentions and shuffled order."""
    positives = dict(zip(Finding, attrs.labels))
    sentences: List[str] = []
    for finding in Finding:
        choice = stream.uniform(())
        if positives[finding]:
            templates = POSITIVE_TEMPLATES[finding]
            template = templates[int(choice * len(templates)) % len(templates)]
            sentences.append(template.format(size=attrs.opacity_size, side=attrs.opacity_side))
        elif choice < NEGATIVE_MENTION_RATE:
            sentences.append(NEGATIVE_TEMPLATES[finding])
    if not sentences:
        sentences.append(NORMAL_REPORT)
    order = stream.permutation(len(sentences))
    return " ".join(sentences[i] for i in order)


def labels_from_report(report: str) -> List[int]:
    """Recover labels by keyword matching on non-negated sentences."""
    labels = [0] * K_LABELS
    sentence: List[str] = []
    for word in report.lower().split() + [SENTENCE_END]:
        if word != SENTENCE_END:
            sentence.append(word)
            continue
        if NEGATION not in sentence:
            for finding, keywords in FINDING_KEYWORDS.items():
                if any(k in sentence for k in keywords):
                    labels[finding] = 1
        sentence = []
    return labels


# ---------------------------------------------------------------------------
# Samples and datasets
# ---------------------------------------------------------------------------


def generate_sample(
    stream: RngStream, image_size: int = DEFAULT_IMAGE_SIZE, index: int = 0, split: str = "train"
) -> PhantomSample:
    """Render one phantom from its own stream.

    Args:
        stream: Stream owned by this sample
        image_size: Image edge length
        index: Index recorded on the sample
        split: Split name recorded on the sample

    Returns:
        PhantomSample with image, attributes, posture, report and labels
    """
    attrs = sample_attrs(stream.child("attrs"))
    offsets = tuple(float(x) for x in stream.child("opacity").uniform((2,), -0.05, 0.05))
    psi = sample_posture(stream.child("posture"))
    canonical = render_canonical(attrs, image_size, offsets)
    report = make_report(attrs, stream.child("report"))
    return PhantomSample(
        index=index,
        split=split,
        image=apply_affine(canonical, psi),
        attrs=attrs,
        psi_true=psi,
        report=report,
        stream_label=stream.label,
    )


def canonical_mean(images: Sequence[np.ndarray], k: int = DEFAULT_CANONICAL_K) -> np.ndarray:
    """Pixel-wise mean of the first k images.

    Raises:
        ValueError: If there are no images or k is out of range
    """
    if len(images) == 0:
        raise ValueError("canonical_mean needs at least one image")
    if not 1 <= k <= len(images):
        raise ValueError(f"k must be in [1, {len(images)}], got {k}")
    stack = np.stack([np.asarray(img, dtype=np.float64) for img in images[:k]])
    return np.clip(stack.mean(axis=0), 0.0, 1.0).astype(np.float32)


def registration_error(image: np.ndarray, psi_hat: PostureParams, canonical: np.ndarray) -> float:
    """Mean squared difference between the posture-normalised image and the canonical mean."""
    forward = affine_matrix(psi_hat, np.asarray(image).shape)
    normalised = warp(image, np.linalg.inv(forward))
    return float(np.mean((normalised.astype(np.float64) - canonical.astype(np.float64)) ** 2))


def sample_stream_label(split: str, index: int) -> str:
    """Stream label owned by one dataset sample."""
    return f"phantom/{split}/{index}"


def _split_samples(seed: int, split: str, count: int, image_size: int) -> List[PhantomSample]:
    return [
        generate_sample(rng_stream(seed, sample_stream_label(split, i)), image_size, i, split)
        for i in range(count)
    ]


def dataset_hash(train: Sequence[PhantomSample], test: Sequence[PhantomSample]) -> str:
    """Hash of the dumped bytes (PGM images and metadata lines) of both splits."""
    parts = []
    for sample in list(train) + list(test):
        parts.append(sample.split.encode("utf-8"))
        parts.append(image_to_bytes(sample.image))
        parts.append(json.dumps(sample.meta(), sort_keys=True).encode("utf-8"))
    return sha256_hex(b"\x00".join(parts))


def make_dataset(
    master_seed: int,
    n_train: int = 5000,
    n_test: int = 1000,
    image_size: int = DEFAULT_IMAGE_SIZE,
    config_hash: str = "",
) -> Tuple[List[PhantomSample], List[PhantomSample], DatasetManifest]:
    """Build train/test splits from per-index streams.

    Raises:
        ValueError: If a count is below 1
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be at least 1")
    logger.info(f"Generating {n_train} train and {n_test} test phantoms (seed {master_seed})")
    train = _split_samples(master_seed, "train", n_train, image_size)
    test = _split_samples(master_seed, "test", n_test, image_size)
    manifest = DatasetManifest(
        seed=master_seed,
        n_train=n_train,
        n_test=n_test,
        image_size=image_size,
        version=DATASET_VERSION,
        config_hash=config_hash,
        dataset_hash=dataset_hash(train, test),
    )
    return train, test, manifest


def write_dataset(
    directory: Path, train: Sequence[PhantomSample], test: Sequence[PhantomSample], manifest: DatasetManifest
) -> Path:
    """Dump `<split>/<index>.pgm`, `<split>/meta.jsonl` and `manifest.txt`."""
    directory = Path(directory)
    for split, samples in (("train", train), ("test", test)):
        lines = []
        for sample in samples:
            write_pgm(directory / split / f"{sample.index}.pgm", sample.image)
            lines.append(json.dumps(sample.meta(), sort_keys=True))
        atomic_write_text(directory / split / META_NAME, "\n".join(lines) + "\n")
    atomic_write_text(directory / MANIFEST_NAME, manifest.to_text())
    logger.info(f"Dataset written to {directory} (hash {manifest.dataset_hash})")
    return directory


def load_dataset(directory: Path, verify: bool = True) -> Tuple[List[PhantomSample], List[PhantomSample], DatasetManifest]:
    """Read a dataset written by `write_dataset`.

    Raises:
        DatasetError: If files are missing or the content hash does not match the manifest
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"No dataset manifest at {manifest_path}. Run phantom-gen first.")
    manifest = DatasetManifest.from_text(manifest_path.read_text(encoding="utf-8"))
    splits = {}
    for split in ("train", "test"):
        meta_path = directory / split / META_NAME
        if not meta_path.exists():
            raise DatasetError(f"Missing {meta_path}")
        samples = []
        for line in meta_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            meta = json.loads(line)
            samples.append(
                PhantomSample(
                    index=meta["index"],
                    split=split,
                    image=read_pgm(directory / split / f"{meta['index']}.pgm"),
                    attrs=PhantomAttrs(**meta["attrs"]),
                    psi_true=PostureParams(**meta["psi_true"]),
                    report=meta["report"],
                    stream_label=sample_stream_label(split, meta["index"]),
                )
            )
        splits[split] = samples
    if verify:
        actual = dataset_hash(splits["train"], splits["test"])
        if actual != manifest.dataset_hash:
            raise DatasetError(f"Dataset hash {actual} does not match manifest {manifest.dataset_hash}")
    return splits["train"], splits["test"], manifest


def images_of(samples: Sequence[PhantomSample]) -> np.ndarray:
    """Stack sample images into an (n, H, W) float32 array."""
    return np.stack([s.image for s in samples]).astype(np.float32)
