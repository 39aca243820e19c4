"""Evaluation metrics: reward-aligned means, AUROC, Fréchet feature distance and SSIM diversity."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg, stats
from scipy.stats import rankdata

from .config import Config
from .constants import ABLATION_ROWS, FINDING_NAMES, VARIANT_ROWS
from .diffusion import DiffusionSchedule, PretrainedGenerator, make_schedule
from .models import MetricReport
from .numcore import as_image_batch, rng_stream
from .phantom import PhantomSample, images_of
from .rewards import ClassifierModel, RewardModels, estimate_postures, reward_align
from .rlcf import build_policy, finetune
from .textcond import tokenize
from .utils import sha256_hex, write_csv

logger = logging.getLogger(__name__)

SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DEFAULT_SSIM_PAIRS = 1000
SSIM_PAIR_LABEL = "eval/ssim"


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC with average ranks for ties.

    Raises:
        ValueError: If labels contain a single class
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def per_class_auroc(probabilities: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    """AUROC per finding; NaN where a class has a single label value."""
    result = {}
    for k, name in enumerate(FINDING_NAMES):
        try:
            result[name] = auroc(probabilities[:, k], labels[:, k])
        except ValueError:
            logger.warning(f"AUROC undefined for '{name}': only one label value present")
            result[name] = float("nan")
    return result


def _macro(per_class: Dict[str, float]) -> float:
    defined = [v for v in per_class.values() if math.isfinite(v)]
    return float(np.mean(defined)) if defined else float("nan")


def classifier_features(classifier: ClassifierModel, images) -> np.ndarray:
    """Penultimate classifier activations, (n, 16) float64."""
    with torch.no_grad():
        return classifier.features(as_image_batch(images)).to(torch.float64).numpy()


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_feature_distance(set_a, set_b, classifier: Optional[ClassifierModel] = None) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    ``set_a`` and ``set_b`` are feature matrices, or images when a classifier
    is given. The trace of the matrix square root comes from the
    eigenvalues of the symmetrised product S_a^(1/2) S_b S_a^(1/2), with
    negative eigenvalues clipped at zero.

    Raises:
        ValueError: If a set is not larger than the feature dimension or the result is not finite
    """
    if classifier is not None:
        set_a = classifier_features(classifier, set_a)
        set_b = classifier_features(classifier, set_b)
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    dim = a.shape[1]
    if a.shape[0] <= dim or b.shape[0] <= dim:
        raise ValueError(f"each set needs more than {dim} samples, got {a.shape[0]} and {b.shape[0]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a, cov_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)

    root_a = _sqrt_psd(cov_a)
    product = root_a @ cov_b @ root_a
    product = 0.5 * (product + product.T)
    values = linalg.eigvalsh(product)
    if values.min() < -1e-8 * max(1.0, abs(values.max())):
        logger.warning(f"Clipping negative eigenvalue {values.min():.3e} in Fréchet distance")
    tr_covmean = float(np.sqrt(np.clip(values, 0.0, None)).sum())

    distance = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_covmean)
    if not math.isfinite(distance):
        raise ValueError("degenerate covariance in Fréchet distance")
    return max(distance, 0.0)


def ssim(image_a, image_b) -> float:
    """Mean SSIM over 8x8 windows with the standard constants for [0, 1] images."""
    x = as_image_batch([np.asarray(image_a)]).to(torch.float64)
    y = as_image_batch([np.asarray(image_b)]).to(torch.float64)
    mu_x = F.avg_pool2d(x, SSIM_WINDOW, stride=1)
    mu_y = F.avg_pool2d(y, SSIM_WINDOW, stride=1)
    var_x = F.avg_pool2d(x * x, SSIM_WINDOW, stride=1) - mu_x**2
    var_y = F.avg_pool2d(y * y, SSIM_WINDOW, stride=1) - mu_y**2
    cov = F.avg_pool2d(x * y, SSIM_WINDOW, stride=1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float((num / den).mean())


def _canonical_order(images: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Images sorted by the digest of their float64 bytes."""
    arrays = [np.asarray(image, dtype=np.float64) for image in images]
    return sorted(arrays, key=lambda a: sha256_hex(a.tobytes(), 64))


def ssim_diversity(images: Sequence[np.ndarray], n_pairs: int = DEFAULT_SSIM_PAIRS, seed: int = 0) -> float:
    """Mean SSIM over random distinct pairs; lower means more diverse.

    Images are put in a canonical order before pairs are drawn from a stream
    keyed only by ``seed``, so the value does not depend on the set's order.
    When ``n_pairs`` covers every distinct pair, all pairs are used.

    Raises:
        ValueError: If fewer than two images are given
    """
    n = len(images)
    if n < 2:
        raise ValueError("ssim_diversity needs at least two images")
    images = _canonical_order(images)
    if n * (n - 1) // 2 <= n_pairs:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        stream = rng_stream(seed, SSIM_PAIR_LABEL)
        first = stream.integers(0, n, (n_pairs,))
        second = stream.integers(0, n - 1, (n_pairs,))
        second = second + (second >= first)
        pairs = list(zip(first.tolist(), second.tolist()))
    return float(np.mean([ssim(images[i], images[j]) for i, j in pairs]))


def mean_reward_metrics(
    images,
    reports: Sequence[str],
    labels: Sequence[Sequence[int]],
    models: RewardModels,
) -> Tuple[float, float, float]:
    """(mean r_align, macro AUROC, mean image/own-report cosine similarity).

    Raises:
        ValueError: If the set is empty
    """
    mean_align, per_class, similarity = _reward_metrics(images, reports, labels, models)
    return mean_align, _macro(per_class), similarity


def _reward_metrics(images, reports, labels, models: RewardModels) -> Tuple[float, Dict[str, float], float]:
    if len(reports) == 0:
        raise ValueError("mean_reward_metrics needs a nonempty set")
    batch = as_image_batch(images)
    mean_align = float(np.mean([reward_align(p) for p in estimate_postures(models.posture, batch)]))
    with torch.no_grad():
        probs = models.classifier.probabilities(batch).to(torch.float64).numpy()
        img = models.dual_encoder.encode_images(batch).to(torch.float64)
        txt = models.dual_encoder.encode_reports(reports).to(torch.float64)
    per_class = per_class_auroc(probs, np.asarray(labels))
    similarity = float((img * txt).sum(dim=1).mean())
    return mean_align, per_class, similarity


def generate_images(
    model,
    token_lists: Sequence[Sequence[int]],
    sched: DiffusionSchedule,
    seed: int,
    batch_size: int = 64,
    label: str = "eval",
) -> np.ndarray:
    """Clamped x_0 for every report; report i always uses stream ``<label>/<i>``.

    ``model`` is a PolicyModel or AnchorModel; both expose ``sample``.
    """
    images = []
    for start in range(0, len(token_lists), batch_size):
        chunk = token_lists[start : start + batch_size]
        streams = [rng_stream(seed, f"{label}/{start + i}") for i in range(len(chunk))]
        traj = model.sample(chunk, sched, streams)
        images.append(traj.final_images()[:, 0].to(torch.float64).numpy())
    return np.concatenate(images).astype(np.float32)


def evaluate_generator(
    name: str,
    images: np.ndarray,
    reports: Sequence[str],
    labels: Sequence[Sequence[int]],
    reference: np.ndarray,
    models: RewardModels,
    seed: int,
    n_pairs: int,
    dataset_hash: str,
    config_hash: str,
) -> MetricReport:
    """Full metric row for one generated set against the real reference images."""
    mean_align, per_class, similarity = _reward_metrics(images, reports, labels, models)
    try:
        distance = frechet_feature_distance(images, reference, models.classifier)
    except ValueError as e:
        logger.warning(f"{name}: Fréchet distance undefined ({e})")
        distance = float("nan")
    report = MetricReport(
        name=name,
        mean_r_align=mean_align,
        per_class_auroc=per_class,
        macro_auroc=_macro(per_class),
        mean_similarity=similarity,
        frechet_distance=distance,
        ssim_diversity=ssim_diversity(list(images), n_pairs, seed),
        n_samples=len(reports),
        n_reference=len(reference),
        dataset_hash=dataset_hash,
        config_hash=config_hash,
    )
    logger.info(
        f"{name}: r_align {report.mean_r_align:.4f}, AUROC {report.macro_auroc:.4f}, "
        f"similarity {report.mean_similarity:.4f}, FD {report.frechet_distance:.4f}, SSIM {report.ssim_diversity:.4f}"
    )
    return report


def metrics_rows(reports: Sequence[MetricReport]) -> Tuple[List[str], List[List[str]]]:
    """Header and rows for metrics.csv / ablation.csv."""
    if not reports:
        raise ValueError("no metric reports to write")
    return reports[0].csv_header(), [r.csv_row() for r in reports]


def write_metrics_csv(path, reports: Sequence[MetricReport]):
    """Write one row per MetricReport."""
    header, rows = metrics_rows(reports)
    return write_csv(path, header, rows)


def one_sided_improvement(differences: Sequence[float]) -> float:
    """p-value of a one-sample t-test that the mean difference is greater than 0."""
    diffs = np.asarray(differences, dtype=np.float64)
    if diffs.size < 2 or np.all(diffs == diffs[0]):
        return 0.0 if diffs.size and diffs[0] > 0 else 1.0
    return float(stats.ttest_1samp(diffs, 0.0, alternative="greater").pvalue)


@dataclass
class ReportSet:
    """Reports with their token ids and label vectors."""

    reports: List[str]
    tokens: List[List[int]]
    labels: List[List[int]]

    @classmethod
    def from_samples(cls, samples: Sequence[PhantomSample], m_max: int, limit: Optional[int] = None) -> "ReportSet":
        chosen = list(samples)[:limit] if limit else list(samples)
        return cls(
            reports=[s.report for s in chosen],
            tokens=[tokenize(s.report, m_max) for s in chosen],
            labels=[list(s.labels) for s in chosen],
        )


def ablation_configs(cfg: Config, variants: bool = False) -> List[Tuple[str, Config]]:
    """(row name, config) pairs that differ from ``cfg`` only in the switched setting."""
    base = {"lambda_align": cfg.lambda_align, "lambda_diag": cfg.lambda_diag, "lambda_consist": cfg.lambda_consist}
    masks = {
        "anchor": (0.0, 0.0, 0.0),
        "+r_align": (base["lambda_align"], 0.0, 0.0),
        "+r_diag": (0.0, base["lambda_diag"], 0.0),
        "+r_consist": (0.0, 0.0, base["lambda_consist"]),
        "combined": (base["lambda_align"], base["lambda_diag"], base["lambda_consist"]),
    }
    rows = []
    for name in ABLATION_ROWS:
        align, diag, consist = masks[name]
        rows.append((name, cfg.model_copy(update={"lambda_align": align, "lambda_diag": diag, "lambda_consist": consist})))
    if variants:
        overrides = {"w/o ACE": {"n_ace": 0}, "w/o comparative": {"comparative": False}}
        rows.extend((name, cfg.model_copy(update=overrides[name])) for name in VARIANT_ROWS)
    return rows


def ablation_run(
    cfg: Config,
    generator: PretrainedGenerator,
    models: RewardModels,
    train: Sequence[PhantomSample],
    test: Sequence[PhantomSample],
    dataset_hash: str,
    variants: bool = False,
) -> List[MetricReport]:
    """Fine-tune once per reward mask from the same pretrained generator and evaluate each.

    The anchor row evaluates the frozen pretrained generator. Every other row
    starts from identical initial weights, seeds and data.
    """
    sched = make_schedule(cfg.T, *cfg.betas())
    train_set = ReportSet.from_samples(train, cfg.m_max)
    eval_set = ReportSet.from_samples(test, cfg.m_max, cfg.eval_reports)
    reference = images_of(test)

    reports = []
    for name, row_cfg in ablation_configs(cfg, variants):
        logger.info(f"Ablation row '{name}' ({row_cfg.config_hash()})")
        policy, anchor = build_policy(generator, row_cfg.n_ace, row_cfg.seed)
        if name == "anchor":
            model = anchor
        else:
            finetune(
                policy,
                anchor,
                models,
                train_set.reports,
                train_set.tokens,
                train_set.labels,
                sched,
                row_cfg.rl_config(),
                row_cfg.seed,
            )
            model = policy
        images = generate_images(model, eval_set.tokens, sched, row_cfg.seed)
        reports.append(
            evaluate_generator(
                name,
                images,
                eval_set.reports,
                eval_set.labels,
                reference,
                models,
                row_cfg.seed,
                row_cfg.ssim_pairs,
                dataset_hash,
                row_cfg.config_hash(),
            )
        )
    return reports
