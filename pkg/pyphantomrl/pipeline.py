"""Pipeline stages behind the CLI subcommands.

Each stage reads its inputs from the output directory, does its work and
writes its artifacts back atomically::

    <output_dir>/
        dataset/               phantom-gen
        checkpoints/           pretrain, fit-rewards, finetune
        logs/finetune.csv      finetune
        samples/               sample
        scores.csv             score
        metrics.csv            eval
        ablation.csv           ablate
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config
from .constants import SCORE_COLUMNS
from .diffusion import PretrainedGenerator, build_generator, make_schedule, pretrain_generator
from .evalkit import (
    ReportSet,
    ablation_run,
    evaluate_generator,
    generate_images,
    one_sided_improvement,
    write_metrics_csv,
)
from .exceptions import DatasetError, DatasetMismatchError
from .models import DatasetManifest, MetricReport, PostureParams, RewardBreakdown, StepStats
from .numcore import AdamOptimizer, ParamStore, as_image_batch, rng_stream, seeded
from .phantom import (
    PhantomSample,
    canonical_mean,
    images_of,
    load_dataset,
    make_dataset,
    registration_error,
    write_dataset,
)
from .rewards import (
    ClassifierModel,
    DualEncoder,
    PostureModel,
    RewardModels,
    estimate_postures,
    evaluate_classifier,
    evaluate_dual_encoder,
    evaluate_posture,
    fit_classifier,
    fit_dual_encoder,
    fit_posture,
    freeze,
    score_pairs,
)
from .rlcf import AnchorModel, PolicyModel, TrainingLog, build_policy, finetune
from .textcond import tokenize
from .utils import write_csv, write_pgm

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunPaths:
    """Artifact locations inside one output directory."""

    root: Path

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def generator(self) -> Path:
        return self.root / "checkpoints" / "generator.cxrl"

    @property
    def rewards(self) -> Path:
        return self.root / "checkpoints" / "rewards.cxrl"

    @property
    def policy(self) -> Path:
        return self.root / "checkpoints" / "policy.cxrl"

    @property
    def training_log(self) -> Path:
        return self.root / "logs" / "finetune.csv"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @property
    def scores(self) -> Path:
        return self.root / "scores.csv"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def ablation(self) -> Path:
        return self.root / "ablation.csv"


def paths_for(cfg: Config) -> RunPaths:
    return RunPaths(cfg.output_path)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


def generate_dataset(cfg: Config) -> DatasetManifest:
    """Render and dump the phantom dataset."""
    train, test, manifest = make_dataset(cfg.seed, cfg.n_train, cfg.n_test, cfg.image_size, cfg.config_hash())
    write_dataset(paths_for(cfg).dataset, train, test, manifest)
    return manifest


def open_dataset(cfg: Config) -> Tuple[List[PhantomSample], List[PhantomSample], DatasetManifest]:
    """Load the dumped dataset of this run."""
    train, test, manifest = load_dataset(paths_for(cfg).dataset)
    if manifest.image_size != cfg.image_size:
        raise DatasetError(
            f"Dataset image size {manifest.image_size} does not match configured image_size {cfg.image_size}"
        )
    return train, test, manifest


def _require(path: Path, stage: str) -> None:
    if not path.exists():
        raise DatasetError(f"Missing {path}. Run `{stage}` first.")


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


def run_pretrain(cfg: Config, on_step: Optional[Callable[[int, float], None]] = None) -> PretrainedGenerator:
    """Pretrain denoiser and report encoder and save ``generator.cxrl``."""
    train, _, manifest = open_dataset(cfg)
    reports = ReportSet.from_samples(train, cfg.m_max)
    generator = pretrain_generator(
        as_image_batch(images_of(train)),
        reports.tokens,
        make_schedule(cfg.T, *cfg.betas()),
        rng_stream(cfg.seed, "pretrain"),
        steps=cfg.pretrain_steps,
        batch_size=cfg.pretrain_batch,
        lr=cfg.pretrain_lr,
        d_model=cfg.d_model,
        d_tau=cfg.d_tau,
        m_max=cfg.m_max,
        on_step=on_step,
    )
    final_loss = generator.losses[-1] if generator.losses else None
    save_checkpoint(
        paths_for(cfg).generator,
        {"generator": generator.store()},
        cfg,
        meta={"kind": "generator", "dataset_hash": manifest.dataset_hash, "final_loss": final_loss},
    )
    return generator


def load_generator(cfg: Config) -> Tuple[PretrainedGenerator, Checkpoint]:
    """Rebuild the pretrained generator from its checkpoint."""
    path = paths_for(cfg).generator
    _require(path, "pretrain")
    ckpt = load_checkpoint(path)
    generator = build_generator(cfg.image_size, cfg.d_model, cfg.d_tau, cfg.m_max, rng_stream(cfg.seed, "pretrain/init"))
    ckpt.restore("generator", generator.store())
    return generator, ckpt


# ---------------------------------------------------------------------------
# Reward models
# ---------------------------------------------------------------------------


def _reward_stores(models: RewardModels) -> Dict[str, ParamStore]:
    return {name: ParamStore.from_modules({name: m}, frozen={name}) for name, m in models.modules().items()}


def run_fit_rewards(cfg: Config) -> RewardModels:
    """Fit, evaluate and save the three reward models."""
    train, test, manifest = open_dataset(cfg)
    train_images = as_image_batch(images_of(train))
    test_images = as_image_batch(images_of(test))
    fit_args = {"epochs": cfg.reward_epochs, "batch_size": cfg.reward_batch, "lr": cfg.reward_lr}

    posture = fit_posture(train_images, [s.psi_true for s in train], rng_stream(cfg.seed, "rewards/posture"), **fit_args)
    classifier = fit_classifier(train_images, [s.labels for s in train], rng_stream(cfg.seed, "rewards/classifier"), **fit_args)
    dual = fit_dual_encoder(
        train_images,
        [s.report for s in train],
        rng_stream(cfg.seed, "rewards/dual_encoder"),
        d_embed=cfg.d_embed,
        temperature=cfg.temperature,
        m_max=cfg.m_max,
        **fit_args,
    )

    posture_report = evaluate_posture(posture, test_images, [s.psi_true for s in test], cfg.image_size)
    classifier_report = evaluate_classifier(classifier, test_images, [s.labels for s in test])
    dual_report = evaluate_dual_encoder(
        dual, test_images, [s.report for s in test], [s.attrs for s in test], rng_stream(cfg.seed, "rewards/retrieval")
    )
    for name, report in (("posture", posture_report), ("classifier", classifier_report), ("dual_encoder", dual_report)):
        log = logger.info if report.passed else logger.warning
        log(f"{name} fit {'passed' if report.passed else 'below gate'}: {report.model_dump()}")

    models = RewardModels(
        posture=posture,
        classifier=classifier,
        dual_encoder=dual,
        reports={
            "posture": posture_report.model_dump(),
            "classifier": classifier_report.model_dump(),
            "dual_encoder": dual_report.model_dump(),
        },
    )
    registration = registration_summary(cfg, train, test, posture)
    save_checkpoint(
        paths_for(cfg).rewards,
        _reward_stores(models),
        cfg,
        meta={
            "kind": "rewards",
            "dataset_hash": manifest.dataset_hash,
            "reports": models.reports,
            "registration": registration,
        },
    )
    return models


def registration_summary(
    cfg: Config, train: Sequence[PhantomSample], test: Sequence[PhantomSample], posture: PostureModel
) -> Dict[str, float]:
    """Mean registration error against the canonical mean, raw vs posture-normalised."""
    canonical = canonical_mean([s.image for s in train], min(cfg.canonical_k, len(train)))
    estimates = estimate_postures(posture, as_image_batch(images_of(test)))
    identity = PostureParams.identity()
    raw = float(np.mean([registration_error(s.image, identity, canonical) for s in test]))
    normalised = float(np.mean([registration_error(s.image, psi, canonical) for s, psi in zip(test, estimates)]))
    logger.info(f"Registration error vs canonical mean: raw {raw:.5f}, posture-normalised {normalised:.5f}")
    return {"raw": raw, "normalised": normalised}


def load_reward_models(cfg: Config) -> Tuple[RewardModels, Checkpoint]:
    """Rebuild the frozen reward models from their checkpoint."""
    path = paths_for(cfg).rewards
    _require(path, "fit-rewards")
    ckpt = load_checkpoint(path)
    with seeded(rng_stream(cfg.seed, "rewards/load")):
        models = RewardModels(
            posture=PostureModel(cfg.image_size),
            classifier=ClassifierModel(cfg.image_size, cfg.k_labels),
            dual_encoder=DualEncoder(cfg.image_size, d_embed=cfg.d_embed, m_max=cfg.m_max),
            reports=ckpt.meta.get("reports", {}),
        )
    for name, store in _reward_stores(models).items():
        ckpt.restore(name, store)
    for module in models.modules().values():
        freeze(module)
    return models, ckpt


def _check_same_dataset(*hashes: str) -> None:
    known = [h for h in hashes if h]
    for other in known[1:]:
        if other != known[0]:
            raise DatasetMismatchError(known[0], other)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def _save_policy(cfg: Config, policy: PolicyModel, optimizer: AdamOptimizer, step: int, dataset_hash: str, anchor_hash: str) -> None:
    save_checkpoint(
        paths_for(cfg).policy,
        {"policy": policy.params},
        cfg,
        optimizers={"adam": optimizer},
        meta={"kind": "policy", "step": step, "dataset_hash": dataset_hash, "anchor_hash": anchor_hash},
    )


def run_finetune(cfg: Config, resume: bool = False, on_step: Optional[Callable[[StepStats], None]] = None) -> List[StepStats]:
    """Run (or resume) the RL loop, logging each step and checkpointing periodically."""
    train, _, manifest = open_dataset(cfg)
    generator, gen_ckpt = load_generator(cfg)
    models, reward_ckpt = load_reward_models(cfg)
    _check_same_dataset(manifest.dataset_hash, gen_ckpt.meta.get("dataset_hash", ""), reward_ckpt.meta.get("dataset_hash", ""))

    rl_cfg = cfg.rl_config()
    policy, anchor = build_policy(generator, cfg.n_ace, cfg.seed)
    optimizer = AdamOptimizer(policy.params, lr=rl_cfg.lr, betas=rl_cfg.adam_betas, eps=rl_cfg.adam_eps)
    paths = paths_for(cfg)
    start_step = 0
    if resume and paths.policy.exists():
        ckpt = load_checkpoint(paths.policy)
        ckpt.restore("policy", policy.params)
        ckpt.restore_optimizer("adam", optimizer)
        start_step = int(ckpt.meta.get("step", 0))
        logger.warning(f"Resuming fine-tuning from step {start_step}")
    elif resume:
        logger.warning(f"No checkpoint at {paths.policy}; starting from step 0")

    train_set = ReportSet.from_samples(train, cfg.m_max)
    anchor_hash = anchor.params_hash()

    def checkpoint(step: int, opt: AdamOptimizer) -> None:
        _save_policy(cfg, policy, opt, step, manifest.dataset_hash, anchor_hash)

    history, optimizer = finetune(
        policy,
        anchor,
        models,
        train_set.reports,
        train_set.tokens,
        train_set.labels,
        make_schedule(cfg.T, *cfg.betas()),
        rl_cfg,
        cfg.seed,
        optimizer=optimizer,
        start_step=start_step,
        log=TrainingLog(paths.training_log, cfg.config_hash()),
        on_checkpoint=checkpoint,
        on_step=on_step,
    )
    _save_policy(cfg, policy, optimizer, max(start_step, rl_cfg.total_steps), manifest.dataset_hash, anchor_hash)
    return history


def load_policy(cfg: Config, generator: PretrainedGenerator) -> Tuple[Optional[PolicyModel], Optional[Checkpoint]]:
    """Fine-tuned policy if a policy checkpoint exists."""
    path = paths_for(cfg).policy
    if not path.exists():
        return None, None
    ckpt = load_checkpoint(path)
    policy, _ = build_policy(generator, cfg.n_ace, cfg.seed)
    ckpt.restore("policy", policy.params)
    return policy, ckpt


def _pick_model(cfg: Config, which: str):
    generator, _ = load_generator(cfg)
    if which == "anchor":
        return AnchorModel.from_pretrained(generator)
    policy, _ = load_policy(cfg, generator)
    if policy is None:
        raise DatasetError(f"Missing {paths_for(cfg).policy}. Run `finetune` first.")
    return policy


# ---------------------------------------------------------------------------
# Sampling, scoring and evaluation
# ---------------------------------------------------------------------------


def run_sample(cfg: Config, reports: Sequence[str], which: str = "policy") -> List[Path]:
    """Generate one image per report and write ``samples/<i>.pgm``."""
    model = _pick_model(cfg, which)
    tokens = [tokenize(r, cfg.m_max) for r in reports]
    images = generate_images(model, tokens, make_schedule(cfg.T, *cfg.betas()), cfg.seed, label="sample")
    written = []
    for i, image in enumerate(images):
        written.append(write_pgm(paths_for(cfg).samples / f"{i}.pgm", image))
    return written


def _paired_eval_images(cfg: Config, eval_set: ReportSet, policy: PolicyModel, anchor: AnchorModel) -> Tuple[np.ndarray, np.ndarray]:
    sched = make_schedule(cfg.T, *cfg.betas())
    return (
        generate_images(policy, eval_set.tokens, sched, cfg.seed),
        generate_images(anchor, eval_set.tokens, sched, cfg.seed),
    )


def run_score(cfg: Config) -> List[RewardBreakdown]:
    """Per-report rewards of the fine-tuned policy against the anchor on held-out reports."""
    _, test, _ = open_dataset(cfg)
    generator, _ = load_generator(cfg)
    models, _ = load_reward_models(cfg)
    policy = _pick_model(cfg, "policy")
    anchor = AnchorModel.from_pretrained(generator)
    eval_set = ReportSet.from_samples(test, cfg.m_max, cfg.eval_reports)
    x, x_anchor = _paired_eval_images(cfg, eval_set, policy, anchor)
    breakdowns = score_pairs(
        x, x_anchor, eval_set.reports, eval_set.labels, models, cfg.weights, cfg.comparative, cfg.soft_accuracy
    )
    rows = [
        [str(i), repr(b.r_align), repr(b.r_diag), repr(b.r_consist), repr(b.total), cfg.config_hash()]
        for i, b in enumerate(breakdowns)
    ]
    write_csv(paths_for(cfg).scores, SCORE_COLUMNS + ["config_hash"], rows)
    return breakdowns


@dataclass
class EvalResult:
    """metrics.csv rows plus one-sided p-values of the fine-tuned improvements."""

    reports: List[MetricReport]
    p_values: Dict[str, float]


def run_eval(cfg: Config, force: bool = False) -> EvalResult:
    """Evaluate the anchor and, when present, the fine-tuned policy; write metrics.csv."""
    _, test, manifest = open_dataset(cfg)
    generator, gen_ckpt = load_generator(cfg)
    models, reward_ckpt = load_reward_models(cfg)
    policy, policy_ckpt = load_policy(cfg, generator)
    if not force:
        _check_same_dataset(
            manifest.dataset_hash,
            gen_ckpt.meta.get("dataset_hash", ""),
            reward_ckpt.meta.get("dataset_hash", ""),
            policy_ckpt.meta.get("dataset_hash", "") if policy_ckpt else "",
        )

    anchor = AnchorModel.from_pretrained(generator)
    eval_set = ReportSet.from_samples(test, cfg.m_max, cfg.eval_reports)
    reference = images_of(test)
    sched = make_schedule(cfg.T, *cfg.betas())
    config_hash = cfg.config_hash()

    anchor_images = generate_images(anchor, eval_set.tokens, sched, cfg.seed)
    reports = [
        evaluate_generator(
            "anchor", anchor_images, eval_set.reports, eval_set.labels, reference, models,
            cfg.seed, cfg.ssim_pairs, manifest.dataset_hash, config_hash,
        )
    ]
    p_values: Dict[str, float] = {}
    if policy is not None:
        images = generate_images(policy, eval_set.tokens, sched, cfg.seed)
        reports.append(
            evaluate_generator(
                "finetuned", images, eval_set.reports, eval_set.labels, reference, models,
                cfg.seed, cfg.ssim_pairs, manifest.dataset_hash, config_hash,
            )
        )
        p_values = improvement_p_values(images, anchor_images, eval_set, models, cfg)
    write_metrics_csv(paths_for(cfg).metrics, reports)
    return EvalResult(reports=reports, p_values=p_values)


def improvement_p_values(images, anchor_images, eval_set: ReportSet, models: RewardModels, cfg: Config) -> Dict[str, float]:
    """One-sided p-values that fine-tuning improved each reward component per report."""
    comparative = score_pairs(
        images, anchor_images,
        eval_set.reports, eval_set.labels, models, cfg.weights, True, cfg.soft_accuracy,
    )
    anchor_align = score_pairs(
        anchor_images, anchor_images,
        eval_set.reports, eval_set.labels, models, cfg.weights, True, cfg.soft_accuracy,
    )
    return {
        "r_align": one_sided_improvement([c.r_align - a.r_align for c, a in zip(comparative, anchor_align)]),
        "r_diag": one_sided_improvement([c.r_diag for c in comparative]),
        "r_consist": one_sided_improvement([c.r_consist for c in comparative]),
    }


def run_ablate(cfg: Config, variants: bool = False) -> List[MetricReport]:
    """Reward-mask ablation table (plus design variants) written to ablation.csv."""
    train, test, manifest = open_dataset(cfg)
    generator, gen_ckpt = load_generator(cfg)
    models, reward_ckpt = load_reward_models(cfg)
    _check_same_dataset(manifest.dataset_hash, gen_ckpt.meta.get("dataset_hash", ""), reward_ckpt.meta.get("dataset_hash", ""))
    reports = ablation_run(cfg, generator, models, train, test, manifest.dataset_hash, variants)
    write_metrics_csv(paths_for(cfg).ablation, reports)
    return reports
