"""Comparative-feedback policy-gradient fine-tuning of the generator and its ACE rows."""

import copy
import logging
import time
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .constants import TRAINING_LOG_COLUMNS
from .diffusion import (
    DiffusionSchedule,
    Denoiser,
    PretrainedGenerator,
    Trajectory,
    batch_logprob,
    denoise_mean,
    sample_trajectory,
)
from .exceptions import FrozenModelError, NonFiniteError, OffPolicyError, TrainingDivergenceError
from .models import RewardBreakdown, RLConfig, StepStats
from .numcore import (
    AdamOptimizer,
    GradMap,
    ParamStore,
    RngStream,
    accumulate,
    gradients_of,
    rng_stream,
)
from .rewards import RewardModels, score_pairs
from .textcond import AdaptiveConditionEmbedding, ReportEncoder, batch_conditions, init_ace
from .utils import append_csv_row, read_csv, write_csv

logger = logging.getLogger(__name__)


class PolicyModel(nn.Module):
    """Trainable denoiser plus ACE rows, conditioned through a frozen report encoder."""

    def __init__(self, denoiser: Denoiser, encoder: ReportEncoder, ace: AdaptiveConditionEmbedding):
        super().__init__()
        self.denoiser = denoiser
        self.encoder = encoder
        self.ace = ace
        self.params = ParamStore.from_modules(
            {"denoiser": denoiser, "encoder": encoder, "ace": ace}, frozen={"encoder"}
        )

    @classmethod
    def from_pretrained(cls, generator: PretrainedGenerator, n_ace: int, stream: RngStream) -> "PolicyModel":
        """Independent copy of the pretrained networks with fresh ACE rows."""
        return cls(
            copy.deepcopy(generator.denoiser),
            copy.deepcopy(generator.encoder),
            init_ace(n_ace, generator.encoder.d_tau, stream),
        )

    def conditions(self, token_lists: Sequence[Sequence[int]]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Batched [c_s; c_p] rows and their padding mask."""
        return batch_conditions(token_lists, self.encoder, self.ace)

    def params_hash(self) -> str:
        """Hash of every parameter; trajectories carry it as the on-policy tag."""
        return self.params.state_hash()

    def sample(self, token_lists: Sequence[Sequence[int]], sched: DiffusionSchedule, streams: Sequence[RngStream]) -> Trajectory:
        with torch.no_grad():
            cond, mask = self.conditions(token_lists)
        return sample_trajectory(self.denoiser, cond, mask, sched, streams, self.params_hash(), token_lists)


class AnchorModel(nn.Module):
    """Frozen copy of the pretrained generator, conditioned on c_p only."""

    def __init__(self, denoiser: Denoiser, encoder: ReportEncoder):
        super().__init__()
        self.denoiser = denoiser
        self.encoder = encoder
        self.params = ParamStore.from_modules({"denoiser": denoiser, "encoder": encoder}, frozen={"denoiser", "encoder"})

    @classmethod
    def from_pretrained(cls, generator: PretrainedGenerator) -> "AnchorModel":
        return cls(copy.deepcopy(generator.denoiser), copy.deepcopy(generator.encoder))

    def params_hash(self) -> str:
        return self.params.state_hash()

    def sample(self, token_lists: Sequence[Sequence[int]], sched: DiffusionSchedule, streams: Sequence[RngStream]) -> Trajectory:
        with torch.no_grad():
            cond, mask = batch_conditions(token_lists, self.encoder)
        return sample_trajectory(self.denoiser, cond, mask, sched, streams, self.params_hash(), token_lists)


def pair_stream_label(step: int, index: int) -> str:
    """Stream label of one rollout pair at one RL step."""
    return f"rl/step{step}/pair{index}"


def rollout_batch(
    policy: PolicyModel,
    anchor: AnchorModel,
    token_lists: Sequence[Sequence[int]],
    sched: DiffusionSchedule,
    seed: int,
    labels: Sequence[str],
    shared_noise: bool = True,
) -> Tuple[Trajectory, torch.Tensor, torch.Tensor]:
    """Sample policy and anchor images for the same reports.

    With ``shared_noise`` the anchor reopens each policy stream from counter
    zero, so both rollouts consume identical noise; otherwise it draws from
    the ``<label>/anchor`` child stream.

    Returns:
        (policy trajectory, policy images, anchor images); images are clamped x_0
    """
    if any(p.requires_grad for p in anchor.parameters()):
        raise FrozenModelError("anchor must be frozen")
    traj = policy.sample(token_lists, sched, [rng_stream(seed, label) for label in labels])
    anchor_streams = [
        rng_stream(seed, label) if shared_noise else rng_stream(seed, label).child("anchor") for label in labels
    ]
    anchor_traj = anchor.sample(token_lists, sched, anchor_streams)
    return traj, traj.final_images(), anchor_traj.final_images()


def rollout_pair(
    policy: PolicyModel,
    anchor: AnchorModel,
    tokens: Sequence[int],
    sched: DiffusionSchedule,
    stream: RngStream,
    shared_noise: bool = True,
) -> Tuple[Trajectory, torch.Tensor, torch.Tensor]:
    """Single-report form of ``rollout_batch``; returns (trajectory, x, x_anchor) with (H, W) images."""
    traj, x, x_anchor = rollout_batch(
        policy, anchor, [tokens], sched, stream.master_seed, [stream.label], shared_noise
    )
    return traj, x[0, 0], x_anchor[0, 0]


def estimate_policy_gradient(
    logprob_chunks: Iterable[Callable[[], torch.Tensor]],
    rewards: torch.Tensor,
    params: ParamStore,
) -> GradMap:
    """(1/B) sum_i sum_t r_i grad log p_t^(i), accumulated chunk by chunk in float64.

    Args:
        logprob_chunks: Callables each returning per-item log-probabilities (B,)
            for a subset of the timesteps, built fresh with gradients enabled
        rewards: (B,) reward per trajectory
        params: Store whose trainable entries receive the gradient

    Returns:
        Ascent direction per trainable entry (float64)
    """
    rewards = rewards.detach()
    batch = rewards.shape[0]
    total: Optional[GradMap] = None
    for chunk in logprob_chunks:
        log_probs = chunk()
        objective = (rewards.to(log_probs.dtype) * log_probs).sum() / batch
        total = accumulate(total, gradients_of(objective, params))
    if total is None:
        total = {n: torch.zeros_like(t, dtype=torch.float64) for n, t in params.trainable().items()}
    return total


def combine_rewards(breakdowns: Sequence[RewardBreakdown], whiten: bool = False) -> torch.Tensor:
    """Per-trajectory scalar reward, optionally whitening each component across the batch."""
    if not whiten:
        return torch.tensor([b.total for b in breakdowns], dtype=torch.float64)
    components = np.array([[b.r_align, b.r_diag, b.r_consist] for b in breakdowns], dtype=np.float64)
    std = components.std(axis=0)
    z = (components - components.mean(axis=0)) / np.where(std > 0, std, 1.0)
    weights = np.array(breakdowns[0].weights.as_tuple())
    return torch.from_numpy(z @ weights)


def _trajectory_chunks(policy: PolicyModel, traj: Trajectory, sched: DiffusionSchedule) -> Iterable[Callable[[], torch.Tensor]]:
    for k, t in enumerate(traj.timesteps):

        def chunk(k: int = k, t: int = t) -> torch.Tensor:
            cond, mask = policy.conditions(traj.tokens)
            x_t = traj.states[k]
            t_vec = torch.full((x_t.shape[0],), t, dtype=torch.long)
            mu = denoise_mean(x_t, policy.denoiser(x_t, t_vec, cond, mask), t, sched)
            return batch_logprob(traj.states[k + 1], mu, sched.sigma(t, x_t))

        yield chunk


def policy_gradient_step(
    policy: PolicyModel,
    traj: Trajectory,
    breakdowns: Sequence[RewardBreakdown],
    optimizer: AdamOptimizer,
    sched: DiffusionSchedule,
    cfg: RLConfig,
    step: int = 0,
) -> StepStats:
    """Recompute log-probabilities on-policy and take one ascent step.

    Raises:
        OffPolicyError: If the trajectory was sampled under other parameters
        TrainingDivergenceError: If a gradient or statistic is not finite
    """
    started = time.perf_counter()
    current = policy.params_hash()
    if traj.params_hash != current:
        raise OffPolicyError(traj.params_hash, current)
    rewards = combine_rewards(breakdowns, cfg.whiten_rewards)
    try:
        ascent = estimate_policy_gradient(_trajectory_chunks(policy, traj, sched), rewards, policy.params)
    except NonFiniteError as e:
        raise TrainingDivergenceError(step, str(e.what))
    descent = {name: -grad for name, grad in ascent.items()}
    grad_norm = optimizer.step(descent, max_norm=cfg.grad_clip if cfg.grad_clip > 0 else None)

    comps = np.array([[b.r_align, b.r_diag, b.r_consist, b.total] for b in breakdowns], dtype=np.float64)
    means, stds = comps.mean(axis=0), comps.std(axis=0)
    stats = StepStats(
        step=step,
        mean_r_align=float(means[0]),
        std_r_align=float(stds[0]),
        mean_r_diag=float(means[1]),
        std_r_diag=float(stds[1]),
        mean_r_consist=float(means[2]),
        std_r_consist=float(stds[2]),
        mean_total=float(means[3]),
        grad_norm=float(grad_norm),
        seconds=time.perf_counter() - started,
    )
    if not stats.is_finite():
        raise TrainingDivergenceError(step)
    return stats


class TrainingLog:
    """Per-step CSV log with a trailing config hash column."""

    def __init__(self, path: Path, config_hash: str):
        self.path = Path(path)
        self.config_hash = config_hash
        self.header = TRAINING_LOG_COLUMNS + ["config_hash"]

    def truncate(self, start_step: int) -> None:
        """Drop rows at or after ``start_step`` (left behind by an interrupted run)."""
        if not self.path.exists():
            return
        rows = [r for r in read_csv(self.path) if int(r["step"]) < start_step]
        write_csv(self.path, self.header, [[r[c] for c in self.header] for r in rows])

    def append(self, stats: StepStats) -> None:
        append_csv_row(self.path, self.header, stats.log_row() + [self.config_hash])


def finetune(
    policy: PolicyModel,
    anchor: AnchorModel,
    models: RewardModels,
    reports: Sequence[str],
    token_lists: Sequence[Sequence[int]],
    labels: Sequence[Sequence[int]],
    sched: DiffusionSchedule,
    cfg: RLConfig,
    seed: int,
    optimizer: Optional[AdamOptimizer] = None,
    start_step: int = 0,
    log: Optional[TrainingLog] = None,
    on_checkpoint: Optional[Callable[[int, AdamOptimizer], None]] = None,
    on_step: Optional[Callable[[StepStats], None]] = None,
) -> Tuple[List[StepStats], AdamOptimizer]:
    """Run the RL loop from ``start_step`` to ``cfg.total_steps``.

    Every step draws B report indices from its own stream, rolls out policy and
    anchor pairs, scores them and applies one policy-gradient step. All
    randomness is keyed by (seed, step), so a run resumed from a checkpoint
    continues exactly as the uninterrupted run would.

    Returns:
        Per-step statistics of this call and the optimizer

    Raises:
        FrozenModelError: If the anchor changed during the run
        TrainingDivergenceError: On non-finite statistics
    """
    models.check_frozen()
    if optimizer is None:
        optimizer = AdamOptimizer(policy.params, lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    anchor_hash = anchor.params_hash()
    if log is not None:
        log.truncate(start_step)

    history: List[StepStats] = []
    for step in range(start_step, cfg.total_steps):
        idx = rng_stream(seed, f"rl/step{step}/reports").integers(0, len(token_lists), (cfg.batch_size,))
        pair_labels = [pair_stream_label(step, i) for i in range(cfg.batch_size)]
        batch_tokens = [token_lists[i] for i in idx]
        traj, x, x_anchor = rollout_batch(policy, anchor, batch_tokens, sched, seed, pair_labels, cfg.shared_noise)
        breakdowns = score_pairs(
            x,
            x_anchor,
            [reports[i] for i in idx],
            [labels[i] for i in idx],
            models,
            cfg.weights,
            cfg.comparative,
            cfg.soft_accuracy,
        )
        stats = policy_gradient_step(policy, traj, breakdowns, optimizer, sched, cfg, step)
        history.append(stats)
        if log is not None:
            log.append(stats)
        if on_step is not None:
            on_step(stats)
        logger.info(
            f"step {step}: total {stats.mean_total:.4f} align {stats.mean_r_align:.4f} "
            f"diag {stats.mean_r_diag:.4f} consist {stats.mean_r_consist:.4f} |g| {stats.grad_norm:.4f}"
        )
        done = step + 1
        if on_checkpoint is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            on_checkpoint(done, optimizer)

    if anchor.params_hash() != anchor_hash:
        raise FrozenModelError("anchor parameters changed during fine-tuning")
    return history, optimizer


def build_policy(generator: PretrainedGenerator, n_ace: int, seed: int) -> Tuple[PolicyModel, AnchorModel]:
    """Policy and anchor built from the same pretrained generator."""
    policy = PolicyModel.from_pretrained(generator, n_ace, rng_stream(seed, "rl/ace"))
    return policy, AnchorModel.from_pretrained(generator)

