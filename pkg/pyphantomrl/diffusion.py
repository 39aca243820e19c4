"""Conditional denoising diffusion: schedule, noising, denoiser, sampling and pretraining."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import NonFiniteError, ShapeMismatchError
from .numcore import AdamOptimizer, ParamStore, RngStream, gaussian_sample, gradients_of, seeded
from .textcond import ReportEncoder, batch_conditions

logger = logging.getLogger(__name__)

PATCH = 8
LOG_2PI = math.log(2.0 * math.pi)

TimeIndex = Union[int, torch.Tensor]


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule; arrays are indexed by t - 1 for t in 1..T."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def _lookup(self, values: np.ndarray, t: TimeIndex, like: torch.Tensor) -> torch.Tensor:
        if isinstance(t, torch.Tensor) and t.dim() > 0:
            if int(t.min()) < 1 or int(t.max()) > self.T:
                raise ValueError(f"t must lie in 1..{self.T}")
            out = torch.as_tensor(values, dtype=like.dtype)[t.long() - 1]
            return out.reshape(-1, *([1] * (like.dim() - 1)))
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"t must lie in 1..{self.T}, got {t}")
        return torch.tensor(values[t - 1], dtype=like.dtype)

    def beta(self, t: TimeIndex, like: torch.Tensor) -> torch.Tensor:
        return self._lookup(self.betas, t, like)

    def alpha(self, t: TimeIndex, like: torch.Tensor) -> torch.Tensor:
        return self._lookup(self.alphas, t, like)

    def alpha_bar(self, t: TimeIndex, like: torch.Tensor) -> torch.Tensor:
        return self._lookup(self.alpha_bars, t, like)

    def sigma(self, t: TimeIndex, like: torch.Tensor) -> torch.Tensor:
        return self._lookup(self.sigmas, t, like)


def make_schedule(T: int, beta_min: float, beta_max: float) -> DiffusionSchedule:
    """Linear betas from beta_min to beta_max with sigma_t^2 = beta_t.

    Raises:
        ValueError: If T < 1 or the bounds violate 0 < beta_min <= beta_max < 1
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(
        T=T, betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas), sigmas=np.sqrt(betas)
    )


def forward_noise(x0: torch.Tensor, t: TimeIndex, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.shape:
        raise ShapeMismatchError("noise", x0.shape, eps.shape)
    abar = sched.alpha_bar(t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def denoise_mean(x_t: torch.Tensor, eps_hat: torch.Tensor, t: TimeIndex, sched: DiffusionSchedule) -> torch.Tensor:
    """Reverse-step mean (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)."""
    if eps_hat.shape != x_t.shape:
        raise ShapeMismatchError("predicted noise", x_t.shape, eps_hat.shape)
    beta = sched.beta(t, x_t)
    abar = sched.alpha_bar(t, x_t)
    return (x_t - beta / torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(sched.alpha(t, x_t))


def batch_logprob(x_prev: torch.Tensor, mu: torch.Tensor, sigma: Union[float, torch.Tensor]) -> torch.Tensor:
    """Gaussian log-density summed over every dimension but the first."""
    sigma = torch.as_tensor(sigma, dtype=mu.dtype)
    if bool((sigma <= 0).any()):
        raise ValueError("sigma must be positive")
    z = (x_prev - mu) / sigma
    dens = -0.5 * z * z - torch.log(sigma) - 0.5 * LOG_2PI
    return dens.reshape(dens.shape[0], -1).sum(dim=1)


def transition_logprob(x_prev: torch.Tensor, mu: torch.Tensor, sigma: Union[float, torch.Tensor]) -> torch.Tensor:
    """log N(x_prev; mu, sigma^2 I) summed over all dimensions.

    Raises:
        ValueError: If sigma is not positive
    """
    return batch_logprob(x_prev.reshape(1, -1), mu.reshape(1, -1), sigma)[0]


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style sin/cos embedding of integer timesteps: (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.get_default_dtype()) / half)
    angles = t.to(torch.get_default_dtype())[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Denoiser(nn.Module):
    """Noise predictor eps_hat(x_t, t, c).

    Images are cut into 8x8 patches, embedded as tokens with a sinusoidal time
    embedding added, mixed by self-attention, then attend over the condition
    rows through one cross-attention block before a residual perceptron head
    maps each token back to its patch.
    """

    def __init__(self, image_size: int = 32, d_model: int = 64, d_tau: int = 32, heads: int = 4):
        super().__init__()
        if image_size % PATCH:
            raise ValueError(f"image_size must be a multiple of {PATCH}")
        self.image_size = image_size
        self.d_model = d_model
        self.d_tau = d_tau
        self.grid = image_size // PATCH
        n_tokens = self.grid * self.grid
        patch_dim = PATCH * PATCH

        self.patch_in = nn.Linear(patch_dim, d_model)
        self.position = nn.Parameter(torch.randn(n_tokens, d_model) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(d_model, d_model), nn.SiLU(), nn.Linear(d_model, d_model))
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = nn.MultiheadAttention(d_model, heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(d_model)
        self.cross_attn = nn.MultiheadAttention(d_model, heads, kdim=d_tau, vdim=d_tau, batch_first=True)
        self.norm_mlp = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.SiLU(), nn.Linear(2 * d_model, d_model))
        self.patch_out = nn.Linear(d_model, patch_dim)
        nn.init.normal_(self.patch_out.weight, std=0.01)
        nn.init.zeros_(self.patch_out.bias)

    def _patchify(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        x = x.reshape(b, self.grid, PATCH, self.grid, PATCH).permute(0, 1, 3, 2, 4)
        return x.reshape(b, self.grid * self.grid, PATCH * PATCH)

    def _unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b = tokens.shape[0]
        x = tokens.reshape(b, self.grid, self.grid, PATCH, PATCH).permute(0, 1, 3, 2, 4)
        return x.reshape(b, 1, self.image_size, self.image_size)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
        cond_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Predict the noise in ``x``.

        Args:
            x: (B, 1, H, W) noised images
            t: (B,) integer timesteps in 1..T
            cond: (B, L, d_tau) condition rows
            cond_mask: (B, L) key padding mask, True marks padding

        Returns:
            (B, 1, H, W) predicted noise
        """
        if cond.shape[-1] != self.d_tau:
            raise ShapeMismatchError("condition width", (self.d_tau,), (cond.shape[-1],))
        h = self.patch_in(self._patchify(x)) + self.position
        h = h + self.time_mlp(sinusoidal_embedding(t, self.d_model))[:, None, :]
        q = self.norm_self(h)
        h = h + self.self_attn(q, q, q, need_weights=False)[0]
        h = h + self.cross_attn(self.norm_cross(h), cond, cond, key_padding_mask=cond_mask, need_weights=False)[0]
        h = h + self.mlp(self.norm_mlp(h))
        return self._unpatchify(self.patch_out(h))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """One batch of reverse-diffusion episodes.

    ``states[k]`` is x_{T-k}, so ``states[0]`` is the initial noise and
    ``states[T]`` the raw x_0. ``means[k]`` and ``log_probs[k]`` belong to the
    transition x_{T-k} -> x_{T-k-1}.
    """

    states: torch.Tensor
    means: torch.Tensor
    log_probs: torch.Tensor
    timesteps: List[int]
    tokens: List[List[int]] = field(default_factory=list)
    stream_labels: List[str] = field(default_factory=list)
    params_hash: str = ""

    @property
    def batch_size(self) -> int:
        return self.states.shape[1]

    def final_images(self) -> torch.Tensor:
        """x_0 clamped to [0, 1]; the stored state is left untouched."""
        return self.states[-1].clamp(0.0, 1.0)


def sample_trajectory(
    denoiser: Denoiser,
    cond: torch.Tensor,
    cond_mask: Optional[torch.Tensor],
    sched: DiffusionSchedule,
    streams: Sequence[RngStream],
    params_hash: str = "",
    tokens: Optional[Sequence[Sequence[int]]] = None,
) -> Trajectory:
    """Ancestral sampling x_T -> x_0 with per-step transition log-probabilities.

    Each batch item draws its initial noise and then one noise image per step
    from its own stream, so an item's trajectory does not depend on the rest
    of the batch.

    Raises:
        NonFiniteError: If the network output stops being finite
    """
    if len(streams) != cond.shape[0]:
        raise ShapeMismatchError("streams", (cond.shape[0],), (len(streams),))
    shape = (1, denoiser.image_size, denoiser.image_size)
    with torch.no_grad():
        x = torch.stack([gaussian_sample(s, shape) for s in streams])
        states, means, log_probs, timesteps = [x], [], [], []
        for t in range(sched.T, 0, -1):
            t_vec = torch.full((x.shape[0],), t, dtype=torch.long)
            eps_hat = denoiser(x, t_vec, cond, cond_mask)
            if not torch.isfinite(eps_hat).all():
                raise NonFiniteError(f"denoiser output at t={t}")
            mu = denoise_mean(x, eps_hat, t, sched)
            sigma = sched.sigma(t, x)
            z = torch.stack([gaussian_sample(s, shape) for s in streams])
            x = mu + sigma * z
            means.append(mu)
            log_probs.append(batch_logprob(x, mu, sigma))
            states.append(x)
            timesteps.append(t)
    return Trajectory(
        states=torch.stack(states),
        means=torch.stack(means),
        log_probs=torch.stack(log_probs),
        timesteps=timesteps,
        tokens=[list(t) for t in tokens] if tokens is not None else [],
        stream_labels=[s.label for s in streams],
        params_hash=params_hash,
    )


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainedGenerator:
    """Denoiser and report encoder after supervised pretraining."""

    denoiser: Denoiser
    encoder: ReportEncoder
    losses: List[float] = field(default_factory=list)

    def store(self) -> ParamStore:
        return ParamStore.from_modules({"denoiser": self.denoiser, "encoder": self.encoder})


def build_generator(image_size: int, d_model: int, d_tau: int, m_max: int, stream: RngStream) -> PretrainedGenerator:
    """Freshly initialised denoiser and encoder."""
    with seeded(stream):
        denoiser = Denoiser(image_size=image_size, d_model=d_model, d_tau=d_tau)
        encoder = ReportEncoder(d_tau=d_tau, m_max=m_max)
    return PretrainedGenerator(denoiser=denoiser, encoder=encoder)


def pretrain_step(
    generator: PretrainedGenerator,
    images: torch.Tensor,
    token_lists: Sequence[Sequence[int]],
    sched: DiffusionSchedule,
    stream: RngStream,
    optimizer: AdamOptimizer,
) -> float:
    """One noise-prediction step on (x0, report) pairs.

    Returns:
        The batch loss before the update

    Raises:
        ValueError: If the batch is empty
    """
    if images.shape[0] == 0 or len(token_lists) != images.shape[0]:
        raise ValueError("pretrain_step needs a nonempty batch with one report per image")
    b = images.shape[0]
    t = torch.from_numpy(stream.integers(1, sched.T + 1, (b,))).long()
    eps = gaussian_sample(stream, tuple(images.shape))
    x_t = forward_noise(images, t, eps, sched)
    cond, mask = batch_conditions(token_lists, generator.encoder)
    loss = ((eps - generator.denoiser(x_t, t, cond, mask)) ** 2).mean()
    grads = gradients_of(loss, optimizer.params)
    optimizer.step(grads)
    return float(loss)


def pretrain_generator(
    images: torch.Tensor,
    token_lists: Sequence[Sequence[int]],
    sched: DiffusionSchedule,
    stream: RngStream,
    steps: int,
    batch_size: int,
    lr: float,
    d_model: int = 64,
    d_tau: int = 32,
    m_max: int = 74,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> PretrainedGenerator:
    """Train denoiser and report encoder jointly on the denoising loss.

    Args:
        images: (n, 1, H, W) training images
        token_lists: One token list per image
        sched: Diffusion schedule
        stream: Stream owning initialisation and minibatch draws
        steps: Optimizer steps
        batch_size: Items per step, drawn with replacement
        lr: Adam learning rate
        d_model: Denoiser token width
        d_tau: Condition width
        m_max: Maximum report length
        on_step: Optional callback receiving (step, loss)

    Returns:
        PretrainedGenerator holding both networks and the loss history
    """
    n = images.shape[0]
    generator = build_generator(images.shape[-1], d_model, d_tau, m_max, stream.child("init"))
    optimizer = AdamOptimizer(generator.store(), lr=lr)
    for step in range(steps):
        step_stream = stream.child(f"step{step}")
        idx = step_stream.integers(0, n, (batch_size,))
        loss = pretrain_step(
            generator, images[torch.from_numpy(idx)], [token_lists[i] for i in idx], sched, step_stream, optimizer
        )
        if not math.isfinite(loss):
            raise NonFiniteError(f"pretraining loss at step {step}")
        generator.losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
        if step % 100 == 0:
            logger.debug(f"pretrain step {step}: loss {loss:.4f}")
    if generator.losses:
        logger.info(f"Pretraining finished: final loss {generator.losses[-1]:.4f}")
    return generator
