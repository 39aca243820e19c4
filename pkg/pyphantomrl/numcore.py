"""Numeric substrate: named parameter stores, gradients, Adam and replayable RNG streams.

Tensors are plain ``torch.Tensor`` values and networks are ``torch.nn.Module``s.
This module adds the pieces the rest of the pipeline relies on being exact:

* ``ParamStore`` - a named view over module parameters with a frozen flag.
* ``gradients_of`` - reverse-mode gradients for every non-frozen entry.
* ``AdamOptimizer`` / ``optimizer_step`` - bias-corrected adaptive moments.
* ``RngStream`` - counter-based Philox streams keyed by (seed, label).
"""

import hashlib
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .exceptions import (
    MissingOptimizerStateError,
    NonFiniteError,
    ShapeMismatchError,
    UnregisteredParameterError,
)

logger = logging.getLogger(__name__)

DEFAULT_LR = 3e-4
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8

_DTYPES = {"float32": torch.float32, "float64": torch.float64}

GradMap = Dict[str, torch.Tensor]


@contextmanager
def precision(name: str) -> Iterator[torch.dtype]:
    """Temporarily switch the default tensor dtype ("float32" or "float64")."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(_DTYPES[name])
    try:
        yield _DTYPES[name]
    finally:
        torch.set_default_dtype(previous)


def set_precision(name: str) -> None:
    """Set the default tensor dtype for the rest of the process."""
    torch.set_default_dtype(_DTYPES[name])


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named map of parameter tensors with a per-entry frozen flag.

    Entries are the live tensors of the registered modules, so updating a
    module updates the store and vice versa. Frozen entries have
    ``requires_grad=False`` and are never handed to an optimizer.
    """

    def __init__(self) -> None:
        self._tensors: Dict[str, torch.Tensor] = {}
        self._frozen: set[str] = set()

    @classmethod
    def from_modules(
        cls, modules: Mapping[str, nn.Module], frozen: Iterable[str] = ()
    ) -> "ParamStore":
        """Register every parameter of each module under ``<prefix>.<name>``.

        Args:
            modules: Prefix to module mapping
            frozen: Prefixes whose parameters are registered frozen

        Returns:
            ParamStore over the modules' live parameters
        """
        frozen_prefixes = set(frozen)
        store = cls()
        for prefix, module in modules.items():
            for name, param in module.named_parameters():
                if param.numel() == 0:
                    continue
                store.register(f"{prefix}.{name}", param, frozen=prefix in frozen_prefixes)
        return store

    def register(self, name: str, tensor: torch.Tensor, frozen: bool = False) -> None:
        """Add one entry; names must be unique."""
        if name in self._tensors:
            raise ValueError(f"Parameter '{name}' already registered")
        if any(dim <= 0 for dim in tensor.shape):
            raise ShapeMismatchError(name, [max(1, d) for d in tensor.shape], tensor.shape)
        self._tensors[name] = tensor
        if frozen:
            self._frozen.add(name)
        tensor.requires_grad_(not frozen)

    def freeze(self, prefix: str = "") -> None:
        """Freeze every entry whose name starts with ``prefix``."""
        for name, tensor in self._tensors.items():
            if name.startswith(prefix):
                self._frozen.add(name)
                tensor.requires_grad_(False)

    def is_frozen(self, name: str) -> bool:
        """Whether an entry is frozen."""
        return name in self._frozen

    def names(self) -> List[str]:
        """Entry names in registration order."""
        return list(self._tensors)

    def items(self) -> Iterable[Tuple[str, torch.Tensor]]:
        """(name, tensor) pairs in registration order."""
        return self._tensors.items()

    def trainable(self) -> Dict[str, torch.Tensor]:
        """Non-frozen entries."""
        return {n: t for n, t in self._tensors.items() if n not in self._frozen}

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def snapshot(self) -> Dict[str, torch.Tensor]:
        """Detached copies of every entry."""
        return {n: t.detach().clone() for n, t in self._tensors.items()}

    def state_hash(self) -> str:
        """sha256 over names, dtypes, shapes and raw bytes of every entry."""
        digest = hashlib.sha256()
        for name in sorted(self._tensors):
            tensor = self._tensors[name].detach().cpu().contiguous()
            digest.update(name.encode("utf-8"))
            digest.update(str(tensor.dtype).encode("utf-8"))
            digest.update(str(tuple(tensor.shape)).encode("utf-8"))
            digest.update(tensor.numpy().tobytes())
        return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def _graph_leaves(output: torch.Tensor) -> List[torch.Tensor]:
    """Leaf tensors that accumulate gradient in the graph of ``output``."""
    leaves: List[torch.Tensor] = []
    seen: set[int] = set()
    stack = [output.grad_fn]
    while stack:
        node = stack.pop()
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        variable = getattr(node, "variable", None)
        if variable is not None:
            leaves.append(variable)
        stack.extend(next_node for next_node, _ in node.next_functions)
    return leaves


def gradients_of(
    computation: Union[Callable[[ParamStore], torch.Tensor], torch.Tensor],
    params: ParamStore,
) -> GradMap:
    """Reverse-mode gradient of a scalar computation w.r.t. every non-frozen entry.

    Args:
        computation: Callable evaluated on ``params`` (or an already-built scalar)
        params: Store whose non-frozen entries receive gradients

    Returns:
        One gradient per non-frozen entry, shape-matching it; frozen entries
        get no key. Entries the computation does not touch get zeros.

    Raises:
        ShapeMismatchError: If the output is not a scalar
        UnregisteredParameterError: If a trainable leaf outside the store is used
        NonFiniteError: If the output or any gradient is not finite
    """
    output = computation(params) if callable(computation) else computation
    if output.numel() != 1:
        raise ShapeMismatchError("computation output", (), tuple(output.shape))
    if not torch.isfinite(output).all():
        raise NonFiniteError("computation output")

    trainable = params.trainable()
    if not output.requires_grad:
        return {n: torch.zeros_like(t) for n, t in trainable.items()}

    known = {id(t) for _, t in params.items()}
    strangers = [leaf for leaf in _graph_leaves(output) if id(leaf) not in known]
    if strangers:
        raise UnregisteredParameterError(len(strangers))

    names = list(trainable)
    grads = torch.autograd.grad(
        output.reshape(()), [trainable[n] for n in names], allow_unused=True
    )
    result: GradMap = {}
    for name, grad in zip(names, grads):
        grad = torch.zeros_like(trainable[name]) if grad is None else grad.detach()
        if not torch.isfinite(grad).all():
            raise NonFiniteError(f"gradient of {name}")
        result[name] = grad
    return result


def accumulate(total: Optional[GradMap], grads: GradMap, scale: float = 1.0) -> GradMap:
    """Add ``scale * grads`` into a float64 accumulator (created on first use)."""
    if total is None:
        total = {n: torch.zeros_like(g, dtype=torch.float64) for n, g in grads.items()}
    for name, grad in grads.items():
        total[name] += grad.to(torch.float64) * scale
    return total


def global_norm(grads: GradMap) -> float:
    """L2 norm over all gradient entries."""
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads.values()])))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """Snapshot of the adaptive-moment optimizer."""

    step: int
    lr: float
    betas: Tuple[float, float]
    eps: float
    moments: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)


class AdamOptimizer:
    """Bias-corrected Adam over the non-frozen entries of a ParamStore."""

    def __init__(
        self,
        params: ParamStore,
        lr: float = DEFAULT_LR,
        betas: Tuple[float, float] = DEFAULT_BETAS,
        eps: float = DEFAULT_EPS,
    ):
        self.params = params
        self.names = list(params.trainable())
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self._steps = 0
        tensors = [params[n] for n in self.names]
        self._optim = torch.optim.Adam(tensors, lr=lr, betas=self.betas, eps=eps, foreach=False) if tensors else None

    @property
    def step_count(self) -> int:
        """Number of optimizer steps taken."""
        return self._steps

    def step(self, grads: GradMap, max_norm: Optional[float] = None) -> float:
        """Apply one update.

        Args:
            grads: Gradient per trainable entry (missing entries count as zero)
            max_norm: Optional global-norm clip

        Returns:
            Global gradient norm before clipping

        Raises:
            MissingOptimizerStateError: If a gradient names an entry the optimizer does not own
            ShapeMismatchError: If a gradient's shape differs from its parameter
        """
        for name, grad in grads.items():
            if name not in self.names:
                raise MissingOptimizerStateError(name)
            if tuple(grad.shape) != tuple(self.params[name].shape):
                raise ShapeMismatchError(f"gradient of {name}", self.params[name].shape, grad.shape)

        for name in self.names:
            param = self.params[name]
            grad = grads.get(name)
            param.grad = torch.zeros_like(param) if grad is None else grad.to(param.dtype).clone()

        tensors = [self.params[n] for n in self.names]
        if max_norm is not None and max_norm > 0 and tensors:
            norm = float(torch.nn.utils.clip_grad_norm_(tensors, max_norm, foreach=False))
        else:
            norm = global_norm({n: self.params[n].grad for n in self.names})

        if self._optim is not None:
            self._optim.step()
            self._optim.zero_grad(set_to_none=True)
        self._steps += 1
        return norm

    @property
    def state(self) -> OptimState:
        """Current moments and step counter."""
        moments = {}
        if self._optim is not None:
            for name in self.names:
                entry = self._optim.state.get(self.params[name], {})
                if entry:
                    moments[name] = (entry["exp_avg"].detach().clone(), entry["exp_avg_sq"].detach().clone())
        return OptimState(step=self._steps, lr=self.lr, betas=self.betas, eps=self.eps, moments=moments)

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        """Moments flattened to ``<name>/exp_avg`` and ``<name>/exp_avg_sq``."""
        tensors: Dict[str, torch.Tensor] = {}
        for name, (exp_avg, exp_avg_sq) in self.state.moments.items():
            tensors[f"{name}/exp_avg"] = exp_avg
            tensors[f"{name}/exp_avg_sq"] = exp_avg_sq
        return tensors

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor], step: int) -> None:
        """Restore moments written by ``state_tensors`` and the step counter."""
        self._steps = int(step)
        if self._optim is None:
            return
        scalar_dtype = torch.float64 if torch.get_default_dtype() == torch.float64 else torch.float32
        for name in self.names:
            key_m, key_v = f"{name}/exp_avg", f"{name}/exp_avg_sq"
            if key_m not in tensors or key_v not in tensors:
                if step > 0:
                    raise MissingOptimizerStateError(name)
                continue
            param = self.params[name]
            self._optim.state[param] = {
                "step": torch.tensor(float(step), dtype=scalar_dtype),
                "exp_avg": tensors[key_m].to(param.dtype).clone(),
                "exp_avg_sq": tensors[key_v].to(param.dtype).clone(),
            }


def optimizer_step(
    params: ParamStore, grads: GradMap, optimizer: AdamOptimizer, max_norm: Optional[float] = None
) -> Tuple[ParamStore, OptimState]:
    """Functional form of ``AdamOptimizer.step``: returns the updated store and state."""
    if optimizer.params is not params:
        raise MissingOptimizerStateError("<store not owned by this optimizer>")
    optimizer.step(grads, max_norm=max_norm)
    return params, optimizer.state


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------


def _philox_key(master_seed: int, label: str) -> np.ndarray:
    digest = hashlib.sha256(f"{int(master_seed)}\x00{label}".encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


def _counter_words(counter: int) -> np.ndarray:
    return np.array([(counter >> (64 * i)) & 0xFFFFFFFFFFFFFFFF for i in range(4)], dtype=np.uint64)


class RngStream:
    """Deterministic Philox stream keyed by (master seed, label).

    Draws are a pure function of (master_seed, label, counter); each draw
    starts from a fresh Philox block so no value is ever handed out twice.
    """

    def __init__(self, master_seed: int, label: str, counter: int = 0):
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        self.label = label
        self.counter = int(counter)
        self._key = _philox_key(self.master_seed, label)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.master_seed}, label={self.label!r}, counter={self.counter})"

    def child(self, label: str) -> "RngStream":
        """Independent stream labelled ``<self.label>/<label>``."""
        return RngStream(self.master_seed, f"{self.label}/{label}")

    def _draw(self, fn: Callable[[np.random.Generator], np.ndarray]) -> np.ndarray:
        bit_generator = np.random.Philox(key=self._key, counter=_counter_words(self.counter))
        values = fn(np.random.Generator(bit_generator))
        words = bit_generator.state["state"]["counter"]
        self.counter = sum(int(w) << (64 * i) for i, w in enumerate(words))
        return values

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        """Standard-normal float64 draws."""
        return self._draw(lambda g: g.standard_normal(tuple(shape)))

    def uniform(self, shape: Sequence[int] = (), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform float64 draws on [low, high)."""
        return self._draw(lambda g: g.uniform(low, high, tuple(shape)))

    def integers(self, low: int, high: int, shape: Sequence[int] = ()) -> np.ndarray:
        """Integers on [low, high)."""
        return self._draw(lambda g: g.integers(low, high, tuple(shape)))

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n)."""
        return self._draw(lambda g: g.permutation(n))


def rng_stream(master_seed: int, label: str) -> RngStream:
    """Open the stream for (master_seed, label) at counter zero."""
    return RngStream(master_seed, label)


def gaussian_sample(stream: RngStream, shape: Sequence[int]) -> torch.Tensor:
    """Independent standard-normal tensor in the default dtype.

    Raises:
        ValueError: If any dimension is not positive
    """
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise ValueError(f"gaussian_sample needs positive dimensions, got {shape}")
    return torch.from_numpy(stream.normal(shape)).to(torch.get_default_dtype())


@contextmanager
def seeded(stream: RngStream) -> Iterator[None]:
    """Run module construction under a torch seed drawn from ``stream``.

    The global torch generator is restored afterwards, so initialisation
    never leaks state between stages.
    """
    seed = int(stream.integers(0, 2**63 - 1))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def as_image_batch(images: Union[np.ndarray, torch.Tensor, Sequence[np.ndarray]]) -> torch.Tensor:
    """Stack (H, W) images into an (n, 1, H, W) tensor in the default dtype."""
    if isinstance(images, torch.Tensor):
        batch = images
    else:
        batch = torch.from_numpy(np.stack([np.asarray(img, dtype=np.float64) for img in images]))
    if batch.dim() == 3:
        batch = batch.unsqueeze(1)
    if batch.dim() != 4 or batch.shape[1] != 1:
        raise ShapeMismatchError("image batch", (-1, 1, -1, -1), tuple(batch.shape))
    return batch.to(torch.get_default_dtype())
