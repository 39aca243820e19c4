"""Report tokenization, the frozen report encoder and adaptive condition embeddings."""

import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import torch
from torch import nn

from .constants import Vocabulary
from .exceptions import ShapeMismatchError
from .numcore import RngStream, gaussian_sample

logger = logging.getLogger(__name__)

DEFAULT_M_MAX = 74
DEFAULT_D_TAU = 32
DEFAULT_N_ACE = 3
ACE_INIT_SCALE = 0.02

ROLE_ACE = 0
ROLE_REPORT = 1
ROLE_PAD = 2

_TOKEN_PATTERN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str, m_max: int = DEFAULT_M_MAX) -> List[int]:
    """Map report text to vocabulary ids.

    Words and punctuation marks are separate tokens; unknown tokens map to
    UNK; empty text yields a single PAD.

    Args:
        text: Report text
        m_max: Maximum number of tokens kept

    Returns:
        Token ids, at least one
    """
    ids = [Vocabulary.TOKEN_TO_ID.get(tok, Vocabulary.UNK) for tok in _TOKEN_PATTERN.findall(text.lower())]
    return ids[:m_max] or [Vocabulary.PAD]


def pad_tokens(token_lists: Sequence[Sequence[int]]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Right-pad token lists into an id matrix and a padding mask (True = padding)."""
    width = max(len(tokens) for tokens in token_lists)
    ids = torch.full((len(token_lists), width), Vocabulary.PAD, dtype=torch.long)
    mask = torch.ones((len(token_lists), width), dtype=torch.bool)
    for row, tokens in enumerate(token_lists):
        ids[row, : len(tokens)] = torch.as_tensor(list(tokens), dtype=torch.long)
        mask[row, : len(tokens)] = False
    return ids, mask


class ReportEncoder(nn.Module):
    """Embedding table plus learned positional offsets: ids (M,) -> (M, d_tau)."""

    def __init__(self, d_tau: int = DEFAULT_D_TAU, m_max: int = DEFAULT_M_MAX, vocab_size: int = Vocabulary.size()):
        super().__init__()
        self.d_tau = d_tau
        self.m_max = m_max
        self.vocab_size = vocab_size
        self.token = nn.Embedding(vocab_size, d_tau)
        self.position = nn.Parameter(torch.randn(m_max, d_tau) * 0.02)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise ValueError(f"token id out of range [0, {self.vocab_size})")
        length = ids.shape[-1]
        if length > self.m_max:
            raise ShapeMismatchError("token sequence", (self.m_max,), (length,))
        return self.token(ids) + self.position[:length]


def encode_report(tokens: Sequence[int], encoder: ReportEncoder) -> torch.Tensor:
    """Report embedding c_p of shape (M, d_tau)."""
    return encoder(torch.as_tensor(list(tokens), dtype=torch.long))


def encode_reports(token_lists: Sequence[Sequence[int]], encoder: ReportEncoder) -> List[torch.Tensor]:
    """Encode several reports, one (M_i, d_tau) matrix each."""
    return [encode_report(tokens, encoder) for tokens in token_lists]


class AdaptiveConditionEmbedding(nn.Module):
    """Trainable rows c_s prepended to every report embedding."""

    def __init__(self, n_rows: int = DEFAULT_N_ACE, d_tau: int = DEFAULT_D_TAU, init: Optional[torch.Tensor] = None):
        super().__init__()
        if n_rows < 0:
            raise ValueError("n_rows must be >= 0")
        weight = init if init is not None else torch.zeros(n_rows, d_tau)
        if tuple(weight.shape) != (n_rows, d_tau):
            raise ShapeMismatchError("ACE init", (n_rows, d_tau), weight.shape)
        self.weight = nn.Parameter(weight.to(torch.get_default_dtype()).clone())

    @property
    def n_rows(self) -> int:
        """Number of rows N."""
        return self.weight.shape[0]

    def forward(self) -> torch.Tensor:
        return self.weight


def init_ace(n_rows: int, d_tau: int, stream: RngStream) -> AdaptiveConditionEmbedding:
    """ACE rows drawn i.i.d. from N(0, 0.02^2)."""
    if n_rows == 0:
        return AdaptiveConditionEmbedding(0, d_tau)
    init = ACE_INIT_SCALE * gaussian_sample(stream, (n_rows, d_tau))
    return AdaptiveConditionEmbedding(n_rows, d_tau, init=init)


@dataclass
class Condition:
    """Condition rows [c_s; c_p] and the role of each row."""

    embeddings: torch.Tensor
    roles: torch.Tensor

    @property
    def n_ace(self) -> int:
        """Leading ACE rows."""
        return int((self.roles == ROLE_ACE).sum())

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @staticmethod
    def stack(conditions: Sequence["Condition"]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Pad a batch of conditions.

        Returns:
            (B, L, d_tau) embeddings and a (B, L) key padding mask (True = padding)
        """
        width = max(len(c) for c in conditions)
        d_tau = conditions[0].embeddings.shape[1]
        rows = []
        mask = torch.ones((len(conditions), width), dtype=torch.bool)
        for i, cond in enumerate(conditions):
            pad = cond.embeddings.new_zeros((width - len(cond), d_tau))
            rows.append(torch.cat([cond.embeddings, pad]))
            mask[i, : len(cond)] = False
        return torch.stack(rows), mask


def build_condition(
    ace: Union[AdaptiveConditionEmbedding, torch.Tensor, None], report: torch.Tensor
) -> Condition:
    """Row-concatenate ACE rows and the report embedding.

    Raises:
        ShapeMismatchError: If the two widths differ
    """
    if isinstance(ace, AdaptiveConditionEmbedding):
        ace = ace.weight
    if ace is None or ace.shape[0] == 0:
        roles = torch.full((report.shape[0],), ROLE_REPORT, dtype=torch.long)
        return Condition(embeddings=report, roles=roles)
    if ace.shape[1] != report.shape[1]:
        raise ShapeMismatchError("condition width", (ace.shape[1],), (report.shape[1],))
    roles = torch.cat(
        [
            torch.full((ace.shape[0],), ROLE_ACE, dtype=torch.long),
            torch.full((report.shape[0],), ROLE_REPORT, dtype=torch.long),
        ]
    )
    return Condition(embeddings=torch.cat([ace, report]), roles=roles)


def batch_conditions(
    token_lists: Sequence[Sequence[int]],
    encoder: ReportEncoder,
    ace: Union[AdaptiveConditionEmbedding, torch.Tensor, None] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Encode reports, prepend ACE rows and pad into a batch."""
    return Condition.stack([build_condition(ace, rep) for rep in encode_reports(token_lists, encoder)])
