"""Tests for tokenization, the report encoder and condition assembly."""

import pytest
import torch

from pyphantomrl.config import Config
from pyphantomrl.constants import Vocabulary
from pyphantomrl.exceptions import ShapeMismatchError
from pyphantomrl.numcore import rng_stream, seeded
from pyphantomrl.textcond import (
    ROLE_ACE,
    ROLE_REPORT,
    AdaptiveConditionEmbedding,
    Condition,
    ReportEncoder,
    batch_conditions,
    build_condition,
    encode_report,
    init_ace,
    pad_tokens,
    tokenize,
)


def _encoder(d_tau: int = 32) -> ReportEncoder:
    with seeded(rng_stream(0, "test/encoder")):
        return ReportEncoder(d_tau=d_tau)


def test_tokenize_known_words():
    assert tokenize("no effusion .") == [2, 3, 18]


def test_tokenize_punctuation_without_spaces():
    assert tokenize("No effusion.") == [2, 3, 18]


def test_tokenize_unknown_word():
    assert tokenize("zzz") == [Vocabulary.UNK]


def test_tokenize_truncates_to_m_max():
    assert len(tokenize(" ".join(["lung"] * 100))) == 74
    assert Config().m_max == 74


def test_tokenize_empty_text():
    assert tokenize("") == [Vocabulary.PAD]


def test_pad_tokens_mask():
    ids, mask = pad_tokens([[2, 3], [4]])
    assert ids.tolist() == [[2, 3], [4, 0]]
    assert mask.tolist() == [[False, False], [False, True]]


def test_encoder_shape_and_determinism():
    """Same tokens give the same (M, d_tau) matrix."""
    encoder = _encoder()
    tokens = tokenize("the heart is enlarged .")
    first = encode_report(tokens, encoder)
    assert first.shape == (5, 32)
    assert torch.equal(first, encode_report(tokens, encoder))


def test_encoder_rejects_out_of_range_ids():
    with pytest.raises(ValueError):
        encode_report([Vocabulary.size()], _encoder())


def test_ace_defaults():
    ace = AdaptiveConditionEmbedding()
    assert ace.n_rows == 3
    assert ace.weight.shape == (3, 32)


def test_ace_init_is_deterministic():
    first = init_ace(3, 32, rng_stream(0, "rl/ace"))
    second = init_ace(3, 32, rng_stream(0, "rl/ace"))
    assert torch.equal(first.weight, second.weight)
    assert first.weight.abs().max() < 0.2


def test_condition_stacks_ace_above_report():
    """N=3 rows of ACE and M=10 report rows make a 13-row condition."""
    ace = init_ace(3, 32, rng_stream(0, "ace"))
    report = encode_report(tokenize("small opacity in the left lung . no device ."), _encoder())
    assert report.shape[0] == 10
    cond = build_condition(ace, report)
    assert cond.embeddings.shape == (13, 32)
    assert torch.equal(cond.embeddings[:3], ace.weight)
    assert torch.equal(cond.embeddings[3:], report)
    assert cond.n_ace == 3
    assert cond.roles.tolist() == [ROLE_ACE] * 3 + [ROLE_REPORT] * 10


def test_condition_without_ace_is_report():
    report = encode_report(tokenize("lungs clear ."), _encoder())
    assert torch.equal(build_condition(AdaptiveConditionEmbedding(0, 32), report).embeddings, report)
    assert torch.equal(build_condition(None, report).embeddings, report)


def test_condition_width_mismatch():
    ace = init_ace(2, 16, rng_stream(0, "ace"))
    report = encode_report([2, 3], _encoder(32))
    with pytest.raises(ShapeMismatchError):
        build_condition(ace, report)


def test_batch_conditions_pads():
    encoder = _encoder()
    ace = init_ace(2, 32, rng_stream(0, "ace"))
    cond, mask = batch_conditions([[2, 3, 18], [11, 12, 18, 2, 9]], encoder, ace)
    assert cond.shape == (2, 7, 32)
    assert mask.sum(dim=1).tolist() == [2, 0]
    assert torch.equal(cond[0, 5:], torch.zeros(2, 32))


def test_stack_single_condition_has_no_padding():
    report = encode_report([2, 3], _encoder())
    _, mask = Condition.stack([build_condition(None, report)])
    assert not mask.any()
