"""Tests for the reward networks, reward arithmetic and held-out fit reports."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from pyphantomrl.constants import PostureRange
from pyphantomrl.exceptions import FrozenModelError, NonFiniteError, ShapeMismatchError
from pyphantomrl.models import PhantomAttrs, PostureParams, RewardBreakdown, RewardWeights
from pyphantomrl.numcore import ParamStore, as_image_batch, rng_stream, seeded
from pyphantomrl.phantom import apply_affine, images_of, make_dataset, render_canonical
from pyphantomrl.rewards import (
    ClassifierModel,
    DualEncoder,
    PostureModel,
    RewardModels,
    accuracy,
    estimate_posture,
    estimate_postures,
    evaluate_classifier,
    evaluate_dual_encoder,
    evaluate_posture,
    fit_classifier,
    fit_dual_encoder,
    fit_posture,
    reward_align,
    reward_consist,
    reward_diag,
    score_pairs,
    summarize_reports,
    total_reward,
)


def test_reward_align_identity():
    assert reward_align(PostureParams.identity()) == 0.0


def test_reward_align_hand_value():
    psi = PostureParams(s_x=1.2, s_y=0.9, t_x=0.3, t_y=0.4, theta=math.pi / 2)
    assert reward_align(psi) == pytest.approx(-0.95)


def test_reward_align_never_positive():
    stream = rng_stream(0, "align")
    for row in stream.uniform((200, 5), -1.0, 2.0):
        assert reward_align(PostureParams.from_vector(row)) <= 0.0


def test_accuracy_hard_and_soft():
    assert accuracy([0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0]) == 1.0
    assert accuracy([0.9, 0.1, 0.8, 0.7], [1, 0, 1, 0]) == 0.75
    assert accuracy([0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0], soft=True) == pytest.approx(0.85)
    with pytest.raises(ShapeMismatchError):
        accuracy([0.5, 0.5], [1, 0])


def test_diagnostic_gap_arithmetic():
    """4/4 correct against 3/4 correct is a +0.25 diagnostic reward."""
    labels = [1, 0, 1, 0]
    ours = accuracy([0.9, 0.1, 0.8, 0.2], labels)
    theirs = accuracy([0.9, 0.1, 0.8, 0.7], labels)
    assert ours - theirs == pytest.approx(0.25)


def test_reward_weights_default():
    assert RewardWeights().as_tuple() == (1.0, 10.0, 10.0)


def test_total_reward_arithmetic():
    assert RewardBreakdown(r_align=-0.2, r_diag=0.1, r_consist=0.05).total == pytest.approx(1.3)
    assert RewardBreakdown(r_align=0.0, r_diag=0.0, r_consist=0.0).total == 0.0


def test_identical_images_have_zero_comparative_rewards(reward_models):
    """x equal to the anchor image scores zero diagnostic and consistency reward."""
    image = render_canonical(PhantomAttrs(device=True), 16)
    labels = [0, 0, 0, 1]
    assert reward_diag(image, image, labels, reward_models.classifier) == 0.0
    assert reward_consist(image, image, "device present .", reward_models.dual_encoder) == 0.0
    breakdown = total_reward(image, image, "device present .", labels, reward_models)
    assert breakdown.r_diag == 0.0 and breakdown.r_consist == 0.0
    assert breakdown.total == pytest.approx(breakdown.r_align)


def test_comparative_rewards_flip_sign_when_swapped(reward_models):
    """Swapping the image and the anchor image negates r_diag and r_consist exactly."""
    _, test, _ = make_dataset(0, n_train=1, n_test=6, image_size=16)
    for a, b in zip(test, reversed(test)):
        assert reward_diag(a.image, b.image, a.labels, reward_models.classifier, soft=True) == -reward_diag(
            b.image, a.image, a.labels, reward_models.classifier, soft=True
        )
        assert reward_consist(a.image, b.image, a.report, reward_models.dual_encoder) == -reward_consist(
            b.image, a.image, a.report, reward_models.dual_encoder
        )


def test_reward_ranges(reward_models):
    _, test, _ = make_dataset(0, n_train=1, n_test=6, image_size=16)
    for a, b in zip(test, reversed(test)):
        diag = reward_diag(a.image, b.image, a.labels, reward_models.classifier)
        consist = reward_consist(a.image, b.image, a.report, reward_models.dual_encoder)
        assert -1.0 <= diag <= 1.0
        assert -2.0 <= consist <= 2.0


def test_direct_feedback_drops_anchor_term(reward_models):
    image = render_canonical(PhantomAttrs(), 16)
    absolute = reward_consist(image, image, "lungs clear .", reward_models.dual_encoder, comparative=False)
    text = reward_models.dual_encoder.encode_reports(["lungs clear ."])[0]
    img = reward_models.dual_encoder.encode_images(as_image_batch([image]))[0]
    assert absolute == pytest.approx(float(img @ text), abs=1e-5)


def test_embeddings_are_unit_norm(reward_models):
    encoder = reward_models.dual_encoder
    images = as_image_batch([render_canonical(PhantomAttrs(), 16)] * 2)
    with torch.no_grad():
        norms = torch.cat(
            [encoder.encode_images(images).norm(dim=1), encoder.encode_reports(["no effusion .", "x"]).norm(dim=1)]
        )
    assert torch.allclose(norms, torch.ones(4), atol=1e-5)


def test_classifier_probabilities(reward_models):
    images = as_image_batch([render_canonical(PhantomAttrs(), 16)] * 3)
    with torch.no_grad():
        probs = reward_models.classifier.probabilities(images)
    assert probs.shape == (3, 4)
    assert ((probs > 0) & (probs < 1)).all()


def test_posture_estimates_clamped_and_stable(reward_models):
    image = render_canonical(PhantomAttrs(), 16)
    first = estimate_posture(reward_models.posture, image)
    assert first == estimate_posture(reward_models.posture, image)
    lo, hi = PostureRange.CLAMP_SCALE
    assert lo <= first.s_x <= hi and lo <= first.s_y <= hi
    assert abs(first.t_x) <= PostureRange.CLAMP_TRANSLATION
    assert abs(first.theta) <= PostureRange.CLAMP_ROTATION


def test_posture_rejects_nan_images(reward_models):
    image = np.full((16, 16), np.nan, dtype=np.float32)
    with pytest.raises(NonFiniteError):
        estimate_postures(reward_models.posture, as_image_batch([image]))


def test_score_pairs_needs_frozen_models(reward_models):
    reward_models.classifier.head.weight.requires_grad_(True)
    image = render_canonical(PhantomAttrs(), 16)
    with pytest.raises(FrozenModelError):
        score_pairs([image], [image], ["lungs clear ."], [[0, 0, 0, 0]], reward_models, RewardWeights())


def test_score_pairs_matches_single_pairs(reward_models):
    _, test, _ = make_dataset(1, n_train=1, n_test=4, image_size=16)
    images = images_of(test)
    anchors = images[::-1].copy()
    batch = score_pairs(images, anchors, [s.report for s in test], [s.labels for s in test], reward_models, RewardWeights())
    for i, sample in enumerate(test):
        single = total_reward(images[i], anchors[i], sample.report, sample.labels, reward_models)
        assert single.r_align == pytest.approx(batch[i].r_align, abs=1e-5)
        assert single.r_consist == pytest.approx(batch[i].r_consist, abs=1e-5)


def _state_hash(module):
    return ParamStore.from_modules({"m": module}, frozen={"m"}).state_hash()


def test_fitting_is_deterministic():
    """Same data and stream give the same fitted classifier."""
    train, _, _ = make_dataset(0, n_train=16, n_test=1, image_size=16)
    images = as_image_batch(images_of(train))
    labels = [s.labels for s in train]
    first = fit_classifier(images, labels, rng_stream(0, "clf"), epochs=1, batch_size=8)
    second = fit_classifier(images, labels, rng_stream(0, "clf"), epochs=1, batch_size=8)
    assert _state_hash(first) == _state_hash(second)
    assert not any(p.requires_grad for p in first.parameters())


def test_fit_reports_and_summary():
    train, test, _ = make_dataset(0, n_train=16, n_test=8, image_size=16)
    images = as_image_batch(images_of(train))
    test_images = as_image_batch(images_of(test))
    posture = fit_posture(images, [s.psi_true for s in train], rng_stream(0, "p"), epochs=1, batch_size=8)
    classifier = fit_classifier(images, [s.labels for s in train], rng_stream(0, "c"), epochs=1, batch_size=8)
    dual = fit_dual_encoder(images, [s.report for s in train], rng_stream(0, "d"), epochs=1, batch_size=8, d_embed=8)

    posture_report = evaluate_posture(posture, test_images, [s.psi_true for s in test], 16)
    classifier_report = evaluate_classifier(classifier, test_images, [s.labels for s in test])
    dual_report = evaluate_dual_encoder(dual, test_images, [s.report for s in test], [s.attrs for s in test], rng_stream(0, "r"))
    assert posture_report.n_samples == 8
    assert set(classifier_report.per_class_auroc) == {"effusion", "cardiomegaly", "opacity", "device"}
    assert 0.0 <= dual_report.own_report_preference <= 1.0

    models = RewardModels(
        posture=posture,
        classifier=classifier,
        dual_encoder=dual,
        reports={"posture": posture_report.model_dump(), "dual_encoder": dual_report.model_dump()},
    )
    rows = summarize_reports(models)
    assert [name for name, _, _ in rows] == ["posture", "dual_encoder"]


def test_dual_encoder_needs_pairs():
    with pytest.raises(ValueError):
        fit_dual_encoder(torch.zeros(1, 1, 16, 16), ["lungs clear ."], rng_stream(0, "d"))


@pytest.mark.slow
def test_posture_regressor_gate():
    """Held-out posture errors within |t| 0.02, theta 0.02 rad, scale 0.03."""
    train, test, _ = make_dataset(0, n_train=3000, n_test=300, image_size=32)
    model = fit_posture(as_image_batch(images_of(train)), [s.psi_true for s in train], rng_stream(0, "gate/p"))
    report = evaluate_posture(model, as_image_batch(images_of(test)), [s.psi_true for s in test], 32)
    assert report.passed, report
    # Known posture applied to a canonical phantom is recovered.
    psi = PostureParams(s_x=1.1, s_y=0.92, t_x=0.05, t_y=-0.04, theta=0.1)
    estimate = estimate_posture(model, apply_affine(render_canonical(PhantomAttrs(), 32), psi))
    assert np.allclose(estimate.as_vector(), psi.as_vector(), atol=0.03)


@pytest.mark.slow
def test_classifier_gate():
    """Held-out per-class AUROC at least 0.95."""
    train, test, _ = make_dataset(0, n_train=3000, n_test=500, image_size=32)
    model = fit_classifier(as_image_batch(images_of(train)), [s.labels for s in train], rng_stream(0, "gate/c"))
    report = evaluate_classifier(model, as_image_batch(images_of(test)), [s.labels for s in test])
    assert report.passed, report


@pytest.mark.slow
def test_dual_encoder_gate():
    """Top-1 retrieval among 32 at least 80%; own report preferred in 90% of cases."""
    train, test, _ = make_dataset(0, n_train=3000, n_test=512, image_size=32)
    model = fit_dual_encoder(as_image_batch(images_of(train)), [s.report for s in train], rng_stream(0, "gate/d"))
    report = evaluate_dual_encoder(
        model, as_image_batch(images_of(test)), [s.report for s in test], [s.attrs for s in test], rng_stream(0, "gate/r")
    )
    assert report.passed, report


def _random_images(n=3, size=16):
    return as_image_batch(rng_stream(0, "fd/images").uniform((n, size, size)))


def test_classifier_gradients_match_finite_differences(float64, finite_difference_check):
    with seeded(rng_stream(0, "fd/classifier")):
        model = ClassifierModel(16)
    images = _random_images()
    targets = torch.tensor([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 1.0]])
    store = ParamStore.from_modules({"classifier": model})
    finite_difference_check(lambda _: F.binary_cross_entropy_with_logits(model(images), targets), store)


def test_posture_gradients_match_finite_differences(float64, finite_difference_check):
    with seeded(rng_stream(0, "fd/posture")):
        model = PostureModel(16)
    images = _random_images()
    store = ParamStore.from_modules({"posture": model})
    finite_difference_check(lambda _: (model(images) ** 2).mean(), store)


def test_dual_encoder_gradients_match_finite_differences(float64, finite_difference_check):
    with seeded(rng_stream(0, "fd/dual")):
        model = DualEncoder(16, d_embed=8, m_max=24)
    images = _random_images()
    reports = ["no effusion .", "small opacity in the left lung .", "device present ."]
    store = ParamStore.from_modules({"dual": model})
    finite_difference_check(lambda _: (model.encode_images(images) @ model.encode_reports(reports).T).trace(), store)
