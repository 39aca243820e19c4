"""Shared fixtures: tiny configs, float64 precision and small untrained models."""

import pytest
import torch

from pyphantomrl.config import Config
from pyphantomrl.diffusion import build_generator, make_schedule
from pyphantomrl.numcore import precision, rng_stream, seeded
from pyphantomrl.phantom import make_dataset
from pyphantomrl.rewards import ClassifierModel, DualEncoder, PostureModel, RewardModels, freeze

TINY = {
    "image_size": 16,
    "T": 3,
    "d_model": 16,
    "d_tau": 8,
    "n_ace": 2,
    "m_max": 24,
    "batch_size": 4,
    "rl_steps": 2,
    "n_train": 24,
    "n_test": 12,
    "canonical_k": 8,
    "pretrain_steps": 2,
    "pretrain_batch": 4,
    "reward_epochs": 1,
    "reward_batch": 8,
    "d_embed": 8,
    "checkpoint_every": 1,
    "eval_reports": 4,
    "ssim_pairs": 6,
}


@pytest.fixture
def float64():
    """Run the test body with float64 as the default dtype."""
    with precision("float64"):
        yield


@pytest.fixture
def tiny_config(tmp_path):
    """Desk-sized config writing into a temporary directory."""
    return Config(output_dir=str(tmp_path / "run"), **TINY)


@pytest.fixture
def tiny_overrides(tmp_path):
    """The tiny config as command-line overrides."""
    return [f"{key}={value}" for key, value in TINY.items()] + [f"output_dir={tmp_path / 'run'}"]


@pytest.fixture
def tiny_schedule():
    return make_schedule(3, 0.1, 0.3)


@pytest.fixture
def tiny_generator():
    """Untrained 16px generator."""
    return build_generator(16, 16, 8, 24, rng_stream(0, "test/generator"))


@pytest.fixture
def tiny_dataset():
    """(train, test, manifest) of 16px phantoms."""
    return make_dataset(0, n_train=8, n_test=4, image_size=16)


@pytest.fixture
def reward_models():
    """Untrained but frozen 16px reward models."""
    with seeded(rng_stream(0, "test/rewards")):
        models = RewardModels(
            posture=freeze(PostureModel(16)),
            classifier=freeze(ClassifierModel(16)),
            dual_encoder=freeze(DualEncoder(16, d_embed=8, m_max=24)),
        )
    return models


@pytest.fixture(autouse=True)
def restore_default_dtype():
    """Keep the default dtype from leaking between tests."""
    dtype = torch.get_default_dtype()
    yield
    torch.set_default_dtype(dtype)


@pytest.fixture
def finite_difference_check():
    """Compare gradients_of against central differences on a few entries per tensor."""
    from pyphantomrl.numcore import gradients_of

    def check(loss, store, per_tensor=4, h=1e-4):
        grads = gradients_of(loss, store)
        for k, (name, tensor) in enumerate(store.trainable().items()):
            flat = tensor.detach().view(-1)
            picks = rng_stream(k, f"test/fd/{name}").integers(0, flat.numel(), (per_tensor,))
            for i in picks.tolist():
                with torch.no_grad():
                    original = flat[i].item()
                    flat[i] = original + h
                    up = loss(store).item()
                    flat[i] = original - h
                    down = loss(store).item()
                    flat[i] = original
                numeric = (up - down) / (2 * h)
                analytic = grads[name].view(-1)[i].item()
                assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), 1e-4), name

    return check
