"""Shared fixtures: toy datasets and session-scoped trained models.

The toy setup used by several acceptance criteria: 32 synthetic 64x64
shape images, miniature widths [8, 16, 32, 64], 100 epochs, batch 8.
Training runs take ~40 s each, so trained models are session-scoped and
reused wherever possible.
"""

import time

import pytest
import torch

torch.set_num_threads(1)

import despeckle as d
from despeckle.noise import NoiseSpec
from despeckle.seeding import derive_seed

TOY_SEED = 99
TOY_CONTENT_SEED = 11
# lr raised from the full-scale default: 100 toy epochs are ~400 steps,
# versus thousands at full scale, and need larger steps to converge.
TOY_TRAIN_KWARGS = dict(epochs=100, batch_size=8, checkpoint_every=1000, lr_init=1e-2)


def corrupt_to_split(images, alpha, seed, ratio=0.8):
    """Speckle-corrupt clean images (keeping clean refs) and split them."""
    spec = NoiseSpec(alpha_level=alpha)
    noisy = []
    for i, item in enumerate(images):
        y = d.synth_speckle(item.values, spec, derive_seed(seed, "toy-synth", i))
        noisy.append(d.ImageTensor(values=y.clamp(0.0, 1.0), source_path=item.source_path,
                                   clean_ref=item.values, is_clean=False))
    return d.split(noisy, ratio, seed=seed)


def heldout_psnr(model, split_):
    """Mean (noisy, restored) PSNR against clean refs on the test split."""
    noisy_vals, restored_vals = [], []
    for item in split_.test:
        restored = model.denoise(item.values).clamp(0.0, 1.0)
        noisy_vals.append(d.psnr(item.values, item.clean_ref))
        restored_vals.append(d.psnr(restored, item.clean_ref))
    n = len(split_.test)
    return sum(noisy_vals) / n, sum(restored_vals) / n


@pytest.fixture(scope="session")
def toy_model_config():
    return d.ModelConfig(base_width=8, stage_widths=(8, 16, 32, 64),
                         stage_blocks=(1, 2, 2, 2), recon_blocks=4)


@pytest.fixture(scope="session")
def toy_images():
    return d.synthetic_shapes(32, 64, seed=TOY_CONTENT_SEED)


@pytest.fixture(scope="session")
def toy_split_02(toy_images):
    return corrupt_to_split(toy_images, 0.2, TOY_SEED)


@pytest.fixture(scope="session")
def toy_split_04(toy_images):
    return corrupt_to_split(toy_images, 0.4, TOY_SEED)


@pytest.fixture(scope="session")
def a3_run(toy_split_02, toy_model_config):
    """Full-model training at alpha = 0.2; reused by the latent-trend check."""
    cfg = d.TrainConfig(seed=TOY_SEED, **TOY_TRAIN_KWARGS)
    start = time.monotonic()
    state = d.fit(toy_split_02, toy_model_config, cfg)
    return {"state": state, "seconds": time.monotonic() - start, "config": cfg}


@pytest.fixture(scope="session")
def a4_runs(toy_split_04, toy_model_config):
    """The ablation trio at alpha = 0.4: full, no-recon-mixture, no-encoder-mixture."""
    out = {}
    for tag, enc, rec in [("full", True, True), ("no-recon-mixture", True, False),
                          ("no-encoder-mixture", False, True)]:
        cfg = d.TrainConfig(seed=TOY_SEED, encoder_mixture=enc, recon_mixture=rec,
                            **TOY_TRAIN_KWARGS)
        state = d.fit(toy_split_04, toy_model_config, cfg)
        out[tag] = state
    return out
