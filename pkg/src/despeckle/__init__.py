"""Self-supervised speckle removal: synthesis, dual-path training, evaluation."""

from .data import (DatasetSplit, ImageTensor, load_folder, load_image, make_batches,
                   read_tensor, save_png, split, stack_batch, synthetic_shapes,
                   write_tensor)
from .errors import ConfigError, DataError, NumericsError
from .evaluation import (EvalReport, LatentStats, baseline_filter, evaluate,
                         latent_distances, latent_reference, latent_robustness, psnr)
from .model import (ModelConfig, SpeckleDenoiser, count_flops, init_model,
                    load_checkpoint, measure_flops, save_checkpoint)
from .noise import (NoiseSpec, adaptive_sigma, noise_mixture, sample_field,
                    speckle_alpha, synth_speckle)
from .seeding import derive_seed
from .train import (LossBundle, TrainConfig, TrainState, agreement_loss,
                    clip_gradient_norm, fit, lr_schedule, reconstruction_loss,
                    train_step)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "NumericsError",
    "DatasetSplit", "ImageTensor", "load_folder", "load_image", "make_batches",
    "read_tensor", "save_png", "split", "stack_batch", "synthetic_shapes",
    "write_tensor",
    "EvalReport", "LatentStats", "baseline_filter", "evaluate",
    "latent_distances", "latent_reference", "latent_robustness", "psnr",
    "ModelConfig", "SpeckleDenoiser", "count_flops", "init_model",
    "load_checkpoint", "measure_flops", "save_checkpoint",
    "NoiseSpec", "adaptive_sigma", "noise_mixture", "sample_field",
    "speckle_alpha", "synth_speckle",
    "derive_seed",
    "LossBundle", "TrainConfig", "TrainState", "agreement_loss",
    "clip_gradient_norm", "fit", "lr_schedule", "reconstruction_loss", "train_step",
    "__version__",
]
