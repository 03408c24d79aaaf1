"""Speckle corruption synthesis and the adaptive noise-mixture augmentation.

Two distinct uses of per-pixel Gaussian fields live here:

* synthesis of speckle-corrupted observations ``y = m * s`` with
  ``m ~ N(1, alpha^2)``, where ``alpha`` controls noise strength and is
  jittered uniformly per image;
* the training-time augmentation ``m_hat * x + a_hat`` with
  ``m_hat ~ N(1, sigma^2)`` and ``a_hat ~ N(0, sigma^2)``, applied to
  noisy images and to latent feature maps alike, with ``sigma`` adapted
  to the statistics of the input.

All operations are pure functions of their inputs plus an explicit seed.
Tensors are never clipped here; clipping to [0, 1] happens only when
images are written to files.
"""

from dataclasses import dataclass

import torch

from .seeding import derive_seed

# Bounds for the input-adapted augmentation sigma.
SIGMA_MIN = 0.01
SIGMA_MAX = 0.5

DEFAULT_KAPPA = 0.25


@dataclass(frozen=True)
class NoiseSpec:
    """Noise parameters: speckle strength and fixed mixture sigmas.

    ``alpha_level`` is the standard deviation of the multiplicative
    speckle field; ``alpha_jitter`` is the half-width of the uniform
    per-image jitter on it. ``mult_sigma`` / ``add_sigma`` are optional
    fixed standard deviations for the two parts of a noise mixture, for
    callers that bypass the input-adapted rule.
    """

    alpha_level: float = 0.2
    alpha_jitter: float = 0.0
    mult_sigma: float = 0.0
    add_sigma: float = 0.0

    def __post_init__(self):
        if self.mult_sigma < 0 or self.add_sigma < 0:
            raise ValueError("mult_sigma and add_sigma must be >= 0")
        if self.alpha_level < 0:
            raise ValueError("alpha_level must be > 0 (0 only as the exact no-noise limit)")
        if self.alpha_jitter < 0:
            raise ValueError("alpha_jitter must be >= 0")
        if self.alpha_jitter > 0 and self.alpha_jitter >= self.alpha_level:
            raise ValueError("alpha_jitter must be < alpha_level so sampled alpha stays positive")


def _randn(shape, generator: torch.Generator, dtype=torch.float32, device=None) -> torch.Tensor:
    """Single chokepoint for raw Gaussian draws (lets tests count RNG use)."""
    return torch.randn(shape, generator=generator, dtype=dtype, device=device)


def _check_shape(shape) -> tuple:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d <= 0 for d in shape):
        raise ValueError(f"invalid field shape {shape}: all dimensions must be positive")
    return shape


def sample_field(shape, center: float, sigma: float, seed: int,
                 dtype=torch.float32, device=None) -> torch.Tensor:
    """Draw an i.i.d. Gaussian(center, sigma^2) field of the given shape.

    sigma = 0 returns a constant field of value ``center``. Identical
    (seed, sigma, shape, center) always produce bit-identical fields.
    """
    shape = _check_shape(shape)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return torch.full(shape, float(center), dtype=dtype, device=device)
    gen = torch.Generator(device=device or "cpu").manual_seed(int(seed))
    return center + sigma * _randn(shape, gen, dtype=dtype, device=device)


def speckle_alpha(spec: NoiseSpec, seed: int) -> float:
    """The per-image speckle strength that `synth_speckle` will use for this seed.

    Drawn uniformly from [alpha_level - alpha_jitter, alpha_level + alpha_jitter].
    """
    if spec.alpha_jitter == 0:
        return float(spec.alpha_level)
    gen = torch.Generator().manual_seed(derive_seed(seed, "alpha"))
    u = torch.rand((), generator=gen).item()
    return float(spec.alpha_level - spec.alpha_jitter + 2.0 * spec.alpha_jitter * u)


def synth_speckle(clean: torch.Tensor, spec: NoiseSpec, seed: int) -> torch.Tensor:
    """Corrupt a clean image with multiplicative speckle: y = m * s.

    ``m ~ N(1, alpha_img^2)`` per pixel, with ``alpha_img`` drawn once per
    image via `speckle_alpha`. The output is not clipped.
    """
    if clean.numel() == 0:
        raise ValueError("clean image is empty")
    if float(clean.min()) < 0.0 or float(clean.max()) > 1.0:
        raise ValueError("clean image values must lie in [0, 1]")
    alpha = speckle_alpha(spec, seed)
    m = sample_field(clean.shape, 1.0, alpha, derive_seed(seed, "speckle"),
                     dtype=clean.dtype, device=clean.device)
    return m * clean


def adaptive_sigma(image: torch.Tensor, kappa: float = DEFAULT_KAPPA) -> float:
    """Input-adapted mixture sigma: clamp(kappa * std(image), 0.01, 0.5).

    Population standard deviation over all elements. A constant image
    hits the 0.01 floor.
    """
    if image.numel() == 0:
        raise ValueError("image is empty")
    if kappa <= 0:
        raise ValueError("kappa must be > 0")
    std = float(torch.std(image.double(), correction=0))
    return min(max(kappa * std, SIGMA_MIN), SIGMA_MAX)


def noise_mixture(x: torch.Tensor, sigma, seed: int) -> torch.Tensor:
    """Apply the mixture ``m_hat * x + a_hat`` with both fields ~ N about (1, 0).

    ``sigma`` is a scalar, or a per-item tensor broadcastable against
    ``x`` (e.g. shape (B, 1, 1, 1) for a batch) so each batch item gets
    its own strength from one field draw. The two fields are independent.
    Differentiable with respect to ``x``; sigma = 0 is the exact identity.
    """
    if isinstance(sigma, (int, float)):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        if sigma == 0:
            return x
    elif torch.is_tensor(sigma) and bool((sigma < 0).any()):
        raise ValueError("sigma must be >= 0")
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    m_hat = 1.0 + sigma * _randn(x.shape, gen, dtype=x.dtype, device=x.device)
    a_hat = sigma * _randn(x.shape, gen, dtype=x.dtype, device=x.device)
    return m_hat * x + a_hat
