"""PSNR tables, latent robustness statistics, and classical-filter baselines."""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from scipy import ndimage

from .data import DatasetSplit, save_png
from .errors import DataError
from .noise import NoiseSpec, synth_speckle
from .seeding import derive_seed

PSNR_CAP = 99.0
FILTER_KINDS = ("gaussian", "median", "lee")


@dataclass(frozen=True)
class EvalReport:
    per_image: list  # (id, psnr_noisy, psnr_restored) tuples
    mean_noisy: float
    mean_restored: float
    delta: float


@dataclass(frozen=True)
class LatentStats:
    z_ref: torch.Tensor
    d: list
    variance_d: float
    D: int


def _values(image) -> torch.Tensor:
    if torch.is_tensor(image):
        return image
    return image.values


def psnr(a, b, max_val: float = 1.0) -> float:
    """10*log10(max_val^2 / MSE) in dB; equal inputs give +inf."""
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if max_val <= 0:
        raise ValueError("max_val must be > 0")
    mse = float(torch.mean((a.double() - b.double()) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def latent_reference(latents: list) -> torch.Tensor:
    """Elementwise mean latent, z_ref = (1/N) sum_j z_j."""
    if not latents:
        raise ValueError("need at least one latent")
    if any(_values(z).shape != _values(latents[0]).shape for z in latents):
        raise ValueError("latent shapes differ")
    stacked = torch.stack([_values(z).double() for z in latents], dim=0)
    return stacked.mean(dim=0)


def latent_distances(latents: list, z_ref: torch.Tensor) -> LatentStats:
    """Per-sample RMS distance to z_ref and the population variance of those distances.

    d_j = sqrt((1/D) sum_i (z_i^j - z_i^ref)^2) with D the full element count.
    """
    z_ref = _values(z_ref).double()
    d = []
    for z in latents:
        z = _values(z).double()
        if z.shape != z_ref.shape:
            raise ValueError("latent/reference shape mismatch")
        d.append(float(torch.sqrt(torch.mean((z - z_ref) ** 2))))
    n = len(d)
    if n == 0:
        raise ValueError("need at least one latent")
    mean_d = sum(d) / n
    variance = sum((x - mean_d) ** 2 for x in d) / n
    return LatentStats(z_ref=z_ref, d=d, variance_d=variance, D=int(z_ref.numel()))


def _item_id(item, index: int) -> str:
    name = item.name
    return name if item.source_path is not None else f"item{index:03d}"


def evaluate(model, split: DatasetSplit, noise: NoiseSpec, seed: int,
             out_dir=None) -> EvalReport:
    """Corrupt each clean test image with a fixed eval seed, denoise, tabulate PSNR.

    The same seed therefore gives identical noisy inputs to every method
    under comparison. When ``out_dir`` is set, writes report.json,
    report.csv, and the restored PNGs.
    """
    if not split.test:
        raise DataError("test split is empty")
    rows = []
    restored_files = []
    for i, item in enumerate(split.test):
        if not item.is_clean:
            raise DataError(f"test item {_item_id(item, i)} has no clean reference; "
                            "evaluation needs clean test images to corrupt")
        clean = item.values
        noisy = synth_speckle(clean, noise, derive_seed(seed, "eval", i)).clamp(0.0, 1.0)
        restored = model.denoise(noisy).clamp(0.0, 1.0)
        rows.append((_item_id(item, i), psnr(noisy, clean), psnr(restored, clean)))
        restored_files.append(restored)
    n = len(rows)
    mean_noisy = sum(r[1] for r in rows) / n
    mean_restored = sum(r[2] for r in rows) / n
    report = EvalReport(per_image=rows, mean_noisy=mean_noisy,
                        mean_restored=mean_restored, delta=mean_restored - mean_noisy)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report(report, out_dir)
        for (row, restored) in zip(rows, restored_files):
            save_png(restored, out_dir / f"{row[0]}_restored.png")
    return report


def _cap(value: float) -> float:
    return min(value, PSNR_CAP)


def write_report(report: EvalReport, out_dir):
    """Write report.json and report.csv; infinite PSNRs are reported as 99 dB."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "per_image": [{"id": r[0], "psnr_noisy": _cap(r[1]), "psnr_restored": _cap(r[2])}
                      for r in report.per_image],
        "mean_noisy": _cap(report.mean_noisy),
        "mean_restored": _cap(report.mean_restored),
        "delta": _cap(report.mean_restored) - _cap(report.mean_noisy),
    }
    with open(out_dir / "report.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "psnr_noisy", "psnr_restored"])
        for r in report.per_image:
            writer.writerow([r[0], repr(_cap(r[1])), repr(_cap(r[2]))])


def latent_robustness(model, split: DatasetSplit, noise: NoiseSpec,
                      seed: int) -> LatentStats:
    """Latent spread of the test set under the given corruption level.

    Uses the same per-item eval seeds as evaluate(), so the latents come
    from the identical noisy images the PSNR table saw.
    """
    if not split.test:
        raise DataError("test split is empty")
    latents = []
    with torch.no_grad():
        for i, item in enumerate(split.test):
            if not item.is_clean:
                raise DataError("latent robustness needs clean test images to corrupt")
            noisy = synth_speckle(item.values, noise, derive_seed(seed, "eval", i))
            latents.append(model.encode(noisy.clamp(0.0, 1.0)))
    return latent_distances(latents, latent_reference(latents))


def write_latent_stats(stats: LatentStats, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"d": stats.d, "variance_d": stats.variance_d, "D": stats.D,
           "mean_d": sum(stats.d) / len(stats.d)}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _check_window(window: int):
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")


def baseline_filter(image, kind: str, window: int = 5) -> torch.Tensor:
    """Classical local filters used as comparison rows: gaussian, median, lee."""
    _check_window(window)
    if kind not in FILTER_KINDS:
        raise ValueError(f"unknown filter kind {kind!r}; expected one of {FILTER_KINDS}")
    x = _values(image)
    arr = x.detach().cpu().double().numpy()
    squeeze = arr.ndim == 3
    if squeeze:
        if arr.shape[2] != 1:
            raise ValueError("baseline filters expect a single channel")
        arr = arr[:, :, 0]
    if kind == "gaussian":
        out = ndimage.gaussian_filter(arr, sigma=(window - 1) / 4.0, truncate=2.0)
    elif kind == "median":
        out = ndimage.median_filter(arr, size=window)
    else:
        out = _lee_filter(arr, window)
    if squeeze:
        out = out[:, :, None]
    return torch.from_numpy(out).to(x.dtype)


def _lee_filter(arr, window: int):
    """Lee's local-statistics filter for multiplicative noise.

    The noise coefficient of variation Cu^2 is estimated as the median of
    the local var/mean^2 ratio over sufficiently bright pixels, then each
    pixel blends its local mean with itself by the usual adaptive gain.
    """
    import numpy as np

    mean = ndimage.uniform_filter(arr, size=window)
    mean_sq = ndimage.uniform_filter(arr * arr, size=window)
    var = np.maximum(mean_sq - mean * mean, 0.0)
    bright = mean > 0.05
    if bright.any():
        cu2 = float(np.median(var[bright] / (mean[bright] ** 2)))
    else:
        cu2 = 0.0
    signal_var = np.maximum(var - cu2 * mean * mean, 0.0) / (1.0 + cu2)
    gain = signal_var / np.maximum(signal_var + cu2 * mean * mean, 1e-12)
    return mean + gain * (arr - mean)
