"""Image ingestion, normalization, splitting, and batching.

Images are single-channel luminance tensors of shape (H, W, 1) with
values in [0, 1], resized square on load. A raw float32 tensor format
("SPKT") is provided for lossless intermediates alongside 8-bit PNG.
"""

import json
import random
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError
from .seeding import derive_seed

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")

# Rec. 601 luminance weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SPKT_MAGIC = b"SPKT"


@dataclass
class ImageTensor:
    """An image plus its provenance.

    ``clean_ref`` is set only for synthesized data where the clean source
    is known. ``is_clean`` marks whether ``values`` itself is a clean
    (uncorrupted) image; real-world observations carry False.
    """

    values: torch.Tensor
    source_path: Optional[str] = None
    clean_ref: Optional["ImageTensor"] = None
    is_clean: bool = True

    @property
    def name(self) -> str:
        if self.source_path is None:
            return "<memory>"
        return Path(self.source_path).stem


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    split_ratio: float = 0.8
    seed: int = 0


def _check_resolution(resolution: int):
    if resolution <= 0 or resolution % 8 != 0:
        raise ValueError(f"resolution must be a positive multiple of 8, got {resolution}")


def _to_luminance(arr: np.ndarray) -> np.ndarray:
    """Collapse an HxW or HxWxC uint/float array to HxW luminance in [0, 1]."""
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        arr = arr.astype(np.float32) / 65535.0
    else:
        arr = arr.astype(np.float32)
    if arr.ndim == 2:
        return arr
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    r, g, b = LUMA_WEIGHTS
    return r * arr[:, :, 0] + g * arr[:, :, 1] + b * arr[:, :, 2]


def load_image(path, resolution: int) -> torch.Tensor:
    """Load one image file as an (R, R, 1) luminance tensor in [0, 1].

    Bilinear square resize; aspect ratio is not preserved.
    """
    _check_resolution(resolution)
    with Image.open(path) as img:
        if img.mode in ("RGBA", "P", "CMYK", "LA"):
            img = img.convert("RGB")
        arr = np.asarray(img)
    lum = _to_luminance(arr)
    t = torch.from_numpy(np.ascontiguousarray(lum)).unsqueeze(0).unsqueeze(0)
    if t.shape[-2:] != (resolution, resolution):
        t = F.interpolate(t, size=(resolution, resolution), mode="bilinear",
                          align_corners=False)
    t = t.clamp_(0.0, 1.0)
    return t[0, 0].unsqueeze(-1).contiguous()


def load_folder(path, resolution: int = 256, clean: bool = True) -> list:
    """Load every decodable image under ``path`` (sorted by filename).

    Undecodable files are skipped with a warning; an empty result is an
    error.
    """
    folder = Path(path)
    if not folder.is_dir():
        raise DataError(f"not a directory: {folder}")
    files = sorted(p for p in folder.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file())
    if not files:
        raise DataError(f"no image files found in {folder}")
    images = []
    for p in files:
        try:
            values = load_image(p, resolution)
        except Exception as exc:  # undecodable file
            warnings.warn(f"skipping undecodable image {p}: {exc}")
            continue
        images.append(ImageTensor(values=values, source_path=str(p), is_clean=clean))
    if not images:
        raise DataError(f"no decodable images in {folder}")
    return images


def split(dataset: list, ratio: float, seed: int, contiguous: bool = False) -> DatasetSplit:
    """Deterministic train/test split: seeded shuffle then prefix/suffix cut.

    |train| = round(ratio * N). ``contiguous`` skips the shuffle and takes
    the literal final (1 - ratio) fraction as the test set.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    if len(dataset) < 2:
        raise ValueError("need at least 2 items to split")
    order = list(dataset)
    if not contiguous:
        random.Random(derive_seed(seed, "split")).shuffle(order)
    n_train = int(round(ratio * len(order)))
    n_train = min(max(n_train, 1), len(order) - 1)
    return DatasetSplit(train=order[:n_train], test=order[n_train:],
                        split_ratio=ratio, seed=seed)


def make_batches(split_: DatasetSplit, batch_size: int, seed: int, epoch: int) -> list:
    """Epoch-seeded shuffle of the train set, chunked; the partial tail batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(split_.train)
    random.Random(derive_seed(seed, "batches", epoch)).shuffle(order)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def stack_batch(items: list) -> torch.Tensor:
    """Stack a list of ImageTensor into a (B, H, W, C) tensor."""
    return torch.stack([it.values for it in items], dim=0)


def save_png(tensor: torch.Tensor, path):
    """Write an (H, W, 1) or (H, W) tensor as an 8-bit grayscale PNG.

    Values are clipped to [0, 1] here and only here.
    """
    arr = tensor.detach().cpu().numpy()
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise ValueError("save_png expects a single-channel image")
        arr = arr[:, :, 0]
    arr = np.clip(arr, 0.0, 1.0)
    img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def write_tensor(tensor: torch.Tensor, path):
    """Write a raw float32 little-endian tensor: "SPKT", u32 H, u32 W, u32 C."""
    arr = tensor.detach().cpu().numpy().astype("<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("write_tensor expects an HxWxC tensor")
    h, w, c = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(SPKT_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(arr.tobytes(order="C"))


def read_tensor(path) -> torch.Tensor:
    """Read a tensor written by `write_tensor`. Bit-exact round trip."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SPKT_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {SPKT_MAGIC!r}")
        h, w, c = struct.unpack("<III", f.read(12))
        payload = f.read(h * w * c * 4)
    if len(payload) != h * w * c * 4:
        raise DataError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return torch.from_numpy(arr.copy())


def synthetic_shapes(count: int, resolution: int, seed: int) -> list:
    """Generate toy shape images: smooth shaded blobs on a dim constant field.

    Content is deliberately smooth (analytic Gaussian bumps) so it
    separates from per-pixel noise in frequency, the way shading in
    photographs of lit objects does.
    """
    _check_resolution(resolution)
    rng = np.random.default_rng(derive_seed(seed, "shapes"))
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64) / resolution
    images = []
    for k in range(count):
        img = np.full((resolution, resolution), 0.15)
        for _ in range(int(rng.integers(2, 5))):
            cx, cy = rng.uniform(0.15, 0.85, size=2)
            ax, ay = rng.uniform(0.15, 0.35, size=2)
            base = rng.uniform(0.4, 0.9)
            r2 = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
            img = np.maximum(img, base * np.exp(-r2))
        values = torch.from_numpy(img).clamp(0, 1).unsqueeze(-1).to(torch.float32)
        images.append(ImageTensor(values=values, source_path=f"shape-{k:03d}.synthetic"))
    return images


def write_manifest(rows: list, path):
    """Write a synthesis manifest (list of dicts) as deterministic JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
        f.write("\n")
