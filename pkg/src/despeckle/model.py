"""Encoder and reconstruction networks.

The encoder is a ResUNet: a ConvBlock stem, four residual stages (the
last three downsample by 2), and three upsample-and-concat decoder
levels back to full resolution, finishing with a non-affine instance
normalization so the latent scale is canonical. The reconstruction head
is a short stack of ConvBlocks plus a final projection back to image
space. Training-mode forward passes inject the noise mixture on the
input image and on the latent; inference is noise-free and fully
deterministic.

Tensors are channel-last at the public boundary ((H, W, C) or
(B, H, W, C)); NCHW is used internally.
"""

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError
from .noise import noise_mixture

LEAKY_SLOPE = 0.1

CHECKPOINT_MAGIC = b"SPKC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 32
    stage_widths: tuple = (32, 64, 128, 256)
    stage_blocks: tuple = (1, 2, 2, 2)
    recon_blocks: int = 4
    input_channels: int = 1
    latent_channels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        if self.latent_channels is None:
            object.__setattr__(self, "latent_channels", self.base_width)
        if len(self.stage_widths) != 4 or len(self.stage_blocks) != 4:
            raise ValueError("expected exactly 4 stages (widths and block counts)")
        if any(a >= b for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ValueError("stage widths must be strictly increasing")
        if self.base_width != self.stage_widths[0]:
            raise ValueError("base_width must equal the first stage width")
        if self.latent_channels != self.stage_widths[0]:
            raise ValueError("latent_channels must equal the first stage width")
        if self.recon_blocks < 1 or self.input_channels < 1:
            raise ValueError("recon_blocks and input_channels must be >= 1")
        if any(b < 1 for b in self.stage_blocks):
            raise ValueError("every stage needs at least one block")


class ConvBlock(nn.Module):
    """3x3 conv -> instance norm -> leaky ReLU."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), LEAKY_SLOPE)


class ResidualBlock(nn.Module):
    """Two ConvBlocks plus a skip, projected 1x1 when shape changes."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.block1 = ConvBlock(in_ch, out_ch, stride=stride)
        self.block2 = ConvBlock(out_ch, out_ch)
        if in_ch != out_ch or stride != 1:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        return self.block2(self.block1(x)) + self.skip(x)


class ResUNetEncoder(nn.Module):
    """Residual U-Net producing a full-resolution latent feature map."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = config.stage_widths
        self.stem = ConvBlock(config.input_channels, widths[0])
        stages = []
        prev = widths[0]
        for i, (w, n) in enumerate(zip(widths, config.stage_blocks)):
            stride = 1 if i == 0 else 2
            blocks = [ResidualBlock(prev, w, stride=stride)]
            blocks += [ResidualBlock(w, w) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
            prev = w
        self.stages = nn.ModuleList(stages)
        decoders = []
        for i in range(len(widths) - 1, 0, -1):
            decoders.append(nn.Sequential(
                ConvBlock(widths[i] + widths[i - 1], widths[i - 1]),
                ConvBlock(widths[i - 1], widths[i - 1]),
            ))
        self.decoders = nn.ModuleList(decoders)
        self.out_norm = nn.InstanceNorm2d(config.latent_channels, affine=False)

    def forward(self, x):
        h = self.stem(x)
        skips = []
        for stage in self.stages:
            h = stage(h)
            skips.append(h)
        h = skips[-1]
        for level, dec in enumerate(self.decoders):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.cat([h, skips[-2 - level]], dim=1)
            h = dec(h)
        return self.out_norm(h)


class ReconstructionHead(nn.Module):
    """ConvBlock stack mapping the latent back to image space; no output activation."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        ch = config.latent_channels
        self.blocks = nn.Sequential(*[ConvBlock(ch, ch) for _ in range(config.recon_blocks)])
        self.out_conv = nn.Conv2d(ch, config.input_channels, 3, padding=1)

    def forward(self, z):
        return self.out_conv(self.blocks(z))


def _to_nchw(t: torch.Tensor):
    """(H, W, C) or (B, H, W, C) channel-last -> NCHW plus a single-image flag."""
    if t.dim() == 3:
        return t.permute(2, 0, 1).unsqueeze(0), True
    if t.dim() == 4:
        return t.permute(0, 3, 1, 2), False
    raise ValueError(f"expected an (H, W, C) or (B, H, W, C) tensor, got shape {tuple(t.shape)}")


def _from_nchw(t: torch.Tensor, single: bool):
    out = t.permute(0, 2, 3, 1)
    return out[0] if single else out


def _sigma_arg(sigma, batch: int):
    """Normalize a scalar or per-item sigma into something noise_mixture accepts."""
    if isinstance(sigma, (int, float)):
        return float(sigma)
    s = torch.as_tensor(sigma, dtype=torch.float32)
    if s.dim() == 0:
        return float(s)
    if s.numel() != batch:
        raise ValueError(f"per-item sigma length {s.numel()} != batch size {batch}")
    return s.view(batch, 1, 1, 1)


class SpeckleDenoiser(nn.Module):
    """Dual-use network: noisy training forward passes and clean inference."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = ResUNetEncoder(config)
        self.recon = ReconstructionHead(config)

    def encode(self, image: torch.Tensor, train_mode: bool = False,
               sigma=0.0, seed: int = 0) -> torch.Tensor:
        """Latent map of an image; applies the noise mixture first in train mode."""
        x, single = _to_nchw(image)
        if x.shape[-2] % 8 or x.shape[-1] % 8:
            raise ValueError(f"spatial dims must be divisible by 8, got {tuple(x.shape[-2:])}")
        if x.shape[1] != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} input channels, got {x.shape[1]}")
        if train_mode:
            x = noise_mixture(x, _sigma_arg(sigma, x.shape[0]), seed)
        return _from_nchw(self.encoder(x), single)

    def reconstruct(self, latent: torch.Tensor, train_mode: bool = False,
                    sigma=0.0, seed: int = 0) -> torch.Tensor:
        """Image estimate from a latent; mixes noise into the latent in train mode."""
        z, single = _to_nchw(latent)
        if z.shape[1] != self.config.latent_channels:
            raise ValueError(f"expected {self.config.latent_channels} latent channels, got {z.shape[1]}")
        if train_mode:
            z = noise_mixture(z, _sigma_arg(sigma, z.shape[0]), seed)
        return _from_nchw(self.recon(z), single)

    def denoise(self, image: torch.Tensor) -> torch.Tensor:
        """Inference composition encode -> reconstruct with all mixtures disabled."""
        with torch.no_grad():
            return self.reconstruct(self.encode(image))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_model(config: ModelConfig, seed: int) -> SpeckleDenoiser:
    """Build a model with He fan-in init for convs, deterministic per seed.

    Biases and normalization shifts start at zero, normalization scales
    at one; conv kernels are Gaussian with std sqrt(2 / ((1 + slope^2) * fan_in)).
    """
    model = SpeckleDenoiser(config)
    gen = torch.Generator().manual_seed(int(seed))
    gain = (2.0 / (1.0 + LEAKY_SLOPE ** 2)) ** 0.5
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() == 4:  # conv kernel
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.normal_(0.0, gain / fan_in ** 0.5, generator=gen)
            elif name.endswith("weight"):  # norm scale
                p.fill_(1.0)
            else:  # conv bias / norm shift
                p.zero_()
    return model


def count_flops(config: ModelConfig, resolution: int) -> int:
    """Analytic multiply-accumulate count of one single-image forward pass.

    Counts conv MACs only (normalization, activation, and resampling are
    negligible), one MAC per FLOP, matching the usual GFLOPs convention
    for conv nets.
    """
    if resolution % 8:
        raise ValueError("resolution must be divisible by 8")

    def conv(side, cin, cout, k):
        return side * side * cin * cout * k * k

    widths = config.stage_widths
    macs = conv(resolution, config.input_channels, widths[0], 3)  # stem
    prev, side = widths[0], resolution
    for i, (w, n) in enumerate(zip(widths, config.stage_blocks)):
        stride = 1 if i == 0 else 2
        side //= stride
        macs += conv(side, prev, w, 3) + conv(side, w, w, 3)
        if prev != w or stride != 1:
            macs += conv(side, prev, w, 1)
        macs += (n - 1) * 2 * conv(side, w, w, 3)
        prev = w
    for i in range(len(widths) - 1, 0, -1):
        side *= 2
        macs += conv(side, widths[i] + widths[i - 1], widths[i - 1], 3)
        macs += conv(side, widths[i - 1], widths[i - 1], 3)
    ch = config.latent_channels
    macs += config.recon_blocks * conv(resolution, ch, ch, 3)
    macs += conv(resolution, ch, config.input_channels, 3)
    return macs


def measure_flops(model: SpeckleDenoiser, resolution: int) -> int:
    """MAC count measured with forward hooks on an actual forward pass.

    Independent cross-check for `count_flops`; intended for small
    resolutions.
    """
    counted = []

    def hook(module, inputs, output):
        k = module.kernel_size[0] * module.kernel_size[1]
        counted.append(output.shape[-2] * output.shape[-1]
                       * module.in_channels * module.out_channels * k)

    handles = [m.register_forward_hook(hook)
               for m in model.modules() if isinstance(m, nn.Conv2d)]
    try:
        with torch.no_grad():
            x = torch.zeros(resolution, resolution, model.config.input_channels)
            model.reconstruct(model.encode(x))
    finally:
        for h in handles:
            h.remove()
    return sum(counted)


@dataclass
class Checkpoint:
    model: SpeckleDenoiser
    config: ModelConfig
    epoch: int
    seed: int
    loss_history: list = field(default_factory=list)
    optimizer_state: dict | None = None


def save_checkpoint(path, model: SpeckleDenoiser, *, epoch: int, seed: int,
                    loss_history=None, optimizer_state: dict | None = None):
    """Write a checkpoint: JSON manifest + named float32 arrays in declaration order.

    ``optimizer_state`` maps parameter name -> {"step": int,
    "exp_avg": Tensor, "exp_avg_sq": Tensor}.
    """
    names, arrays = [], []
    for name, p in model.named_parameters():
        names.append({"name": name, "shape": list(p.shape)})
        arrays.append(p.detach().cpu().numpy().astype("<f4"))
    steps = None
    if optimizer_state is not None:
        steps = {}
        for pname, state in optimizer_state.items():
            steps[pname] = int(state["step"])
            for key in ("exp_avg", "exp_avg_sq"):
                arr = state[key].detach().cpu().numpy().astype("<f4")
                names.append({"name": f"optim/{key}/{pname}", "shape": list(arr.shape)})
                arrays.append(arr)
    manifest = {
        "format": "despeckle-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "epoch": int(epoch),
        "seed": int(seed),
        "loss_history": loss_history or [],
        "arrays": names,
        "optimizer_steps": steps,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for arr in arrays:
        buf.write(arr.tobytes(order="C"))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by `save_checkpoint`; bit-exact round trip."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        version, blob_len = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(f.read(blob_len).decode("utf-8"))
        payload = f.read()
    cfg_dict = dict(manifest["config"])
    config = ModelConfig(**cfg_dict)
    model = SpeckleDenoiser(config)

    tensors = {}
    offset = 0
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = payload[offset:offset + 4 * count]
        if len(raw) != 4 * count:
            raise DataError(f"{path}: truncated checkpoint payload")
        offset += 4 * count
        tensors[entry["name"]] = torch.from_numpy(
            np.frombuffer(raw, dtype="<f4").reshape(shape).copy())

    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise DataError(f"{path}: checkpoint missing array {name}")
            p.copy_(tensors[name])

    optimizer_state = None
    steps = manifest.get("optimizer_steps")
    if steps is not None:
        optimizer_state = {}
        for pname, step in steps.items():
            optimizer_state[pname] = {
                "step": int(step),
                "exp_avg": tensors[f"optim/exp_avg/{pname}"],
                "exp_avg_sq": tensors[f"optim/exp_avg_sq/{pname}"],
            }
    return Checkpoint(model=model, config=config, epoch=int(manifest["epoch"]),
                      seed=int(manifest["seed"]),
                      loss_history=manifest.get("loss_history", []),
                      optimizer_state=optimizer_state)
