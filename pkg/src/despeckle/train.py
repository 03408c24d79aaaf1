"""Dual-path training: agreement + reconstruction losses, AdamW loop.

Each step takes a batch of noisy observations, augments every item with
two independent noise mixtures, encodes both, and penalizes latent
disagreement; the first latent is noise-mixed again and reconstructed
against the observation itself. The two losses are summed and optimized
jointly with linear learning-rate annealing, decoupled weight decay, and
global gradient-norm clipping.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import DatasetSplit, make_batches, stack_batch
from .errors import NumericsError
from .model import ModelConfig, SpeckleDenoiser, init_model, save_checkpoint, load_checkpoint
from .noise import adaptive_sigma
from .seeding import derive_seed

HISTORY_COLUMNS = ("epoch", "lr", "agreement", "reconstruction", "total")


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 3e-3
    weight_decay: float = 5e-4
    clip_norm: float = 1e-2
    epochs: int = 500
    batch_size: int = 4
    kappa: float = 0.25
    seed: int = 0
    checkpoint_every: int = 50
    encoder_mixture: bool = True
    recon_mixture: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.lr_init, self.weight_decay, self.clip_norm, self.kappa, self.eps) < 0:
            raise ValueError("rates, decay, clip, kappa, and eps must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs, batch_size, and checkpoint_every must be >= 1")


@dataclass(frozen=True)
class LossBundle:
    agreement: float
    reconstruction: float
    total: float

    @classmethod
    def of(cls, agreement: float, reconstruction: float) -> "LossBundle":
        a, r = float(agreement), float(reconstruction)
        return cls(agreement=a, reconstruction=r, total=a + r)


@dataclass
class TrainState:
    model: SpeckleDenoiser
    optimizer: torch.optim.AdamW
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int = 0
    history: list = field(default_factory=list)


def agreement_loss(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between the two latent paths."""
    if z1.shape != z2.shape:
        raise ValueError(f"latent shape mismatch: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    return torch.mean((z1 - z2) ** 2)


def reconstruction_loss(s_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between the image estimate and the observation."""
    if s_hat.shape != y.shape:
        raise ValueError(f"image shape mismatch: {tuple(s_hat.shape)} vs {tuple(y.shape)}")
    return torch.mean((s_hat - y) ** 2)


def lr_schedule(epoch: int, total_epochs: int, lr_init: float) -> float:
    """Linear annealing from lr_init at epoch 0 down to 0 at epoch == total_epochs."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_init * (1.0 - epoch / total_epochs)


def clip_gradient_norm(parameters, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm.

    The norm is accumulated in float64 so the post-clip norm lands within
    ~1e-9 of the threshold. Returns the pre-clip norm.
    """
    grads = [p.grad for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
    total = float(total)
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


def make_optimizer(model: SpeckleDenoiser, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr_init,
                             betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                             weight_decay=cfg.weight_decay)


def extract_optimizer_state(state: TrainState) -> dict:
    """Optimizer moments keyed by parameter name, for checkpointing."""
    out = {}
    for name, p in state.model.named_parameters():
        st = state.optimizer.state.get(p)
        if not st:
            continue
        step = st["step"]
        out[name] = {
            "step": int(step.item()) if torch.is_tensor(step) else int(step),
            "exp_avg": st["exp_avg"],
            "exp_avg_sq": st["exp_avg_sq"],
        }
    return out


def restore_optimizer_state(state: TrainState, saved: dict):
    for name, p in state.model.named_parameters():
        if name not in saved:
            continue
        entry = saved[name]
        state.optimizer.state[p] = {
            "step": torch.tensor(float(entry["step"])),
            "exp_avg": entry["exp_avg"].clone(),
            "exp_avg_sq": entry["exp_avg_sq"].clone(),
        }


def train_step(state: TrainState, batch, lr: float, epoch: int = 0,
               step_index: int = 0) -> LossBundle:
    """One optimization step over a batch of noisy observations.

    ``batch`` is a list of ImageTensor or a (B, H, W, C) tensor. Applies
    the configured mixtures, backpropagates the summed loss, clips the
    global gradient norm, and takes an AdamW step at the given lr.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    cfg = state.train_config
    model = state.model
    y = batch if torch.is_tensor(batch) else stack_batch(batch)
    sigmas = torch.tensor([adaptive_sigma(y[i], cfg.kappa) for i in range(y.shape[0])],
                          dtype=y.dtype)

    if cfg.encoder_mixture:
        z1 = model.encode(y, train_mode=True, sigma=sigmas,
                          seed=derive_seed(cfg.seed, "enc-mix", epoch, step_index, 1))
        z2 = model.encode(y, train_mode=True, sigma=sigmas,
                          seed=derive_seed(cfg.seed, "enc-mix", epoch, step_index, 2))
    else:
        z1 = model.encode(y, train_mode=False)
        z2 = z1
    l_agree = agreement_loss(z1, z2)

    s_hat = model.reconstruct(z1, train_mode=cfg.recon_mixture, sigma=sigmas,
                              seed=derive_seed(cfg.seed, "lat-mix", epoch, step_index))
    l_recon = reconstruction_loss(s_hat, y)
    total = l_agree + l_recon

    if not torch.isfinite(total):
        raise NumericsError(
            f"non-finite loss at epoch {epoch} step {step_index}",
            diagnostics={"epoch": epoch, "step": step_index,
                         "agreement": l_agree.item(), "reconstruction": l_recon.item()})

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    clip_gradient_norm(model.parameters(), cfg.clip_norm)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()

    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericsError(f"non-finite parameter {name} after update",
                                diagnostics={"epoch": epoch, "step": step_index})
    return LossBundle.of(l_agree.item(), l_recon.item())


def write_history(history: list, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def fit(split: DatasetSplit, model_cfg: ModelConfig, train_cfg: TrainConfig,
        out_dir=None, resume_from=None, log=None) -> TrainState:
    """Run the full optimization loop with periodic checkpointing.

    Checkpoints land in ``out_dir`` every ``checkpoint_every`` epochs and
    at the end, next to ``history.csv``. ``resume_from`` continues from a
    checkpoint, reproducing the exact loss sequence of an uninterrupted
    run with the same seeds.
    """
    if not split.train:
        raise ValueError("train split is empty")
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        state = TrainState(model=ckpt.model, optimizer=None, model_config=ckpt.config,
                           train_config=train_cfg, epoch=ckpt.epoch + 1,
                           history=[list(r) for r in ckpt.loss_history])
        state.optimizer = make_optimizer(state.model, train_cfg)
        if ckpt.optimizer_state:
            restore_optimizer_state(state, ckpt.optimizer_state)
    else:
        model = init_model(model_cfg, derive_seed(train_cfg.seed, "init"))
        state = TrainState(model=model, optimizer=make_optimizer(model, train_cfg),
                           model_config=model_cfg, train_config=train_cfg)

    out_dir = Path(out_dir) if out_dir is not None else None

    def checkpoint(tag):
        if out_dir is None:
            return
        save_checkpoint(out_dir / f"checkpoint-{tag}.spkc", state.model,
                        epoch=state.epoch, seed=train_cfg.seed,
                        loss_history=state.history,
                        optimizer_state=extract_optimizer_state(state))
        write_history(state.history, out_dir / "history.csv")

    for epoch in range(state.epoch, train_cfg.epochs):
        state.epoch = epoch
        lr = lr_schedule(epoch, train_cfg.epochs, train_cfg.lr_init)
        batches = make_batches(split, train_cfg.batch_size, train_cfg.seed, epoch)
        sums = [0.0, 0.0, 0.0]
        try:
            for step_index, batch in enumerate(batches):
                bundle = train_step(state, batch, lr, epoch, step_index)
                sums[0] += bundle.agreement
                sums[1] += bundle.reconstruction
                sums[2] += bundle.total
        except NumericsError:
            checkpoint("diagnostic")
            raise
        n = len(batches)
        state.history.append([epoch, lr, sums[0] / n, sums[1] / n, sums[2] / n])
        if log is not None:
            log(f"epoch {epoch:4d}  lr {lr:.3e}  agreement {sums[0] / n:.6f}  "
                f"reconstruction {sums[1] / n:.6f}  total {sums[2] / n:.6f}")
        if (epoch + 1) % train_cfg.checkpoint_every == 0 and epoch + 1 < train_cfg.epochs:
            checkpoint(f"epoch{epoch:04d}")
    state.epoch = train_cfg.epochs - 1
    checkpoint("final")
    return state
