"""Command-line entry point.

Subcommands wire the pipeline end to end: synth corrupts a clean folder,
train fits the dual-path model on observations, denoise/eval/latent run a
checkpoint, plot renders PSNR bar+line summaries. Settings come from a
JSON config file (sections: data, noise, model, train, eval) with flags
taking precedence; the fully resolved config is written to the output
directory so any run can be reproduced from that copy alone.

Exit codes: 0 success, 2 usage or config error, 3 data error,
4 numerical failure.
"""

import argparse
import copy
import json
import os
import sys
from pathlib import Path

from .data import load_folder, save_png, split, write_manifest
from .errors import ConfigError, DataError, NumericsError
from .evaluation import evaluate, latent_robustness, write_latent_stats
from .model import ModelConfig, load_checkpoint
from .noise import NoiseSpec, speckle_alpha, synth_speckle
from .seeding import derive_seed
from .train import TrainConfig, fit

DEFAULT_CONFIG = {
    "seed": 0,
    "out": None,
    "input": None,
    "checkpoint": None,
    "data": {"resolution": 256, "split_ratio": 0.8, "contiguous": False},
    "noise": {"alpha_level": 0.2, "alpha_jitter": 0.0},
    "model": {"base_width": 32, "stage_widths": [32, 64, 128, 256],
              "stage_blocks": [1, 2, 2, 2], "recon_blocks": 4},
    "train": {"epochs": 500, "batch_size": 4, "lr_init": 3e-3,
              "weight_decay": 5e-4, "clip_norm": 1e-2, "kappa": 0.25,
              "checkpoint_every": 50, "encoder_mixture": True,
              "recon_mixture": True},
    "eval": {"seed": None},
}


def load_config_file(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return doc


def merge_config(file_cfg: dict, args: argparse.Namespace) -> dict:
    """Defaults, then config file, then explicit flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in file_cfg.items():
        if key == "command":
            continue
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            for sub, subval in value.items():
                if sub not in cfg[key] and not (key == "data" and sub == "input"):
                    raise ConfigError(f"unknown config key {key}.{sub}")
                cfg[key][sub] = subval
        else:
            cfg[key] = value

    overrides = {
        "seed": ("seed",), "out": ("out",), "checkpoint": ("checkpoint",),
        "alpha": ("noise", "alpha_level"), "alpha_jitter": ("noise", "alpha_jitter"),
        "kappa": ("train", "kappa"), "epochs": ("train", "epochs"),
        "batch": ("train", "batch_size"), "resolution": ("data", "resolution"),
    }
    for flag, dest in overrides.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = cfg
        for key in dest[:-1]:
            node = node[key]
        node[dest[-1]] = value
    if getattr(args, "split_contiguous", False):
        cfg["data"]["contiguous"] = True
    if getattr(args, "no_encoder_mixture", False):
        cfg["train"]["encoder_mixture"] = False
    if getattr(args, "no_recon_mixture", False):
        cfg["train"]["recon_mixture"] = False
    if getattr(args, "input", None) is not None:
        cfg["input"] = args.input
    return cfg


def resolve_out(cfg: dict, command: str) -> Path:
    if cfg["out"]:
        return Path(cfg["out"])
    root = os.environ.get("DESPECKLE_OUT", "runs")
    return Path(root) / command


def persist_config(cfg: dict, command: str, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = dict(cfg)
    doc["command"] = command
    doc["out"] = str(out_dir)
    with open(out_dir / "run_config.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def build_noise_spec(cfg: dict) -> NoiseSpec:
    try:
        return NoiseSpec(alpha_level=float(cfg["noise"]["alpha_level"]),
                         alpha_jitter=float(cfg["noise"]["alpha_jitter"]))
    except ValueError as e:
        raise ConfigError(str(e))


def build_model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    try:
        return ModelConfig(base_width=int(m["base_width"]),
                           stage_widths=tuple(int(w) for w in m["stage_widths"]),
                           stage_blocks=tuple(int(b) for b in m["stage_blocks"]),
                           recon_blocks=int(m["recon_blocks"]))
    except ValueError as e:
        raise ConfigError(str(e))


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(lr_init=float(t["lr_init"]),
                           weight_decay=float(t["weight_decay"]),
                           clip_norm=float(t["clip_norm"]),
                           epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                           kappa=float(t["kappa"]), seed=int(cfg["seed"]),
                           checkpoint_every=int(t["checkpoint_every"]),
                           encoder_mixture=bool(t["encoder_mixture"]),
                           recon_mixture=bool(t["recon_mixture"]))
    except ValueError as e:
        raise ConfigError(str(e))


def _require_input(cfg: dict) -> Path:
    if not cfg["input"]:
        raise ConfigError("an input folder is required (positional argument or config \"input\")")
    return Path(cfg["input"])


def _require_checkpoint(cfg: dict) -> Path:
    if not cfg["checkpoint"]:
        raise ConfigError("a checkpoint is required (--checkpoint or config \"checkpoint\")")
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return path


def _load_split(cfg: dict, clean: bool):
    dataset = load_folder(_require_input(cfg), resolution=int(cfg["data"]["resolution"]),
                          clean=clean)
    return split(dataset, float(cfg["data"]["split_ratio"]), int(cfg["seed"]),
                 contiguous=bool(cfg["data"]["contiguous"]))


def _eval_seed(cfg: dict) -> int:
    if cfg["eval"]["seed"] is not None:
        return int(cfg["eval"]["seed"])
    return derive_seed(int(cfg["seed"]), "eval-seed")


def cmd_synth(cfg: dict, out_dir: Path) -> int:
    spec = build_noise_spec(cfg)
    dataset = load_folder(_require_input(cfg), resolution=int(cfg["data"]["resolution"]),
                          clean=True)
    rows = []
    for i, item in enumerate(dataset):
        item_seed = derive_seed(int(cfg["seed"]), "synth", i)
        noisy = synth_speckle(item.values, spec, item_seed)
        name = f"{i:04d}_{item.name}.png"
        save_png(noisy, out_dir / name)
        rows.append({"noisy": name, "clean": str(item.source_path),
                     "alpha": speckle_alpha(spec, item_seed), "seed": item_seed})
    write_manifest(rows, out_dir / "manifest.json")
    print(f"wrote {len(rows)} noisy images to {out_dir}")
    return 0


def cmd_train(cfg: dict, out_dir: Path) -> int:
    split_ = _load_split(cfg, clean=False)
    resume = _require_checkpoint(cfg) if cfg["checkpoint"] else None
    state = fit(split_, build_model_config(cfg), build_train_config(cfg),
                out_dir=out_dir, resume_from=resume,
                log=lambda msg: print(msg, flush=True))
    print(f"finished {state.epoch + 1} epochs; checkpoints in {out_dir}")
    return 0


def cmd_denoise(cfg: dict, out_dir: Path) -> int:
    model = load_checkpoint(_require_checkpoint(cfg)).model
    dataset = load_folder(_require_input(cfg), resolution=int(cfg["data"]["resolution"]),
                          clean=False)
    for i, item in enumerate(dataset):
        restored = model.denoise(item.values).clamp(0.0, 1.0)
        save_png(restored, out_dir / f"{i:04d}_{item.name}_restored.png")
    print(f"wrote {len(dataset)} restored images to {out_dir}")
    return 0


def cmd_eval(cfg: dict, out_dir: Path) -> int:
    model = load_checkpoint(_require_checkpoint(cfg)).model
    split_ = _load_split(cfg, clean=True)
    report = evaluate(model, split_, build_noise_spec(cfg), _eval_seed(cfg),
                      out_dir=out_dir)
    print(f"mean noisy {report.mean_noisy:.2f} dB, "
          f"mean restored {report.mean_restored:.2f} dB, "
          f"delta {report.delta:+.2f} dB")
    return 0


def cmd_latent(cfg: dict, out_dir: Path) -> int:
    model = load_checkpoint(_require_checkpoint(cfg)).model
    split_ = _load_split(cfg, clean=True)
    stats = latent_robustness(model, split_, build_noise_spec(cfg), _eval_seed(cfg))
    write_latent_stats(stats, out_dir / "latent_stats.json")
    print(f"variance of d: {stats.variance_d:.6g} over {len(stats.d)} samples")
    return 0


def cmd_plot(report_paths, out_dir: Path) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels, noisy, restored = [], [], []
    for path in report_paths:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"report not found: {path}")
        with open(path) as f:
            doc = json.load(f)
        labels.append(path.parent.name or path.stem)
        noisy.append(float(doc["mean_noisy"]))
        restored.append(float(doc["mean_restored"]))
    delta = [r - n for n, r in zip(noisy, restored)]

    xs = range(len(labels))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.0 + 0.8 * len(labels)), 4.5))
    ax.bar([x - 0.2 for x in xs], noisy, width=0.4, label="noisy", color="#888888")
    ax.bar([x + 0.2 for x in xs], restored, width=0.4, label="restored", color="#3070b0")
    ax.plot(list(xs), delta, "k.-", label="delta")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    out_dir.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_dir / "psnr_plot.png", dpi=120)
    plt.close(fig)
    print(f"wrote {out_dir / 'psnr_plot.png'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="despeckle",
                                     description="Self-supervised speckle removal")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_input=True):
        if with_input:
            p.add_argument("input", nargs="?", help="input image folder")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--alpha-jitter", dest="alpha_jitter", type=float)
        p.add_argument("--kappa", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--resolution", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint")
        p.add_argument("--no-encoder-mixture", action="store_true")
        p.add_argument("--no-recon-mixture", action="store_true")
        p.add_argument("--split-contiguous", action="store_true")

    for name, help_ in [("synth", "corrupt a clean folder with speckle"),
                        ("train", "fit the model on an observation folder"),
                        ("denoise", "restore a folder with a trained checkpoint"),
                        ("eval", "PSNR report on a clean folder"),
                        ("latent", "latent robustness statistics")]:
        common(sub.add_parser(name, help=help_))

    plot = sub.add_parser("plot", help="bar+line PSNR chart from report.json files")
    plot.add_argument("reports", nargs="+", help="report.json paths")
    plot.add_argument("--out", help="output directory")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "denoise": cmd_denoise,
            "eval": cmd_eval, "latent": cmd_latent}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "plot":
        out_dir = Path(args.out) if args.out else resolve_out({"out": None}, "plot")
        return cmd_plot(args.reports, out_dir)
    file_cfg = load_config_file(args.config) if args.config else {}
    cfg = merge_config(file_cfg, args)
    out_dir = resolve_out(cfg, args.command)
    persist_config(cfg, args.command, out_dir)
    return COMMANDS[args.command](cfg, out_dir)


def main(argv=None) -> int:
    try:
        code = run(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        code = 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        code = 3
    except NumericsError as e:
        print(f"numerical failure: {e} {e.diagnostics}", file=sys.stderr)
        code = 4
    if argv is None:
        sys.exit(code)
    return code
