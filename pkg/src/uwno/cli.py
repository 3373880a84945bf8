"""Command-line interface: ``uwno {train,eval,predict,synth,selftest}``.

Exit codes: 0 on success, 1 on runtime failures (bad files, corrupt
checkpoints, failed self-tests), 2 on usage errors (bad flags, unknown
config keys).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import export_synth, load_dataset, load_image, write_png
from .errors import UwnoError
from .model import UwnoConfig
from .tensor import Tensor
from .train import TrainConfig, evaluate, load_params, predict_probs, train_loop

logger = logging.getLogger("uwno")

CONFIG_NAME = "config.json"

# config-file key -> value type; keys mirror the long flag names
CONFIG_KEYS = {
    "epochs": int, "batch-size": int, "lr": float, "seed": int, "channels": int,
    "wavelet": str, "level": int, "unet-depth": int, "wno-blocks": int,
    "val-fraction": float, "size": int, "data-dir": str,
}

DEFAULTS = {
    "epochs": 500, "batch-size": 8, "lr": 1e-3, "seed": 0, "channels": 16,
    "wavelet": "db4", "level": 2, "unet-depth": 3, "wno-blocks": 2,
    "val-fraction": 0.1, "size": 128,
}

MODEL_KEYS = ("channels", "wavelet", "level", "unet-depth", "wno-blocks", "size", "seed")


class UsageError(Exception):
    """Raised for problems that should exit with status 2."""


def _dest(key: str) -> str:
    return key.replace("-", "_")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--channels", type=int, help="lifted channel width C (default 16)")
    p.add_argument("--wavelet", choices=("haar", "db2", "db4"), help="wavelet basis (default db4)")
    p.add_argument("--level", type=int, help="wavelet decomposition levels (default 2)")
    p.add_argument("--unet-depth", type=int, help="U-Net pooling stages (default 3)")
    p.add_argument("--wno-blocks", type=int, help="stacked wavelet blocks (default 2)")
    p.add_argument("--size", type=int, help="square image size the model works at (default 128)")
    p.add_argument("--seed", type=int, help="seed for initialisation, shuffling and splitting (default 0)")
    p.add_argument("--config", help="JSON file whose keys mirror the long flag names")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uwno", description="Wavelet-operator U-Net segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from scratch on a data directory")
    p.add_argument("--data-dir", help="directory with images/ and masks/")
    p.add_argument("--out", required=True, help="run directory for logs, checkpoints and figures")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--record-time", action="store_true",
                   help="write wall-clock seconds into metrics.jsonl (breaks byte-identical reruns)")
    _model_flags(p)

    p = sub.add_parser("eval", help="Dice of a checkpoint over a data directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", help="also write per-image dice.csv and dice_hist.png here")
    _model_flags(p)

    p = sub.add_parser("predict", help="segment one PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="grayscale or RGB PNG")
    p.add_argument("--out", required=True, help="output mask PNG (model resolution, values 0/255)")
    p.add_argument("--overlay", help="optional RGB PNG with the mask blended in red at 50%%")
    _model_flags(p)

    p = sub.add_parser("synth", help="write synthetic speckled-ellipse image/mask pairs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="first sample seed (default 0)")
    p.add_argument("--size", type=int, default=128)

    sub.add_parser("selftest", help="run the quick verification suites")
    return parser


def _read_config(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise UwnoError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise UsageError(f"config {path}: unknown keys {', '.join(unknown)}; allowed: {', '.join(CONFIG_KEYS)}")
    out = {}
    for key, value in raw.items():
        kind = CONFIG_KEYS[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or isinstance(value, bool):
            raise UsageError(f"config {path}: {key} must be {kind.__name__}, got {value!r}")
        out[key] = value
    return out


def _resolve(args, layers: list[dict]) -> dict:
    """Merge settings: defaults < each config layer in order < explicit flags."""
    merged = dict(DEFAULTS)
    for layer in layers:
        merged.update(layer)
    for key in CONFIG_KEYS:
        value = getattr(args, _dest(key), None)
        if value is not None:
            merged[key] = value
    return merged


def _model_config(s: dict) -> UwnoConfig:
    try:
        return UwnoConfig(channels=s["channels"], wno_blocks=s["wno-blocks"], wavelet=s["wavelet"],
                          level=s["level"], unet_depth=s["unet-depth"], height=s["size"],
                          width=s["size"], seed=s["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _checkpoint_layers(args) -> list[dict]:
    """The run's config.json next to the checkpoint, then an explicit --config."""
    layers = []
    beside = Path(args.checkpoint).parent / CONFIG_NAME
    if beside.is_file():
        layers.append({k: v for k, v in _read_config(beside).items() if k in MODEL_KEYS})
    if args.config:
        layers.append(_read_config(args.config))
    return layers


def cmd_train(args) -> int:
    settings = _resolve(args, [_read_config(args.config)] if args.config else [])
    if not settings.get("data-dir"):
        raise UsageError("train needs --data-dir (or data-dir in --config)")
    model_cfg = _model_config(settings)
    try:
        train_cfg = TrainConfig(epochs=settings["epochs"], batch_size=settings["batch-size"],
                                learning_rate=settings["lr"], seed=settings["seed"],
                                val_fraction=settings["val-fraction"], output_dir=args.out,
                                record_time=args.record_time)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = load_dataset(settings["data-dir"], model_cfg.height)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(json.dumps(settings, indent=2, sort_keys=True) + "\n")
    history, _ = train_loop(model_cfg, train_cfg, dataset)

    from .report import plot_training_curves

    plot_training_curves(history, out / "training_curves.png")
    last = history[-1]
    print(json.dumps({"epochs": len(history), "train_loss": last["train_loss"],
                      "train_dice": last["train_dice"], "val_dice": last["val_dice"],
                      "checkpoint": str(out / "final.uwno")}))
    return 0


def cmd_eval(args) -> int:
    settings = _resolve(args, _checkpoint_layers(args))
    cfg = _model_config(settings)
    params = load_params(args.checkpoint, cfg)
    samples = load_dataset(args.data_dir, cfg.height)
    if not samples:
        raise UwnoError(f"no images found under {Path(args.data_dir) / 'images'}")
    scores = evaluate(params, samples, settings["batch-size"])
    summary = {"n": len(scores), "mean_dice": float(np.mean(scores)),
               "max_dice": float(np.max(scores)), "min_dice": float(np.min(scores))}
    if args.out:
        from .report import plot_dice_histogram

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "dice.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "dice"])
            writer.writerows((s.id, f"{d:.6f}") for s, d in zip(samples, scores))
        plot_dice_histogram(scores, out / "dice_hist.png")
    print(json.dumps(summary))
    return 0


def cmd_predict(args) -> int:
    settings = _resolve(args, _checkpoint_layers(args))
    cfg = _model_config(settings)
    params = load_params(args.checkpoint, cfg)
    image = load_image(args.input, cfg.height)
    probs = predict_probs(params, Tensor(image.data[None]))
    mask = (probs[0, 0] >= 0.5).astype(np.float64)
    write_png(args.out, mask)
    if args.overlay:
        from PIL import Image

        from .report import overlay

        path = Path(args.overlay)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(overlay(image.data[0], mask)).save(path, format="PNG")
    print(json.dumps({"input": args.input, "mask": args.out, "foreground_fraction": float(mask.mean())}))
    return 0


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    if args.size < 8 or args.size % 8:
        raise UsageError(f"--size must be a positive multiple of 8, got {args.size}")
    stems = export_synth(args.out, args.n, args.seed, args.size)
    print(json.dumps({"out": args.out, "n": len(stems)}))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "synth": cmd_synth, "selftest": cmd_selftest}


def run(argv: list[str] | None = None) -> int:
    """Parse ``argv`` and run the command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"uwno {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (UwnoError, OSError, ValueError, FloatingPointError) as exc:
        print(f"uwno {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
