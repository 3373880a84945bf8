"""Soft-Dice training with Adam, evaluation, and checkpoint persistence.

Checkpoint layout (all integers little-endian)::

    b"UWNO" | uint32 version (=1) | uint64 header length | UTF-8 JSON header | payload

The header is a JSON list of ``{"name", "shape", "offset"}`` records; each
``offset`` is the byte position of that tensor inside the payload, which is
the concatenation of raw little-endian float32 arrays in header order.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Sample, split_dataset, stack
from .errors import ContractError, DimensionError, FormatError, NonFiniteError, StateError
from .metrics import dice
from .model import UwnoConfig, UwnoParams, init_params, uwno_forward
from .tensor import DTYPE, Tensor, no_grad, sigmoid

logger = logging.getLogger(__name__)

MAGIC = b"UWNO"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    smooth: float = 1.0
    val_fraction: float = 0.1
    output_dir: str | None = None
    # wall-clock seconds make the metrics log irreproducible, so they are opt-in
    record_time: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"epochs and batch_size must be >= 1: {self}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.learning_rate <= 0 or self.smooth < 0:
            raise ValueError(f"learning_rate must be positive and smooth non-negative: {self}")


def soft_dice_loss(probs: Tensor, gt, smooth: float = 1.0) -> Tensor:
    """``1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)`` over the whole batch."""
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    if probs.shape != gt.shape:
        raise DimensionError(f"soft_dice_loss: probs {probs.shape} and gt {gt.shape} differ")
    overlap = T.sum(probs * gt)
    total = T.sum(probs) + T.sum(gt)
    return 1.0 - (overlap * 2.0 + smooth) / (total + smooth)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor], **kwargs) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kwargs)


def adam_step(params: list[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every tensor in ``params``, in place."""
    if len(params) != len(state.m):
        raise StateError(f"optimizer tracks {len(state.m)} tensors but got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise StateError(f"parameter {i} {p.shape} has no gradient")
    state.t += 1
    # complements are formed in float64 before rounding: 1 - float32(0.999)
    # is off by 1e-5 relative, which would bias every step size
    b1, b2 = DTYPE(state.beta1), DTYPE(state.beta2)
    c1, c2 = DTYPE(1 - state.beta1), DTYPE(1 - state.beta2)
    bc1 = DTYPE(1 - state.beta1**state.t)
    bc2 = DTYPE(1 - state.beta2**state.t)
    lr, eps = DTYPE(lr), DTYPE(state.eps)
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += c1 * g
        v *= b2
        v += c2 * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, path) -> None:
    """Write named float32 tensors (a :class:`UwnoParams` or a name->tensor mapping)."""
    named = params.named_parameters() if isinstance(params, UwnoParams) else params
    arrays = {k: np.ascontiguousarray(getattr(v, "data", v), dtype="<f4") for k, v in named.items()}
    header, offset = [], 0
    for name, arr in arrays.items():
        header.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into a name -> float32 array dict, validating every field."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: file too short for the checkpoint prefix", len(raw))
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    start = _PREFIX.size
    if start + header_len > len(raw):
        raise FormatError(f"{path}: header length {header_len} runs past end of file", 8)
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}", start) from None
    if not isinstance(header, list):
        raise FormatError(f"{path}: header is not a list", start)

    payload = start + header_len
    out, expected = {}, 0
    for entry in header:
        try:
            name, shape, offset = entry["name"], tuple(int(s) for s in entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: malformed header entry {entry!r}", start) from None
        if offset != expected or name in out:
            raise FormatError(f"{path}: tensor {name!r} has inconsistent offset or duplicate name", payload + offset)
        nbytes = 4 * math.prod(shape)
        if payload + offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload for tensor {name!r}", len(raw))
        out[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=payload + offset).reshape(shape).astype(DTYPE)
        expected = offset + nbytes
    if payload + expected != len(raw):
        raise FormatError(f"{path}: {len(raw) - payload - expected} trailing bytes after payload", payload + expected)
    return out


def load_params(path, cfg: UwnoConfig) -> UwnoParams:
    """Build parameters for ``cfg`` and fill them from ``path``; names and shapes must match exactly."""
    arrays = load_checkpoint(path)
    params = init_params(cfg)
    named = params.named_parameters()
    if set(arrays) != set(named):
        missing = sorted(set(named) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(named))[:3]
        raise FormatError(f"{path}: tensors do not match the model config (missing {missing}, unexpected {extra})", 0)
    for name, t in named.items():
        if arrays[name].shape != t.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {arrays[name].shape}, model expects {t.shape}", 0)
    for name, t in named.items():
        t.data = arrays[name]
    return params


# ---------------------------------------------------------------------------
# evaluation and training


def predict_probs(params: UwnoParams, images: Tensor) -> np.ndarray:
    with no_grad():
        return sigmoid(uwno_forward(images, params)).data


def evaluate(params: UwnoParams, samples: list[Sample], batch_size: int = 8) -> list[float]:
    """Per-sample Dice of thresholded predictions against the masks."""
    scores = []
    for i in range(0, len(samples), batch_size):
        images, masks = stack(samples[i:i + batch_size])
        pred = predict_probs(params, images) >= 0.5
        scores.extend(dice(p.astype(np.uint8), m.astype(np.uint8)) for p, m in zip(pred, masks.data))
    return scores


class _RunFiles:
    """Metric, timing and checkpoint outputs of one training run."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        self.metrics = open(out_dir / "metrics.jsonl", "w")
        self.timing = open(out_dir / "timing.jsonl", "w")

    def log(self, record: dict, seconds: float) -> None:
        self.metrics.write(json.dumps(record) + "\n")
        self.metrics.flush()
        self.timing.write(json.dumps({"epoch": record["epoch"], "seconds": seconds}) + "\n")
        self.timing.flush()

    def close(self) -> None:
        self.metrics.close()
        self.timing.close()


def train_loop(model_cfg: UwnoConfig, train_cfg: TrainConfig, dataset: list[Sample],
               callback: Callable[[dict], None] | None = None) -> tuple[list[dict], UwnoParams]:
    """Train from scratch; returns the per-epoch history and the final parameters.

    When ``train_cfg.output_dir`` is set, ``metrics.jsonl``, ``timing.jsonl``,
    ``final.uwno`` and (if there is a validation split) ``best.uwno`` are
    written there.
    """
    if not dataset:
        raise ContractError("cannot train on an empty dataset")
    size = (model_cfg.height, model_cfg.width)
    for s in dataset:
        if s.image.shape[1:] != size:
            raise DimensionError(f"sample {s.id} is {s.image.shape[1:]} but the model expects {size}")
    train_set, val_set = split_dataset(dataset, train_cfg.val_fraction, train_cfg.seed)
    if not train_set:
        raise ContractError("validation split left no training samples")

    params = init_params(model_cfg)
    plist = params.parameters()
    state = AdamState.for_params(plist)
    rng = np.random.default_rng(train_cfg.seed)
    files = _RunFiles(Path(train_cfg.output_dir)) if train_cfg.output_dir else None
    best = -1.0
    history = []
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(len(train_set))
            losses, scores = [], []
            for b, i in enumerate(range(0, len(order), train_cfg.batch_size)):
                images, masks = stack([train_set[j] for j in order[i:i + train_cfg.batch_size]])
                params.zero_grad()
                probs = sigmoid(uwno_forward(images, params))
                loss = soft_dice_loss(probs, masks, train_cfg.smooth)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss became {value} at epoch {epoch}, batch {b}")
                T.backward(loss)
                adam_step(plist, state, train_cfg.learning_rate)
                losses.append(value)
                pred = probs.data >= 0.5
                scores.extend(dice(p.astype(np.uint8), m.astype(np.uint8)) for p, m in zip(pred, masks.data))
            val_scores = evaluate(params, val_set, train_cfg.batch_size) if val_set else []
            seconds = time.perf_counter() - started
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "train_dice": float(np.mean(scores)),
                "val_dice": float(np.mean(val_scores)) if val_scores else None,
                "seconds": seconds if train_cfg.record_time else 0.0,
            }
            history.append(record)
            logger.info("epoch %d loss %.4f train dice %.4f val dice %s (%.1fs)", epoch, record["train_loss"],
                        record["train_dice"], record["val_dice"], seconds)
            if files:
                files.log(record, seconds)
                if val_scores and record["val_dice"] > best:
                    best = record["val_dice"]
                    save_checkpoint(params, files.dir / "best.uwno")
            if callback:
                callback(record)
        if files:
            save_checkpoint(params, files.dir / "final.uwno")
    finally:
        if files:
            files.close()
    return history, params
