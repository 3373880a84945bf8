"""Wavelet neural operator fused with a U-Net for binary image segmentation."""

from .data import Sample, load_dataset, synth_sample
from .metrics import ConfusionCounts, confusion_counts, dice, dice_score
from .model import UwnoConfig, UwnoParams, init_params, predict_mask, uwno_forward
from .tensor import Tensor, backward, finite_diff_check, no_grad
from .train import TrainConfig, adam_step, load_checkpoint, load_params, save_checkpoint, soft_dice_loss, train_loop
from .wavelet import WAVELETS, dwt2d, idwt2d, wavedec2, wavelet_filters, waverec2

__version__ = "0.1.0"

__all__ = [
    "ConfusionCounts", "Sample", "Tensor", "TrainConfig", "UwnoConfig", "UwnoParams", "WAVELETS",
    "adam_step", "backward", "confusion_counts", "dice", "dice_score", "dwt2d",
    "finite_diff_check", "idwt2d", "init_params", "load_checkpoint", "load_dataset", "load_params", "no_grad",
    "predict_mask", "save_checkpoint", "soft_dice_loss", "synth_sample", "train_loop", "uwno_forward", "wavedec2",
    "wavelet_filters", "waverec2",
]
