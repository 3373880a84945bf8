"""Quick in-process verification suites behind ``uwno selftest``.

Each check returns ``(passed, detail)``; sizes are kept small so the whole
run finishes in well under a minute on one core.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .metrics import confusion_counts, dice_score
from .tensor import Tensor, finite_diff_check, parameter
from .train import soft_dice_loss
from .unet import UnetConfig, init_unet, unet_forward
from .wavelet import WAVELETS, dwt2d, wavedec2, waverec2, wavelet_filters
from .wno import init_wno_block, wno_forward

GRAD_TOL = 2e-2
# network outputs with frozen ReLU/pool choices are affine in each weight, so
# the wider step costs no truncation error and cuts float32 cancellation noise
COMPOSITE_STEP = 0.1


def _projection(rng, shape):
    weights = Tensor(rng.uniform(-1, 1, shape))
    return lambda out: T.sum(out * weights)


def check_reconstruction(n: int = 10) -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(n):
        x = Tensor(rng.standard_normal((1, 1, 128, 128)))
        for name in WAVELETS:
            for levels in (1, 2, 3):
                rec = waverec2(wavedec2(x, name, levels), name)
                worst = max(worst, float(np.abs(rec.data - x.data).max()))
    return worst < 1e-4, f"max abs error {worst:.2e}"


def check_parseval(n: int = 10) -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(n):
        x = Tensor(rng.standard_normal((1, 2, 64, 64)))
        direct = float(np.sum(x.data.astype(np.float64) ** 2))
        for name in WAVELETS:
            worst = max(worst, abs(wavedec2(x, name, 3).energy() - direct) / direct)
    return worst < 1e-4, f"max relative energy error {worst:.2e}"


def check_gradients() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    errors = {}

    x = parameter(rng.uniform(-1, 1, (2, 3, 6, 6)))
    w = parameter(rng.uniform(-1, 1, (4, 3, 3, 3)))
    b = parameter(rng.uniform(-1, 1, 4))
    proj = _projection(rng, (2, 4, 6, 6))
    for name, theta in (("conv2d/x", x), ("conv2d/w", w), ("conv2d/b", b)):
        errors[name] = finite_diff_check(lambda: proj(T.conv2d(x, w, b, padding=1)), theta)

    # distinct values keep window maxima away from ties
    xp = parameter(rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) / 50.0)
    proj = _projection(rng, (2, 3, 4, 4))
    errors["max_pool2d"] = finite_diff_check(lambda: proj(T.max_pool2d(xp)), xp)

    xr = rng.uniform(-1, 1, (2, 3, 5, 5))
    xr[np.abs(xr) < 0.05] = 0.5
    xr = parameter(xr)
    proj = _projection(rng, xr.shape)
    errors["relu"] = finite_diff_check(lambda: proj(T.relu(xr)), xr)

    f = wavelet_filters("db4")
    xw = parameter(rng.uniform(-1, 1, (1, 2, 16, 16)))
    proj = _projection(rng, (1, 2, 8, 8))
    errors["dwt2d"] = finite_diff_check(lambda: proj(dwt2d(xw, f)[1]), xw)
    proj = _projection(rng, (1, 2, 16, 16))
    errors["waverec2"] = finite_diff_check(
        lambda: proj(waverec2(wavedec2(xw, f, 2), f)), xw)

    block = init_wno_block(4, 4, 16, 16, "db4", 2, rng)
    xb = Tensor(rng.uniform(-1, 1, (2, 4, 16, 16)))
    proj = _projection(rng, (2, 4, 16, 16))
    errors["wno/kernel"] = finite_diff_check(lambda: proj(wno_forward(xb, block)), block.kernel_weights,
                                               freeze_branches=True, step=COMPOSITE_STEP)

    cfg = UnetConfig(depth=2, base_channels=4, in_channels=2, out_channels=2)
    p = init_unet(cfg, rng)
    xu = Tensor(rng.uniform(-1, 1, (1, 2, 16, 16)))
    proj = _projection(rng, (1, 2, 16, 16))
    errors["unet/enc0.w1"] = finite_diff_check(lambda: proj(unet_forward(xu, p, cfg)), p.encoder[0][0],
                                                 freeze_branches=True, step=COMPOSITE_STEP)

    probs = parameter(rng.uniform(0.05, 0.95, (2, 1, 8, 8)))
    gt = Tensor(rng.random((2, 1, 8, 8)) < 0.4)
    errors["soft_dice_loss"] = finite_diff_check(lambda: soft_dice_loss(probs, gt), probs)

    worst = max(errors, key=errors.get)
    return errors[worst] < GRAD_TOL, f"worst {worst} relative error {errors[worst]:.2e}"


def check_dice_oracle(n: int = 1000) -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(n):
        pred = rng.random((16, 16)) < rng.random()
        gt = rng.random((16, 16)) < rng.random()
        inter, size = 0, 0
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            inter += p and g
            size += p + g
        expected = 1.0 if size == 0 else 2 * inter / size
        if dice_score(confusion_counts(pred.astype(int), gt.astype(int))) != expected:
            mismatches += 1
    return mismatches == 0, f"{mismatches} of {n} pairs disagree"


SUITES: dict[str, Callable[[], tuple[bool, str]]] = {
    "wavelet reconstruction": check_reconstruction,
    "parseval": check_parseval,
    "gradient checks": check_gradients,
    "dice oracle": check_dice_oracle,
}


def run_selftest(echo: Callable[[str], None] = print) -> bool:
    ok = True
    for name, check in SUITES.items():
        started = time.perf_counter()
        try:
            passed, detail = check()
        except Exception as exc:  # a crash is a failed suite, not a crashed run
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        ok &= passed
        echo(f"{'PASS' if passed else 'FAIL'}  {name}: {detail} ({time.perf_counter() - started:.1f}s)")
    return ok
