"""Acceptance suite: one test per criterion, each summarised on one line.

Run with ``pytest tests/test_acceptance.py -v``; the summary section at the
end lists PASS/FAIL/SKIP per criterion.  The overfit run takes about ten
minutes on one core.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from uwno import tensor as T
from uwno.metrics import confusion_counts, dice_score
from uwno.model import UwnoConfig, init_params, uwno_forward
from uwno.tensor import Tensor, finite_diff_check, parameter
from uwno.train import AdamState, adam_step, load_checkpoint, save_checkpoint, soft_dice_loss
from uwno.unet import UnetConfig, double_conv, init_unet, unet_forward
from uwno.wavelet import WAVELETS, analysis_matrix, dwt2d, idwt2d, wavedec2, waverec2, wavelet_filters
from uwno.wno import init_wno_block, wno_forward

from conftest import COMPOSITE_STEP, off_kink, projection

GRAD_TOL = 2e-2
DESK = ["--channels", "16", "--wavelet", "db4", "--level", "2", "--unet-depth", "3", "--wno-blocks", "2",
        "--lr", "1e-3", "--batch-size", "8"]


def cli(*args, timeout=1800):
    return subprocess.run([sys.executable, "-m", "uwno", *args], capture_output=True, text=True, timeout=timeout)


@pytest.mark.criterion(1, "perfect reconstruction")
def test_perfect_reconstruction(record_property):
    rng = np.random.default_rng(101)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x = Tensor(rng.standard_normal((1, 1, 128, 128)))
        for name in WAVELETS:
            for levels in (1, 2, 3):
                worst = max(worst, float(np.abs(waverec2(wavedec2(x, name, levels), name).data - x.data).max()))
    seconds = time.perf_counter() - started
    record_property("detail", f"max abs error {worst:.2e} over 900 round trips in {seconds:.1f}s")
    assert worst < 1e-4 and seconds < 10


@pytest.mark.criterion(2, "filter identities")
def test_filter_identities(record_property):
    worst = 0.0
    for name in WAVELETS:
        lo = np.array(wavelet_filters(name).dec_lo, dtype=np.float64)
        worst = max(worst, abs(lo.sum() - np.sqrt(2)), abs((lo**2).sum() - 1))
        A = analysis_matrix(wavelet_filters(name), 16)
        worst = max(worst, np.abs(A.T @ A - np.eye(16)).max())
    hi = np.array(wavelet_filters("db4").dec_hi, dtype=np.float64)
    k = np.arange(len(hi))
    worst = max(worst, max(abs(np.sum(k**p * hi)) for p in range(4)))
    record_property("detail", f"worst deviation {worst:.2e}")
    assert worst < 1e-6


@pytest.mark.criterion(3, "parseval")
def test_parseval(record_property):
    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(50):
        x = Tensor(rng.standard_normal((1, 2, 64, 64)))
        direct = float(np.sum(x.data.astype(np.float64) ** 2))
        for name in WAVELETS:
            worst = max(worst, abs(wavedec2(x, name, 3).energy() - direct) / direct)
    record_property("detail", f"max relative energy error {worst:.2e}")
    assert worst < 1e-4


def _gradient_errors():
    rng = np.random.default_rng(104)
    errs = {}

    def check(name, f, theta, **kw):
        errs[name] = finite_diff_check(f, theta, **kw)

    x = parameter(rng.uniform(-1, 1, (2, 3, 6, 6)))
    w = parameter(rng.uniform(-1, 1, (4, 3, 3, 3)))
    b = parameter(rng.uniform(-1, 1, 4))
    proj = projection(rng, (2, 4, 6, 6))
    for name, theta in (("x", x), ("w", w), ("b", b)):
        check(f"conv2d/{name}", lambda: proj(T.conv2d(x, w, b, padding=1)), theta)

    xp = parameter(rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) / 50.0)
    proj = projection(rng, (2, 3, 4, 4))
    check("max_pool2d", lambda: proj(T.max_pool2d(xp)), xp)

    xu = parameter(rng.uniform(-1, 1, (1, 2, 4, 4)))
    proj = projection(rng, (1, 2, 8, 8))
    check("upsample", lambda: proj(T.upsample_nearest2d(xu)), xu)

    xr = parameter(off_kink(rng, (2, 3, 5, 5)))
    proj = projection(rng, xr.shape)
    check("relu", lambda: proj(T.relu(xr)), xr)

    f = wavelet_filters("db4")
    xw = parameter(rng.uniform(-1, 1, (1, 2, 16, 16)))
    proj = projection(rng, (1, 2, 8, 8))
    check("dwt2d", lambda: proj(dwt2d(xw, f)[3]), xw)
    bands = [parameter(rng.uniform(-1, 1, (1, 2, 8, 8))) for _ in range(4)]
    proj = projection(rng, (1, 2, 16, 16))
    check("idwt2d", lambda: proj(idwt2d(*bands, f)), bands[1])
    proj_a = projection(rng, (1, 2, 4, 4))
    check("wavedec2", lambda: proj_a(wavedec2(xw, f, 2).approx), xw)
    check("waverec2", lambda: proj(waverec2(wavedec2(xw, f, 2), f)), xw)

    frozen = {"freeze_branches": True, "step": COMPOSITE_STEP}
    block = init_wno_block(4, 4, 16, 16, "db4", 2, rng)
    xb = Tensor(rng.uniform(-1, 1, (2, 4, 16, 16)))
    proj = projection(rng, (2, 4, 16, 16))
    check("wno/kernel", lambda: proj(wno_forward(xb, block)), block.kernel_weights, **frozen)
    check("wno/bypass_w", lambda: proj(wno_forward(xb, block)), block.bypass_w, **frozen)

    dw = [parameter(rng.standard_normal(s) * 0.3) for s in ((4, 2, 3, 3), (4,), (4, 4, 3, 3), (4,))]
    xd = Tensor(rng.uniform(-1, 1, (1, 2, 8, 8)))
    proj = projection(rng, (1, 4, 8, 8))
    check("double_conv/w1", lambda: proj(double_conv(xd, *dw)), dw[0], **frozen)

    ucfg = UnetConfig(depth=2, base_channels=4, in_channels=2, out_channels=2)
    up = init_unet(ucfg, rng)
    xn = Tensor(rng.uniform(-1, 1, (1, 2, 16, 16)))
    proj = projection(rng, (1, 2, 16, 16))
    for name in ("enc0.w1", "enc1.w2", "bottleneck.w1", "dec1.w1", "dec0.w2", "final.w"):
        check(f"unet/{name}", lambda: proj(unet_forward(xn, up, ucfg)), up.named_parameters()[name], **frozen)

    mcfg = UwnoConfig(channels=4, wno_blocks=2, wavelet="db4", level=2, unet_depth=3, height=32, width=32)
    mp = init_params(mcfg)
    img = Tensor(rng.random((2, 1, 32, 32)))
    proj = projection(rng, (2, 1, 32, 32))
    named = mp.named_parameters()
    for name in ("lift.w", "wno1.kernel", "convnet.w2", "unet.enc2.w1", "head.w1", "head.w2"):
        check(f"uwno/{name}", lambda: proj(uwno_forward(img, mp)), named[name], **frozen)

    probs = parameter(rng.uniform(0.05, 0.95, (2, 1, 8, 8)))
    gt = Tensor(rng.random((2, 1, 8, 8)) < 0.4)
    check("soft_dice_loss", lambda: soft_dice_loss(probs, gt), probs)
    return errs


@pytest.mark.criterion(4, "gradient checks")
def test_gradient_checks(record_property):
    started = time.perf_counter()
    errs = _gradient_errors()
    seconds = time.perf_counter() - started
    worst = max(errs, key=errs.get)
    failing = sorted(k for k, v in errs.items() if v >= GRAD_TOL)
    record_property("detail", f"{len(errs)} checks, worst {worst} {errs[worst]:.2e}, {seconds:.1f}s"
                    + (f", failing {failing}" if failing else ""))
    assert not failing and seconds < 60


@pytest.mark.criterion(5, "dice oracle")
def test_dice_oracle(record_property):
    rng = np.random.default_rng(105)
    mismatches = 0
    for _ in range(1000):
        pred = (rng.random((16, 16)) < rng.random()).astype(int)
        gt = (rng.random((16, 16)) < rng.random()).astype(int)
        inter = int(np.sum(pred & gt))
        size = int(pred.sum() + gt.sum())
        expected = 1.0 if size == 0 else 2 * inter / size
        mismatches += dice_score(confusion_counts(pred, gt)) != expected
    record_property("detail", f"{mismatches} of 1000 pairs disagree")
    assert mismatches == 0


@pytest.mark.criterion(6, "adam reference")
def test_adam_reference(record_property):
    rng = np.random.default_rng(106)
    worst = 0.0
    for _ in range(100):
        grads = rng.standard_normal(50).astype(np.float32)
        p = parameter(np.zeros(1))
        state = AdamState.for_params([p])
        m = v = theta = 0.0
        for t, g in enumerate(grads.astype(np.float64), start=1):
            p.grad = np.array([g], dtype=np.float32)
            adam_step([p], state, 1e-3)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            worst = max(worst, abs(float(p.data[0]) - theta))
    record_property("detail", f"max deviation {worst:.2e} over 100 x 50 steps")
    assert worst < 1e-7


@pytest.mark.criterion(7, "overfit")
@pytest.mark.slow
def test_overfit(tmp_path, record_property):
    data, out = tmp_path / "data", tmp_path / "run"
    assert cli("synth", "--n", "8", "--out", str(data)).returncode == 0
    started = time.perf_counter()
    proc = cli("train", "--data-dir", str(data), "--epochs", "300", "--out", str(out), *DESK)
    minutes = (time.perf_counter() - started) / 60
    assert proc.returncode == 0, proc.stderr
    history = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    first = [r["train_loss"] for r in history[:10]]
    rises = [r["epoch"] for r, prev in zip(history[1:10], history[:9]) if r["train_loss"] >= prev["train_loss"]]
    final = history[-1]["train_dice"]
    best = max(r["train_dice"] for r in history)
    record_property("detail", f"final train dice {final:.4f} (best {best:.4f}), first-10 loss "
                    f"{'strictly decreasing' if not rises else f'rises at epochs {rises}'}, "
                    f"{len(history)} epochs in {minutes:.1f} min")
    assert final >= 0.95
    assert all(b < a for a, b in zip(first, first[1:]))
    assert minutes < 15


@pytest.mark.criterion(8, "determinism")
def test_determinism(tmp_path, record_property):
    data = tmp_path / "data"
    assert cli("synth", "--n", "8", "--out", str(data), "--size", "64").returncode == 0
    logs, ckpts = [], []
    for name in ("a", "b"):
        proc = cli("train", "--data-dir", str(data), "--epochs", "3", "--size", "64", "--val-fraction", "0.25",
                   "--out", str(tmp_path / name), *DESK)
        assert proc.returncode == 0, proc.stderr
        logs.append((tmp_path / name / "metrics.jsonl").read_bytes())
        ckpts.append((tmp_path / name / "final.uwno").read_bytes())
    record_property("detail", f"metrics identical: {logs[0] == logs[1]}, checkpoints identical: {ckpts[0] == ckpts[1]}")
    assert logs[0] == logs[1] and ckpts[0] == ckpts[1]


@pytest.mark.criterion(9, "checkpoint round trip")
def test_checkpoint_round_trip(tmp_path, record_property):
    params = init_params(UwnoConfig())
    path = tmp_path / "p.uwno"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    exact = all(loaded[k].tobytes() == t.data.tobytes() for k, t in params.named_parameters().items())
    codes = []
    assert cli("synth", "--n", "1", "--out", str(tmp_path / "d")).returncode == 0
    image = tmp_path / "d" / "images" / "synth_0.png"
    for offset, byte in ((0, b"X"), (4, b"\x02")):
        raw = bytearray(path.read_bytes())
        raw[offset:offset + 1] = byte
        bad = tmp_path / f"bad{offset}.uwno"
        bad.write_bytes(bytes(raw))
        proc = cli("predict", "--checkpoint", str(bad), "--input", str(image), "--out", str(tmp_path / "m.png"))
        codes.append(proc.returncode)
    record_property("detail", f"bit-exact {exact}, corrupt magic/version exit codes {codes}")
    assert exact and codes == [1, 1]


@pytest.mark.criterion(10, "dataset smoke check")
def test_dataset_smoke(tmp_path, record_property):
    root = os.environ.get("UWNO_DATASET")
    if not root:
        pytest.skip("set UWNO_DATASET to a directory with images/ and masks/ to run this check")
    proc = cli("train", "--data-dir", root, "--epochs", "25", "--out", str(tmp_path / "run"), *DESK,
               timeout=6 * 3600)
    assert proc.returncode == 0, proc.stderr
    history = [json.loads(line) for line in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    best = max(r["val_dice"] or 0.0 for r in history)
    record_property("detail", f"best validation dice {best:.4f} in 25 epochs")
    assert best >= 0.5
