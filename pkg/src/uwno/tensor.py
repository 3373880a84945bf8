"""Dense float32 tensors with reverse-mode automatic differentiation.

Only the handful of operations the segmentation model needs are provided:
convolution, 2x2 max pooling, nearest-neighbour upsampling, pointwise
activations, same-shape arithmetic, reductions to a scalar, reshaping,
slicing and concatenation.  There is no broadcasting beyond Python scalars.

Every operation records its inputs and a backward rule on the output
tensor.  :func:`backward` orders the recorded graph topologically and runs
the rules in reverse, so each node is visited exactly once.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, DimensionError, NonFiniteError, StateError

DTYPE = np.float32

_grad_enabled = contextvars.ContextVar("uwno_grad_enabled", default=True)
# Piecewise-linear ops (relu, max pooling) report their branch choice
# through here.  In "record" mode the choices are appended to a list; in
# "replay" mode they are taken from a previous recording instead of being
# recomputed, which pins the function to one linear piece for finite
# differences.
_branch_tape = contextvars.ContextVar("uwno_branch_tape", default=None)


class _BranchTape:
    def __init__(self, replay: list[np.ndarray] | None = None):
        self.choices: list[np.ndarray] = []
        self.replay = replay

    def choose(self, computed: np.ndarray) -> np.ndarray:
        if self.replay is not None:
            k = len(self.choices)
            if k >= len(self.replay) or self.replay[k].shape != computed.shape:
                raise StateError("branch replay does not match the recorded evaluation")
            computed = self.replay[k]
        self.choices.append(computed)
        return computed


def _branch(computed: np.ndarray) -> np.ndarray:
    tape = _branch_tape.get()
    return computed if tape is None else tape.choose(computed)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for evaluation)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """An N-dimensional float32 array with an optional gradient slot.

    Args:
        data: anything ``np.array`` accepts; it is copied and cast to float32.
        requires_grad: mark the tensor as a leaf whose gradient should be
            populated by :func:`backward`.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        data = np.asarray(data, dtype=DTYPE)
        # float64 accumulation cannot overflow on float32 inputs, so this is exact
        if not np.isfinite(np.sum(data, dtype=np.float64)):
            raise NonFiniteError(f"{op} produced a non-finite value")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._consumed = False
        track = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, negate(other)) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(negate(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return negate(self)


def parameter(data) -> Tensor:
    """A leaf tensor that requires a gradient."""
    return Tensor(data, requires_grad=True)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _need_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected a (B, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays.  The graph is
    released afterwards; calling again on the same loss raises
    :class:`StateError`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward was already run on this graph; recompute the forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires a gradient")

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=DTYPE)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# convolution and resampling


def _im2col(x: np.ndarray, k: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix of shape (B*Ho*Wo, k*k*C), ordered (ki, kj, c) per row."""
    B, C, H, W = x.shape
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    if k == 1 and padding == 0:
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(B * H * W, C), Ho, Wo
    xp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=DTYPE)
    xp[:, padding:padding + H, padding:padding + W, :] = x.transpose(0, 2, 3, 1)
    # in NHWC one kernel row of a patch (kj, c) is a contiguous run of k*C floats
    sb, sh, sw, sc = xp.strides
    view = as_strided(xp, (B, Ho, Wo, k, k * C), (sb, sh, sw, sh, sc), writeable=False)
    return np.ascontiguousarray(view).reshape(B * Ho * Wo, k * k * C), Ho, Wo


def _col2im(gcols: np.ndarray, shape: tuple, k: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    B, C, H, W = shape
    if k == 1 and padding == 0:
        return gcols.reshape(B, H, W, C).transpose(0, 3, 1, 2)
    gc = gcols.reshape(B, Ho, Wo, k, k, C)
    gxp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + Ho, j:j + Wo, :] += gc[:, :, :, i, j, :]
    return gxp[:, padding:padding + H, padding:padding + W, :].transpose(0, 3, 1, 2)


def _correlate(x: np.ndarray, w: np.ndarray, padding: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw cross-correlation; returns the NCHW result and the patch matrix."""
    B, C = x.shape[:2]
    O, _, k, _ = w.shape
    cols, Ho, Wo = _im2col(x, k, padding)
    out = cols @ w.transpose(2, 3, 1, 0).reshape(k * k * C, O)
    return out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding and stride 1.

    Args:
        x: input of shape (B, Cin, H, W).
        w: square, odd-sized kernels of shape (Cout, Cin, k, k).
        b: optional bias of shape (Cout,).
        padding: zero padding added on every border; ``(k - 1) // 2``
            preserves the spatial size.

    Returns:
        Tensor of shape (B, Cout, H + 2*padding - k + 1, W + 2*padding - k + 1).
    """
    _need_4d(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be (Cout, Cin, k, k) with odd k, got {w.shape}")
    B, C, H, W = x.shape
    O, Cw, k, _ = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d: input has {C} channels but kernel expects {Cw}")
    if b is not None and b.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {b.shape} does not match {O} output channels")
    if padding < 0 or H + 2 * padding < k or W + 2 * padding < k:
        raise DimensionError(f"conv2d: {k}x{k} kernel with padding {padding} does not fit {H}x{W} input")

    out, cols = _correlate(x.data, w.data, padding)
    if b is not None:
        out = out + b.data[:, None, None]
    Ho, Wo = out.shape[2:]

    def _backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gx = None
        if x.requires_grad:
            if padding <= k - 1:
                # stride-1 transposed conv == correlation with the flipped, transposed kernel
                flipped = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = _correlate(g, flipped, k - 1 - padding)[0]
            else:
                wm = w.data.transpose(2, 3, 1, 0).reshape(k * k * C, O)
                gx = _col2im(gm @ wm.T, x.shape, k, padding, Ho, Wo)
        gw = (cols.T @ gm).reshape(k, k, C, O).transpose(3, 2, 0, 1) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(np.ascontiguousarray(out), parents, _backward, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Ties send the gradient to the first window element in row-major order.
    """
    _need_4d(x, "max_pool2d")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"max_pool2d: spatial dims must be even, got {H}x{W}")
    windows = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = _branch(windows.argmax(axis=-1)[..., None])
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros(windows.shape, dtype=DTYPE)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return Tensor._from_op(out, (x,), _backward, "max_pool2d")


def upsample_nearest2d(x: Tensor) -> Tensor:
    """Replicate every cell into a 2x2 block."""
    _need_4d(x, "upsample_nearest2d")
    B, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (B, C, H, 2, W, 2)).reshape(B, C, 2 * H, 2 * W)

    def _backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), _backward, "upsample_nearest2d")


# ---------------------------------------------------------------------------
# pointwise


def relu(x: Tensor) -> Tensor:
    mask = _branch(x.data > 0)
    out = np.where(mask, x.data, DTYPE(0))
    return Tensor._from_op(out, (x,), lambda g: (g * mask,), "relu")


# Saturated logits give sigmoid values and slopes in the float32 subnormal
# range; once those reach the backward GEMMs every multiply takes a slow
# microcode path (a trained model's step runs ~40% slower).  Values below
# this floor are flushed to zero, an absolute change under 1e-30.
_SIGMOID_FLOOR = DTYPE(2.0**-100)


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + e), e / (1 + e)).astype(DTYPE)
    out[out < _SIGMOID_FLOOR] = 0
    slope = out * (1 - out)
    slope[slope < _SIGMOID_FLOOR] = 0
    return Tensor._from_op(out, (x,), lambda g: (g * slope,), "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor._from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return Tensor._from_op(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def negate(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "negate")


def scale(x: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return Tensor._from_op(x.data + DTYPE(c), (x,), lambda g: (g,), "add_scalar")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all elements as a 0-d tensor."""
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE)
    return Tensor._from_op(out, (x,), lambda g: (np.full(x.shape, g, dtype=DTYPE),), "sum")


# ---------------------------------------------------------------------------
# layout


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Join tensors along ``axis``; all other dims must match."""
    if not tensors:
        raise DimensionError("concat: nothing to join")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for d, (s, r) in enumerate(zip(t.shape, ref)) if d != axis):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack (B, Ca, H, W) and (B, Cb, H, W) into (B, Ca + Cb, H, W)."""
    _need_4d(a, "concat_channels")
    _need_4d(b, "concat_channels")
    return concat((a, b), axis=1)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """The half-open range ``[start, stop)`` of ``x`` along ``axis``."""
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"narrow: range [{start}, {stop}) outside axis of length {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def _backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return Tensor._from_op(x.data[index], (x,), _backward, "narrow")


# ---------------------------------------------------------------------------
# verification harness


def _evaluate(f: Callable[[], Tensor], replay: list[np.ndarray] | None = None) -> tuple[float, list[np.ndarray]]:
    tape = _BranchTape(replay)
    token = _branch_tape.set(tape)
    try:
        value = f().item()
    finally:
        _branch_tape.reset(token)
    return value, tape.choices


def finite_diff_check(f: Callable[[], Tensor], theta: Tensor, step: float = 1e-2,
                      n_coords: int = 8, seed: int = 0, freeze_branches: bool = False) -> float:
    """Compare the autodiff gradient of ``f`` against central differences.

    ``f`` is called with no arguments and must read ``theta`` (a leaf with
    ``requires_grad``) when building its result.  A seeded random sample of
    ``max(n_coords, 5)`` coordinates (capped at ``theta.size``) is perturbed
    by ``+-step``.

    Args:
        f: builds the scalar under test.
        theta: the leaf tensor to perturb.
        step: perturbation size.
        n_coords: number of coordinates to sample.
        seed: seed for the coordinate sample.
        freeze_branches: replay the ReLU masks and max-pool choices of the
            unperturbed evaluation during the perturbed ones.  Deep
            piecewise-linear compositions almost always cross some kink
            under a 1e-2 perturbation; freezing differentiates the linear
            piece the backward pass actually uses.  Leave it off when the
            kink logic itself is under test.

    Returns:
        The max over sampled coordinates of
        ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    if not theta.requires_grad:
        raise ContractError("theta must require a gradient")
    loss = f()
    if loss.data.size != 1:
        raise ContractError(f"f must return a scalar, got shape {loss.shape}")
    theta.grad = None
    backward(loss)
    if theta.grad is None:
        raise ContractError("f does not depend on theta")
    analytic = theta.grad.reshape(-1)

    rng = np.random.default_rng(seed)
    coords = rng.choice(theta.size, size=min(max(n_coords, 5), theta.size), replace=False)
    flat = theta.data.reshape(-1)
    worst = 0.0
    with no_grad():
        replay = _evaluate(f)[1] if freeze_branches else None
        for i in coords:
            orig = flat[i]
            flat[i] = orig + DTYPE(step)
            hi = float(flat[i])
            up = _evaluate(f, replay)[0]
            flat[i] = orig - DTYPE(step)
            lo = float(flat[i])
            down = _evaluate(f, replay)[0]
            flat[i] = orig
            # divide by the perturbation float32 actually realised
            numeric = (up - down) / (hi - lo)
            a = float(analytic[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst
