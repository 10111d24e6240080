"""Dense float32 tensors with tape-based reverse-mode autodiff.

Operations record themselves on the active :class:`Tape` whenever one of their
inputs requires a gradient. :func:`backward` replays that tape in reverse.
Reductions and convolution inner products accumulate in float64 and store the
result as float32.

    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = tsum(mul(w, w))
    backward(loss)        # w.grad == [2, 4]
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

DTYPE = np.float32

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "mecam_active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


@dataclass
class _Op:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are recorded.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self._outputs: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, name, inputs, output, backward_fn) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._outputs:
                self._leaves.setdefault(id(t), t)
        self.ops.append(_Op(tuple(inputs), output, backward_fn, name))
        self._outputs.add(id(output))
        output._tape = self

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


def _check_finite(data: np.ndarray, name: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {name}")


def _result(name: str, data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    _check_finite(data, name)
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, inputs, out, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every leaf recorded on the tape that produced ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. Leaves recorded on the
    tape that do not influence ``loss`` receive zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not produced under an active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    leaf_ids = set(tape._leaves)
    leaf_grads: dict[int, np.ndarray] = {}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            store = leaf_grads if id(t) in leaf_ids else grads
            key = id(t)
            store[key] = store[key] + gi if key in store else gi
    for key, leaf in tape._leaves.items():
        g = leaf_grads.get(key)
        g = np.zeros(leaf.shape, dtype=DTYPE) if g is None else np.asarray(g, dtype=DTYPE)
        _check_finite(g, "backward")
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def sgd_step(
    params: Iterable[Tensor],
    lr: float,
    weight_decay: float = 0.0,
    momentum: float = 0.0,
    velocity: dict[int, np.ndarray] | None = None,
) -> None:
    """In-place ``p <- p - lr * (grad + weight_decay * p)``, then zero the grads.

    With ``momentum > 0`` the step uses a heavy-ball buffer kept in ``velocity``
    (keyed by ``id(p)``): ``b <- momentum * b + (grad + weight_decay * p)``,
    ``p <- p - lr * b``.
    """
    for p in params:
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        d = grad.astype(np.float64) + weight_decay * p.data.astype(np.float64)
        if momentum:
            if velocity is None:
                raise ValueError("momentum needs a velocity dict")
            buf = velocity.get(id(p))
            d = d if buf is None else momentum * buf + d
            velocity[id(p)] = d
        p.data = (p.data.astype(np.float64) - lr * d).astype(DTYPE)
        _check_finite(p.data, "sgd_step")
        p.grad = np.zeros_like(p.data)


# --- elementwise -------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result("add", a.data + c, (a,), lambda g: (g,))
    a = as_tensor(a)
    _same_shape(a, b, "add")
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result("sub", a.data - c, (a,), lambda g: (g,))
    a = as_tensor(a)
    _same_shape(a, b, "sub")
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result("mul", a.data * DTYPE(c), (a,), lambda g: (g * c,))
    a = as_tensor(a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def tsum(x: Tensor) -> Tensor:
    total = np.sum(x.data, dtype=np.float64)
    shape = x.shape
    return _result("sum", total, (x,), lambda g: (np.broadcast_to(g, shape),))


def mse_mean(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mse_mean")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size

    def bwd(g):
        d = 2.0 * diff / n * g
        return d, -d

    return _result("mse_mean", np.mean(diff * diff), (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape N x d and ``weight`` out x d."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd = x.data.astype(np.float64)
    wd = weight.data.astype(np.float64)
    out = xd @ wd.T
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        inputs = inputs + (bias,)

    def bwd(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result("linear", out, inputs, bwd)


# --- convolution and pooling ------------------------------------------------


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW input and OIKK weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and weight {weight.shape} must be rank 4")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, weight {weight.shape} expects {i}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.astype(np.float64).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, hp, wp))
        for di in range(kh):
            for dj in range(kw):
                dxp[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += (
                    dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, bwd)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial extents must be even.

    The backward pass routes each gradient to the first maximal element of its
    window in row-major order.
    """
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial extents must be even, got {x.shape}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros(win.shape, dtype=np.float64)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result("max_pool2d", out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: N x C x H x W -> N x C."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64)

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),)

    return _result("global_avg_pool", out, (x,), bwd)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel affine normalisation.

    Training mode normalises with batch statistics (biased variance) and updates
    the running buffers in place: ``r <- momentum * r + (1 - momentum) * batch``.
    Inference mode uses the running buffers.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected rank 2 or 4, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params {gamma.shape} do not match {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data.astype(np.float64)
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean[...] = momentum * running_mean + (1 - momentum) * mean
        running_var[...] = momentum * running_var + (1 - momentum) * var
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gamma.data.astype(np.float64).reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)
    m = xd.size // c

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return _result("batch_norm", out, (x, gamma, beta), bwd)


# --- softmax family ----------------------------------------------------------


def _stable_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax on a plain array, computed in float64."""
    return _stable_softmax(np.asarray(z, dtype=np.float64), axis)


def logsumexp_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _check_axis(x: Tensor, axis: int, name: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{name}: axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "softmax")
    s = _stable_softmax(x.data.astype(np.float64), axis)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result("softmax", s, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "log_softmax")
    z = x.data.astype(np.float64)
    out = z - logsumexp_np(z, axis=axis)[(slice(None),) * axis + (None,)]
    s = np.exp(out)

    def bwd(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be N x C, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c}), got {labels.tolist()}")
    z = logits.data.astype(np.float64)
    lsm = z - logsumexp_np(z, axis=1)[:, None]
    loss = -lsm[np.arange(n), labels].mean()

    def bwd(g):
        d = np.exp(lsm)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _result("cross_entropy", loss, (logits,), bwd)
