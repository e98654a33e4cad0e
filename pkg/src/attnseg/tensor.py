"""Dense NCHW tensors with a reverse-mode gradient tape.

Every op is a pure function of its inputs. When a :class:`Tape` is active and
at least one input is tracked, the op appends a node holding a vector-Jacobian
closure; :meth:`Tape.backward` replays those nodes in reverse creation order.

Storage is float32 by default. :func:`precision` switches the storage dtype for
a block of code, which the finite-difference oracle uses to evaluate functions
in float64.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "precision",
    "no_grad",
    "record",
    "add",
    "sub",
    "mul",
    "neg",
    "reshape",
    "concat",
    "tensor_sum",
    "conv2d",
    "pool2d",
    "dense",
    "activation",
    "sigmoid",
    "relu",
    "softmax_channels",
    "upsample_nearest",
    "numeric_grad",
    "finite_diff_check",
]


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient contains NaN or Inf."""


_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("attnseg_dtype", default=np.float32)
_TAPE_IDS = itertools.count()
_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("attnseg_tape", default=None)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def no_grad():
    """Run a block without recording onto any active tape."""
    token = _TAPE.set(None)
    try:
        yield
    finally:
        _TAPE.reset(token)


class Tensor:
    """Immutable dense array plus an optional handle into the active tape."""

    __slots__ = ("data", "requires_grad", "grad_id", "_tape_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_DTYPE.get(), copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad_id: int | None = None
        self._tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only record of differentiable ops, used as a context manager.

    Nodes are appended as ops execute, so list order is a topological order.
    """

    nodes: list[Node] = field(default_factory=list)
    gradients: dict[Tensor, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self._token = None
        self._id = next(_TAPE_IDS)

    def __enter__(self) -> "Tape":
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _TAPE.reset(self._token)
        self._token = None
        return False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape_id == self._id

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
        """Propagate d(loss)/d(.) back through the tape.

        Returns a map from every tracked leaf reached (plus every tensor in
        ``params``, zero-filled when unreached) to its gradient.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape_id != self._id:
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss.grad_id + 1]):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.vjp(g_out)):
                if g is None or not self.tracks(inp):
                    continue
                if g.shape != inp.shape:
                    raise AssertionError(f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
                key = id(inp)
                grads[key] = grads[key] + g if key in grads else g
                if inp._tape_id != self._id:
                    leaves[key] = inp

        out: dict[Tensor, Tensor] = {}
        for key, leaf in leaves.items():
            out[leaf] = Tensor(grads[key])
        for p in params or ():
            if p not in out:
                out[p] = Tensor(np.zeros(p.shape))
        self.gradients = out
        return out


def record(op: str, inputs: Sequence, out: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap ``out`` as a Tensor and append a node if any input is tracked.

    ``vjp`` maps the output cotangent to one cotangent (or None) per input.
    Custom differentiable ops outside this module are built on this.
    """
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor(out)
    tape = _TAPE.get()
    if tape is not None and any(isinstance(t, Tensor) and tape.tracks(t) for t in inputs):
        result._tape_id = tape._id
        result.grad_id = len(tape.nodes)
        tape.nodes.append(Node(op, tuple(inputs), result, vjp))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ContractError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), out, vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ContractError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))]

    return record("concat", tensors, out, vjp)


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, dtype=np.float64)
    return record("sum", (a,), out, lambda g: (np.broadcast_to(g, a.shape).copy(),))


# convolution -----------------------------------------------------------------


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x, kernel, stride: int = 1, padding: str = "same", bias=None) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is N×Cin×H×W, ``kernel`` Cout×Cin×kh×kw, ``bias`` optional Cout.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ContractError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    if padding == "same":
        pt, pb = _same_pad(h, kh, stride)
        pl, pr = _same_pad(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ContractError(f"unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ContractError(f"conv2d kernel {kernel.shape} larger than padded input {(n, cin, hp, wp)}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ContractError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def vjp(g):
        g = g.astype(x.data.dtype, copy=False)
        g_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        g_xp = np.zeros(xp.shape, dtype=np.result_type(g, kernel.data))
        for i in range(kh):
            for j in range(kw):
                g_xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                    "nohw,oc->nchw", g, kernel.data[:, :, i, j], optimize=True
                )
        g_x = g_xp[:, :, pt : pt + h, pl : pl + w]
        grads = [g_x, g_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", inputs, np.ascontiguousarray(out), vjp)


# pooling ---------------------------------------------------------------------


def pool2d(x, mode: str = "max", window: int = 2, stride: int | None = None, scope: str = "windowed") -> Tensor:
    """Max or average pooling over windows, all positions, or all channels.

    ``scope="global_spatial"`` yields N×C×1×1, ``"global_channel"`` N×1×H×W.
    Max pooling sends the whole gradient to the first maximal element in
    row-major order.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ContractError(f"pool2d expects N×C×H×W input, got {x.shape}")
    if mode not in ("max", "avg"):
        raise ContractError(f"unknown pooling mode {mode!r}")
    n, c, h, w = x.shape
    if scope == "global_spatial":
        if h * w == 0:
            raise ContractError(f"pool2d: empty spatial extent in {x.shape}")
        return _global_pool(x, mode, axis=2, flat=(n, c, h * w), keep=(n, c, 1, 1))
    if scope == "global_channel":
        if c == 0:
            raise ContractError(f"pool2d: empty channel extent in {x.shape}")
        return _global_pool(x, mode, axis=1, flat=None, keep=(n, 1, h, w))
    if scope != "windowed":
        raise ContractError(f"unknown pooling scope {scope!r}")

    stride = stride or window
    if window < 1 or window > h or window > w:
        raise ContractError(f"pool2d window {window} does not fit input {x.shape}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    windows = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = windows.reshape(n, c, ho, wo, window * window)

    if mode == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    else:
        out = flat.mean(axis=-1, dtype=np.float64)

    def vjp(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        for k in range(window * window):
            i, j = divmod(k, window)
            contrib = g * (arg == k) if mode == "max" else g / (window * window)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        return (gx,)

    return record(f"{mode}pool", (x,), out, vjp)


def _global_pool(x: Tensor, mode: str, axis: int, flat, keep) -> Tensor:
    data = x.data.reshape(flat) if flat is not None else x.data
    if mode == "max":
        arg = data.argmax(axis=axis)
        out = np.take_along_axis(data, np.expand_dims(arg, axis), axis=axis)
    else:
        out = data.mean(axis=axis, keepdims=True, dtype=np.float64)
    out = out.reshape(keep)
    size = data.shape[axis]

    reduced = tuple(1 if i == axis else d for i, d in enumerate(data.shape))

    def vjp(g):
        g = g.reshape(reduced)
        if mode == "max":
            positions = np.arange(size).reshape([size if i == axis else 1 for i in range(data.ndim)])
            gx = (positions == np.expand_dims(arg, axis)) * g
        else:
            gx = np.broadcast_to(g / size, data.shape)
        return (np.asarray(gx, dtype=np.float64).reshape(x.shape),)

    return record(f"global_{mode}pool", (x,), out, vjp)


# dense / activations ---------------------------------------------------------


def dense(x, weights, bias=None) -> Tensor:
    """Matrix product over the last axis plus an optional broadcast bias."""
    x, weights = as_tensor(x), as_tensor(weights)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ContractError(f"dense dimension mismatch: input {x.shape}, weights {weights.shape}")
    out = x.data @ weights.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weights.shape[1],):
            raise ContractError(f"dense bias shape {bias.shape} does not match weights {weights.shape}")
        out = out + bias.data

    def vjp(g):
        gx = g @ weights.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return grads

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return record("dense", inputs, out, vjp)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data.astype(np.float64))
    return record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0), lambda g: (g * mask,))


def activation(x, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ContractError(f"unknown activation {kind!r}")


def softmax_channels(logits) -> Tensor:
    """Per-pixel softmax over axis 1 of an N×K×H×W tensor."""
    logits = as_tensor(logits)
    if logits.ndim != 4 or logits.shape[1] < 2:
        raise ContractError(f"softmax_channels expects N×K×H×W with K >= 2, got {logits.shape}")
    z = logits.data.astype(np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record("softmax", (logits,), p, vjp)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ContractError(f"upsample expects N×C×H×W input, got {x.shape}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def vjp(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record("upsample", (x,), out, vjp)


# gradient checking -----------------------------------------------------------


def numeric_grad(f: Callable[[Tensor], Tensor], at, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` at ``at``, evaluated in float64."""
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    base = np.array(as_tensor(at).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    with no_grad(), precision(np.float64):
        for i in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                x = base.copy()
                x.reshape(-1)[i] += sign * eps
                y = f(Tensor(x))
                v = y.item() if isinstance(y, Tensor) else float(y)
                if not np.isfinite(v):
                    raise NonFiniteError(f"f is non-finite at coordinate {i} (offset {sign * eps:+g})")
                vals.append(v)
            flat[i] = (vals[0] - vals[1]) / (2 * eps)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], at) -> np.ndarray:
    """Gradient of scalar ``f`` at ``at`` from the tape, in the current precision."""
    with Tape() as tape:
        x = Tensor(as_tensor(at).data, requires_grad=True)
        y = f(x)
        if not isinstance(y, Tensor) or y._tape_id != tape._id:
            return np.zeros(x.shape)
        return tape.backward(y, [x])[x].data.astype(np.float64)


def finite_diff_check(f: Callable[[Tensor], Tensor], at, eps: float = 1e-3) -> float:
    """Largest coordinate error between tape and central-difference gradients.

    The error is scaled by the larger of the two gradients' max-magnitudes, so
    it is a relative error that stays meaningful for near-zero coordinates.
    Returns 0.0 when both gradients vanish.
    """
    a = analytic_grad(f, at)
    n = numeric_grad(f, at, eps)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)
