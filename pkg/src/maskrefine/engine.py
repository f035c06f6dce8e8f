"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor` objects. An op whose inputs
require gradients links its output to them together with a closure that
pushes the output gradient back; :func:`backward` orders those links with
:class:`Graph` and runs the closures in reverse.
"""
from __future__ import annotations

import contextlib
from collections import Counter
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64

_grad_enabled = True
_op_counters: list[Counter] = []


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name!r}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"

    # operator sugar; the functional forms below are the real ops
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __sub__(self, other: Tensor) -> Tensor:
        return add(self, scale(other, -1.0))

    def sum(self) -> Tensor:
        return tsum(self)

    def mean(self) -> Tensor:
        return mean(self)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=requires_grad)


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int, name: str | None = None) -> Tensor:
    """Parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True, name=name)


def he_uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int, name: str | None = None) -> Tensor:
    """Parameter drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)); keeps ReLU activations from shrinking with depth."""
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True, name=name)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_ops() -> Iterator[Counter]:
    """Count executed ops by name inside the block."""
    counter: Counter = Counter()
    _op_counters.append(counter)
    try:
        yield counter
    finally:
        _op_counters.remove(counter)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(data, f"output of {op}")
    for counter in _op_counters:
        counter[op] += 1
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


class Graph:
    """Ordered record of the ops that produced a tensor.

    ``nodes`` is a topological order (inputs before outputs) of every
    recorded tensor reachable from the output. The traversal is iterative
    and visits parents in argument order, so the order is deterministic.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    @property
    def ops(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is not None]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Populate ``.grad`` on every requires-grad tensor that feeds ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    if graph is None:
        graph = Graph.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            _check_finite(node.grad, f"gradient of {node.op}")
            node._backward(node.grad)
    for node in graph.nodes:
        if node._backward is None and node.grad is not None:
            _check_finite(node.grad, f"gradient of {node.name or 'leaf'}")
    return graph


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, "mul", (a, b), bw)


def shift(x: Tensor, c: float) -> Tensor:
    """x + c for a scalar constant c."""
    return _make(x.data + c, "shift", (x,), lambda g: _accumulate(x, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, "scale", (x,), lambda g: _accumulate(x, g * c))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: _accumulate(x, g * mask))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, "sigmoid", (x,), lambda g: _accumulate(x, g * y * (1.0 - y)))


def tsum(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), "sum", (x,), lambda g: _accumulate(x, np.broadcast_to(g, x.shape)))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.asarray(x.data.mean()), "mean", (x,), lambda g: _accumulate(x, np.broadcast_to(g / n, x.shape)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` of shape (N, in) and ``weight`` (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            _accumulate(weight, g.T @ x.data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "linear", parents, bw)


# ---------------------------------------------------------------- spatial ops


def _pad(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zero":
        return np.pad(x, widths)
    return np.pad(x, widths, mode="reflect")


def _fold_reflect(g: np.ndarray, pad: int, axis: int, n: int) -> np.ndarray:
    """Adjoint of reflect-padding one axis: fold the border back onto the interior."""
    core = np.take(g, np.arange(pad, pad + n), axis=axis)
    head = np.flip(np.take(g, np.arange(0, pad), axis=axis), axis=axis)
    tail = np.flip(np.take(g, np.arange(pad + n, n + 2 * pad), axis=axis), axis=axis)
    idx = [slice(None)] * g.ndim
    idx[axis] = slice(1, pad + 1)
    core[tuple(idx)] += head
    idx[axis] = slice(n - 1 - pad, n - 1)
    core[tuple(idx)] += tail
    return core


def _unpad(g: np.ndarray, pad: int, mode: str, h: int, w: int) -> np.ndarray:
    if pad == 0:
        return g
    if mode == "zero":
        return g[:, :, pad:pad + h, pad:pad + w]
    return _fold_reflect(_fold_reflect(g, pad, 2, h), pad, 3, w)


def _full_correlation(g: np.ndarray, weight: np.ndarray, hp: int, wp: int) -> np.ndarray:
    """Gradient w.r.t. the padded input of a stride-1 correlation: correlate the
    zero-padded output gradient with the flipped, channel-transposed kernel."""
    n, cout, ho, wo = g.shape
    _, cin, kh, kw = weight.shape
    if kh == 1 and kw == 1:
        out = weight[:, :, 0, 0].T @ g.transpose(1, 0, 2, 3).reshape(cout, -1)
        return np.ascontiguousarray(out.reshape(cin, n, hp, wp).transpose(1, 0, 2, 3))
    gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    sn, sc, sh, sw = gp.strides
    cols = as_strided(gp, shape=(cout, kh, kw, n, hp, wp), strides=(sc, sh, sw, sn, sh, sw)).reshape(cout * kh * kw, -1)
    wf = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
    out = wf @ cols
    return np.ascontiguousarray(out.reshape(cin, n, hp, wp).transpose(1, 0, 2, 3))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    pad_mode: str = "zero",
) -> Tensor:
    """2-D cross-correlation over (N, C, H, W) input with (Cout, Cin, kh, kw) kernels.

    ``pad_mode="reflective"`` mirrors interior rows/columns without
    repeating the border pixel.
    """
    if pad_mode not in ("zero", "reflective"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} outputs")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    if pad_mode == "reflective" and (pad >= h or pad >= w):
        raise ValueError(f"conv2d: reflective pad {pad} too large for {h}x{w} input")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = _pad(x.data, pad, "zero" if pad_mode == "zero" else "reflect")
    sn, sc, sh, sw = xp.strides
    cols = as_strided(
        xp, shape=(c, kh, kw, n, ho, wo), strides=(sc, sh, sw, sn, sh * stride, sw * stride)
    ).reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(cout, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        if weight.requires_grad:
            _accumulate(weight, (g2 @ cols.T).reshape(weight.shape))
        if bias is not None:
            _accumulate(bias, g2.sum(axis=1))
        if x.requires_grad:
            if stride == 1:
                gxp = _full_correlation(g, weight.data, hp, wp)
            else:
                gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo).transpose(1, 2, 3, 0, 4, 5)
                gxp = np.zeros((n, c, hp, wp))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
            _accumulate(x, _unpad(gxp, pad, pad_mode, h, w))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv2d", parents, bw)


def maxpool2(x: Tensor) -> Tensor:
    """Disjoint 2x2 max pooling; ties go to the first window element in row-major order."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2 expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = np.zeros_like(win)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, gx)

    return _make(out, "maxpool2", (x,), bw)


@lru_cache(maxsize=64)
def upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) matrix of the half-pixel, edge-clamped linear interpolation."""
    out = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        out[o, i0] += 1.0 - frac
        out[o, i1] += frac
    out.setflags(write=False)
    return out


def bilinear_up2(x: Tensor) -> Tensor:
    """Bilinear upsampling by 2 along both spatial axes."""
    if x.ndim != 4:
        raise ValueError(f"bilinear_up2 expects 4-D input, got {x.shape}")
    _, _, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("bilinear_up2 needs non-empty spatial extents")
    ah, aw = upsample_matrix(h), upsample_matrix(w)
    out = ah @ (x.data @ aw.T)
    return _make(out, "bilinear_up2", (x,), lambda g: _accumulate(x, ah.T @ (g @ aw)))


def upsample_to(x: Tensor, side: int) -> Tensor:
    """Repeated :func:`bilinear_up2` until the spatial side reaches ``side``."""
    while x.shape[-1] < side:
        x = bilinear_up2(x)
    if x.shape[-1] != side:
        raise ValueError(f"cannot reach side {side} by doubling from {x.shape[-1]}")
    return x


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def bw(g):
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    return _make(np.concatenate([a.data, b.data], axis=1), "concat_channels", (a, b), bw)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select batch entries ``x[index]``."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        _accumulate(x, gx)

    return _make(x.data[index], "take_rows", (x,), bw)


# ---------------------------------------------------------------- losses

BCE_EPS = 1e-7


def bce_loss(pred: Tensor, target: Tensor | np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy of probabilities ``pred`` against 0/1 targets.

    With ``weight`` the mean is weighted: ``sum(w * l) / sum(w)``; an
    all-zero weight gives a zero loss.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if t.shape != pred.shape:
        raise ValueError(f"bce_loss: shape mismatch {pred.shape} vs {t.shape}")
    p_raw = pred.data
    if (p_raw < 0).any() or (p_raw > 1).any():
        raise ValueError("bce_loss: predictions must be probabilities in [0, 1]")
    p = np.clip(p_raw, BCE_EPS, 1.0 - BCE_EPS)
    clipped = (p_raw < BCE_EPS) | (p_raw > 1.0 - BCE_EPS)
    w = np.ones_like(p) if weight is None else np.broadcast_to(np.asarray(weight, dtype=DTYPE), p.shape)
    total = w.sum()
    if total == 0:
        return _make(np.asarray(0.0), "bce_loss", (pred,), lambda g: None)
    elem = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    value = (w * elem).sum() / total

    def bw(g):
        dp = (-(t / p) + (1.0 - t) / (1.0 - p)) * w / total
        dp = np.where(clipped, 0.0, dp)
        _accumulate(pred, g * dp)

    return _make(np.asarray(value), "bce_loss", (pred,), bw)


def bce_with_logits(logits: Tensor, target: Tensor | np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Same loss as ``bce_loss(sigmoid(logits), target)`` without clamping,
    computed as ``softplus(x) - t*x`` so saturated logits keep their gradient."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if t.shape != logits.shape:
        raise ValueError(f"bce_with_logits: shape mismatch {logits.shape} vs {t.shape}")
    x = logits.data
    w = np.ones_like(x) if weight is None else np.broadcast_to(np.asarray(weight, dtype=DTYPE), x.shape)
    total = w.sum()
    if total == 0:
        return _make(np.asarray(0.0), "bce_with_logits", (logits,), lambda g: None)
    elem = np.logaddexp(0.0, x) - t * x
    value = (w * elem).sum() / total

    def bw(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * x))
        _accumulate(logits, g * (p - t) * w / total)

    return _make(np.asarray(value), "bce_with_logits", (logits,), bw)


# ---------------------------------------------------------------- verification


KINK_TOL = 1e-4


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5) -> float:
    """Largest relative gap between autodiff and central differences.

    Per coordinate the error is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    When ``[x - h, x + h]`` straddles a kink (ReLU, max) the central
    difference averages two slopes; such a coordinate is recognised by its
    one-sided differences disagreeing, and autodiff is then compared with
    the one-sided difference on its own side of the kink.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    probe = Tensor(x0.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    g_ad = (probe.grad if probe.grad is not None else np.zeros_like(x0)).reshape(-1)
    if not x0.size:
        return 0.0

    flat = x0.reshape(-1)

    def at(i: int, v: float) -> float:
        orig = flat[i]
        flat[i] = v
        try:
            return f(Tensor(x0)).item()
        finally:
            flat[i] = orig

    worst = 0.0
    with no_grad():
        f0 = None
        for i in range(flat.size):
            xi = flat[i]
            f_plus, f_minus = at(i, xi + h), at(i, xi - h)
            central = (f_plus - f_minus) / (2.0 * h)
            err = abs(g_ad[i] - central) / max(1.0, abs(g_ad[i]), abs(central))
            if err > KINK_TOL * 1e-2:
                if f0 is None:
                    f0 = f(Tensor(x0)).item()
                right, left = (f_plus - f0) / h, (f0 - f_minus) / h
                if abs(right - left) / max(1.0, abs(right), abs(left)) > KINK_TOL:
                    err = min(err, *(abs(g_ad[i] - s) / max(1.0, abs(g_ad[i]), abs(s)) for s in (left, right)))
            worst = max(worst, err)
    return float(worst)
