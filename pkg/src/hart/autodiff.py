"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a node to the graph with a
monotonically increasing sequence number.  ``backward`` collects the nodes
reachable from the loss and replays their adjoints in exactly the reverse of
execution order, so the graph doubles as a tape.  Adjoints accumulate
additively into leaf ``.grad`` buffers; calling ``backward`` twice without
``zero_grad`` therefore doubles the leaf gradients.

Batched inputs are the norm: elementwise ops broadcast numpy-style,
``matmul`` broadcasts over leading dimensions, and ``conv2d`` works on NHWC
batches with either a shared or a per-sample kernel.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()
_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that suspends graph recording in the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _grad_state.enabled = False

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev


class Node:
    __slots__ = ("seq", "out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.seq = next(_seq)
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """A float64 array that can take part in gradient computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    # --- introspection -------------------------------------------------
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
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # --- operator sugar ------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise binary ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Hadamard product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the adjoint to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a, b)
    pick_a = a.data >= b.data
    return _record(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a, b)
    pick_a = a.data <= b.data
    return _record(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


# --- elementwise unary -------------------------------------------------
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # numerically stable in both tails
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def clip(a, lo: float | None, hi: float | None) -> Tensor:
    """Clamp to ``[lo, hi]``; the adjoint is zero wherever the clamp is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _record(out, (a,), lambda g: (g * inside,))


# --- reductions and shape ops ------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def vjp(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(out), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _record(out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in ts], axis=axis)


# --- linear algebra ----------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _record(a.data @ b.data, (a, b),
                   lambda g: (_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
                              if a.requires_grad else None,
                              _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
                              if b.requires_grad else None))


def _pad_amount(padding, kh, kw):
    if padding == "same":
        return (kh - 1) // 2, kh - 1 - (kh - 1) // 2, (kw - 1) // 2, kw - 1 - (kw - 1) // 2
    if padding == "valid":
        return 0, 0, 0, 0
    p = int(padding)
    return p, p, p, p


def conv2d(x, w, b=None, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation over NHWC input.

    ``w`` is ``(kh, kw, cin, cout)`` shared across the batch or
    ``(B, kh, kw, cin, cout)`` with one kernel per sample (dynamic filters).
    ``b`` is ``(cout,)`` or ``(B, cout)``.  ``padding`` is ``"same"``,
    ``"valid"`` or an int.  ``"same"`` is only exact for ``stride=1``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be NHWC, got shape {x.shape}")
    per_sample = w.ndim == 5
    if w.ndim not in (4, 5) or (per_sample and w.shape[0] != x.shape[0]):
        raise ValueError(f"conv2d: kernel shape {w.shape} incompatible with input {x.shape}")
    kh, kw, cin, cout = w.shape[-4:]
    if cin != x.shape[3]:
        raise ValueError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    B, H, W, _ = x.shape
    pt, pb, pl, pr = _pad_amount(padding, kh, kw)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    Ho = (H + pt + pb - kh) // stride + 1
    Wo = (W + pl + pr - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    s = stride
    K = kh * kw * cin
    # unfold patches once: (B, Ho*Wo, kh*kw*cin), tap-major then channel
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, :s * (Ho - 1) + 1:s, :s * (Wo - 1) + 1:s]         # (B, Ho, Wo, cin, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B, Ho * Wo, K)
    wmat = w.data.reshape(B, K, cout) if per_sample else w.data.reshape(K, cout)
    out = np.matmul(cols, wmat).reshape(B, Ho, Wo, cout)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None, None, :] if b.ndim == 2 else b.data
        inputs.append(b)

    def vjp(g):
        g2 = g.reshape(B, Ho * Wo, cout)
        gx = gw = None
        if w.requires_grad:
            if per_sample:
                gw = np.matmul(np.swapaxes(cols, 1, 2), g2).reshape(w.shape)
            else:
                gw = (cols.reshape(-1, K).T @ g2.reshape(-1, cout)).reshape(w.shape)
        if x.requires_grad:
            # transposed convolution: scatter each kernel tap's adjoint back onto the input
            dcols = np.matmul(g2, np.swapaxes(wmat, -1, -2)).reshape(B, Ho, Wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += dcols[:, :, :, i, j]
            gx = gxp[:, pt:pt + H, pl:pl + W, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)) if b.ndim == 2 else g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _record(out, inputs, vjp)


def max_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` max pooling over NHWC; trailing rows/cols are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"max_pool2d: input must be NHWC, got shape {x.shape}")
    B, H, W, C = x.shape
    Ho, Wo = H // k, W // k
    if Ho < 1 or Wo < 1:
        raise ValueError(f"max_pool2d: window {k} larger than input {x.shape}")
    blocks = x.data[:, :Ho * k, :Wo * k].reshape(B, Ho, k, Wo, k, C).transpose(0, 1, 3, 5, 2, 4)
    flat = blocks.reshape(B, Ho, Wo, C, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(B, Ho, Wo, C, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(B, Ho * k, Wo * k, C)
        gx = np.zeros(x.shape)
        gx[:, :Ho * k, :Wo * k] = gb
        return (gx,)

    return _record(out, (x,), vjp)


# --- backward ----------------------------------------------------------
@dataclass
class Tape:
    """Executed operations reachable from an output, in execution order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if loss.size != 1:
                raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
            seed = np.ones(loss.shape)
        adj: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
        if loss.is_leaf and loss.requires_grad:
            _accumulate(loss, adj.pop(id(loss)))
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if not inp.requires_grad or gi is None:
                    continue
                if inp.is_leaf:
                    _accumulate(inp, gi)
                elif id(inp) in adj:
                    adj[id(inp)] = adj[id(inp)] + gi
                else:
                    adj[id(inp)] = gi


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every ``requires_grad`` leaf feeding ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    tape.backward(loss)
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --- verification oracle -----------------------------------------------
@dataclass
class GradCheck:
    """Outcome of a finite-difference comparison."""

    max_rel_error: float
    checked: int
    skipped: list[tuple[int, ...]]

    def __float__(self):
        return self.max_rel_error

    def __lt__(self, other):
        return self.max_rel_error < other

    def __le__(self, other):
        return self.max_rel_error <= other

    def __gt__(self, other):
        return self.max_rel_error > other


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, step: float = 1e-5,
                      indices: Sequence[tuple[int, ...]] | None = None,
                      kink_tol: float = 1e-3) -> GradCheck:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Elements where the one-sided slopes disagree by more than ``kink_tol``
    (relative) sit on a non-differentiable point such as a clip boundary;
    they are left out of the error and reported in ``skipped``.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    f0 = float(y.data)
    if not np.isfinite(f0):
        raise FloatingPointError("finite_diff_check: f(x) is not finite")
    backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    def evaluate(v):
        with no_grad():
            out = float(f(Tensor(v)).data)
        if not np.isfinite(out):
            raise FloatingPointError("finite_diff_check: f is not finite near x")
        return out

    if indices is None:
        indices = list(np.ndindex(x0.shape))
    worst, skipped, checked = 0.0, [], 0
    for idx in indices:
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += step
        xm[idx] -= step
        fp, fm = evaluate(xp), evaluate(xm)
        fwd, bwd = (fp - f0) / step, (f0 - fm) / step
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
            skipped.append(tuple(idx))
            continue
        numeric = (fp - fm) / (2 * step)
        a = analytic[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
        checked += 1
    return GradCheck(worst, checked, skipped)
