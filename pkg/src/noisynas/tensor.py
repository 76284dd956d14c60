"""Dense float64 tensors with reverse-mode automatic differentiation.

Minimal numpy-backed engine. Every differentiable operation wraps its
result in a new Tensor carrying a tape node: the input refs plus a
closure that maps the output gradient to input gradients. ``backward``
replays the recorded tape in reverse topological order. Gradients are
additive: over fan-out within one pass, and across repeated backward
calls until the caller resets them.

Tapes live only as long as the tensors referencing them; a fresh forward
pass builds a fresh tape. There is no re-entrant higher-order autodiff.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


class GeometryError(ValueError):
    """Invalid spatial geometry (kernel/stride/padding/dilation)."""


class LabelError(ValueError):
    """Malformed classification labels."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (eval passes, oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class TapeNode:
    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op: str, inputs: tuple, grad_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """A dense float64 array, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: TapeNode | None = None

    # -- basic introspection -------------------------------------------------

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
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if grad is None:
            if self.data.ndim != 0:
                raise ShapeError("backward root must be a scalar loss")
            grad = np.ones((), dtype=np.float64)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeError("seed gradient shape mismatch")
        if not self.requires_grad:
            return

        order = _trace(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            if node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for inp, ig in zip(node.inputs, node.grad_fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                held = grads.get(key)
                grads[key] = ig if held is None else held + ig

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powi(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- reductions / views --------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, op: str, inputs: tuple, grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._node = TapeNode(op, inputs, grad_fn)
    return out


def _trace(root: Tensor) -> list[Tensor]:
    """Tensors reachable from root that require grad, topologically ordered."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                stack.append((inp, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    return _make(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    return _make(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    return _make(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    return _make(
        a.data / b.data, "div", (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)
    return _make(a.data * s, "scale", (a,), lambda g: (g * s,))


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch table over the basic elementwise kinds."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "neg":
        return neg(a)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def powi(a, p) -> Tensor:
    a = _wrap(a)
    p = float(p)
    y = a.data ** p
    return _make(y, "pow", (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = _wrap(a)
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    y = np.sqrt(a.data)
    return _make(y, "sqrt", (a,), lambda g: (g / (2.0 * y),))


# -- activations ---------------------------------------------------------------


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _make(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def activation(kind: str, a) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


# -- reductions / shape ops ----------------------------------------------------


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _make(y, "sum", (a,), grad_fn)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    y = a.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(gk, a.shape).copy() / count,)

    return _make(y, "mean", (a,), grad_fn)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx) -> Tensor:
    """Basic (non-repeating) indexing with gradient scatter."""
    a = _wrap(a)

    def grad_fn(g):
        dz = np.zeros(a.shape, dtype=np.float64)
        dz[idx] += g
        return (dz,)

    return _make(np.asarray(a.data[idx], dtype=np.float64), "getitem", (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(y, "concat", tuple(tensors), grad_fn)


def pad2d(a, pad: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad the two trailing spatial axes by (top, bottom, left, right)."""
    a = _wrap(a)
    if a.ndim != 4:
        raise ShapeError("pad2d expects a 4-d tensor")
    top, bottom, left, right = pad
    widths = ((0, 0), (0, 0), (top, bottom), (left, right))
    y = np.pad(a.data, widths)
    h, w = a.shape[2], a.shape[3]

    def grad_fn(g):
        return (g[:, :, top:top + h, left:left + w],)

    return _make(y, "pad2d", (a,), grad_fn)


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-d tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data, "matmul", (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# -- softmax family ---------------------------------------------------------------


def softmax(x, mask=None) -> Tensor:
    """Softmax over a 1-d logits vector; masked entries get exactly zero weight."""
    x = _wrap(x)
    if x.ndim != 1:
        raise ShapeError("softmax expects a 1-d vector")
    if mask is None:
        active = np.ones(x.shape, dtype=bool)
    else:
        active = np.asarray(mask, dtype=bool)
        if active.shape != x.shape:
            raise ShapeError("mask shape mismatch")
        if not active.any():
            raise ValueError("softmax mask excludes every entry")
    shifted = x.data - x.data[active].max()
    e = np.exp(np.where(active, shifted, -np.inf))
    e[~active] = 0.0
    s = e / e.sum()

    def grad_fn(g):
        dot = float((g * s).sum())
        return (s * (g - dot),)

    return _make(s, "softmax", (x,), grad_fn)


def softmax_cross_entropy(logits, onehot) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], labels one-hot."""
    logits = _wrap(logits)
    y = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot, dtype=np.float64)
    if logits.ndim != 2 or y.shape != logits.shape:
        raise ShapeError("logits and one-hot labels must both be (batch, classes)")
    if logits.shape[1] < 2:
        raise LabelError("need at least 2 classes")
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
        raise LabelError("label rows must be one-hot")
    b = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    lse = np.log(e.sum(axis=1)) + logits.data.max(axis=1)
    picked = (logits.data * y).sum(axis=1)
    loss = float(np.mean(lse - picked))

    def grad_fn(g):
        return (g * (probs - y) / b,)

    return _make(np.float64(loss), "softmax_cross_entropy", (logits,), grad_fn)


# -- convolution / pooling --------------------------------------------------------


def _out_extent(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _window_view(xp: np.ndarray, k: int, stride: int, dilation: int, groups: int,
                 ho: int, wo: int) -> np.ndarray:
    """Strided (B, G, C/G, k, k, Ho, Wo) window view of a padded batch."""
    b, c, _, _ = xp.shape
    cg = c // groups
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(b, groups, cg, k, k, ho, wo),
        strides=(s0, s1 * cg, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )


def _promote_spatial(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError("expected a (C,H,W) or (B,C,H,W) tensor")


def conv2d(x, w, stride: int = 1, dilation: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2-d cross-correlation with stride/dilation/zero-padding/groups."""
    x = _wrap(x)
    w = _wrap(w)
    x4, squeezed = _promote_spatial(x)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError("weights must be (C_out, C_in/groups, k, k)")
    b, cin, h, wid = x4.shape
    cout, cin_g, k, _ = w.shape
    if stride < 1 or dilation < 1 or padding < 0:
        raise GeometryError("stride/dilation must be >= 1, padding >= 0")
    if cin % groups or cout % groups or cin_g * groups != cin:
        raise ShapeError(
            f"groups={groups} incompatible with C_in={cin}, C_out={cout}, w C_in/g={cin_g}")
    ho = _out_extent(h, k, stride, padding, dilation)
    wo = _out_extent(wid, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise GeometryError(f"empty output extent for input {h}x{wid}, k={k}, "
                            f"stride={stride}, padding={padding}, dilation={dilation}")

    xp = np.pad(x4.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = _window_view(xp, k, stride, dilation, groups, ho, wo)
    wg = w.data.reshape(groups, cout // groups, cin_g, k, k)
    out = np.einsum("bgcijhw,gdcij->bgdhw", view, wg, optimize=True)
    out = out.reshape(b, cout, ho, wo)

    def grad_fn(g):
        gg = g.reshape(b, groups, cout // groups, ho, wo)
        dw = np.einsum("bgdhw,bgcijhw->gdcij", gg, view, optimize=True).reshape(w.shape)
        dxp = np.zeros(xp.shape, dtype=np.float64).reshape(
            b, groups, cin_g, xp.shape[2], xp.shape[3])
        for i in range(k):
            hi = i * dilation
            for j in range(k):
                wj = j * dilation
                contrib = np.einsum("gdc,bgdhw->bgchw", wg[:, :, :, i, j], gg, optimize=True)
                dxp[:, :, :, hi:hi + stride * ho:stride, wj:wj + stride * wo:stride] += contrib
        dxp = dxp.reshape(xp.shape)
        dx = dxp[:, :, padding:padding + h, padding:padding + wid]
        return (dx.reshape(x.shape), dw)

    out_data = out.reshape(cout, ho, wo) if squeezed else out
    return _make(out_data, "conv2d", (x, w), grad_fn)


def pool2d(kind: str, x, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Window max/avg pooling. Max routes gradient to the first (row-major)
    maximal element; avg always divides by k*k (zero padding included)."""
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    x = _wrap(x)
    x4, squeezed = _promote_spatial(x)
    b, c, h, wid = x4.shape
    if stride < 1 or padding < 0:
        raise GeometryError("stride must be >= 1, padding >= 0")
    if padding > k // 2:
        raise GeometryError("pooling padding must not exceed half the window")
    ho = _out_extent(h, k, stride, padding, 1)
    wo = _out_extent(wid, k, stride, padding, 1)
    if ho < 1 or wo < 1:
        raise GeometryError(f"empty pooling output for input {h}x{wid}")

    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x4.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=fill)
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, shape=(b, c, ho, wo, k, k),
                      strides=(s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)

    if kind == "avg":
        out = view.sum(axis=(-2, -1)) / (k * k)

        def grad_fn(g):
            g4 = g.reshape(b, c, ho, wo) / (k * k)
            dxp = np.zeros(xp.shape, dtype=np.float64)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g4
            dx = dxp[:, :, padding:padding + h, padding:padding + wid]
            return (dx.reshape(x.shape),)

    else:
        flat = view.reshape(b, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def grad_fn(g):
            g4 = g.reshape(b, c, ho, wo)
            rows, cols = arg // k, arg % k
            bb, cc, hh, ww = np.indices((b, c, ho, wo), sparse=False)
            habs = hh * stride + rows
            wabs = ww * stride + cols
            dxp = np.zeros(xp.shape, dtype=np.float64)
            np.add.at(dxp, (bb, cc, habs, wabs), g4)
            dx = dxp[:, :, padding:padding + h, padding:padding + wid]
            return (dx.reshape(x.shape),)

    out_data = out.reshape(c, ho, wo) if squeezed else out
    return _make(out_data, f"pool_{kind}", (x,), grad_fn)


# -- parameter bookkeeping --------------------------------------------------------

PARTITIONS = ("theta", "phi", "alpha")


class ParamStore:
    """Named trainable tensors split into disjoint partitions: network
    weights (theta), noise-injection parameters (phi), architecture
    logits (alpha)."""

    def __init__(self):
        self._parts: dict[str, dict[str, Tensor]] = {p: {} for p in PARTITIONS}
        self._owner: dict[str, str] = {}

    def add(self, partition: str, name: str, tensor: Tensor) -> Tensor:
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}")
        if name in self._owner:
            raise ValueError(f"parameter {name!r} already registered in "
                             f"{self._owner[name]!r}")
        tensor.requires_grad = True
        self._parts[partition][name] = tensor
        self._owner[name] = partition
        return tensor

    @property
    def theta(self) -> dict[str, Tensor]:
        return self._parts["theta"]

    @property
    def phi(self) -> dict[str, Tensor]:
        return self._parts["phi"]

    @property
    def alpha(self) -> dict[str, Tensor]:
        return self._parts["alpha"]

    def weights(self) -> dict[str, Tensor]:
        """theta and phi merged: everything the weight optimizer touches."""
        merged = dict(self._parts["theta"])
        merged.update(self._parts["phi"])
        return merged

    def all(self) -> dict[str, Tensor]:
        merged = self.weights()
        merged.update(self._parts["alpha"])
        return merged

    def partition_of(self, name: str) -> str:
        return self._owner[name]

    def n_params(self, partition: str | None = None) -> int:
        parts = PARTITIONS if partition is None else (partition,)
        return sum(t.size for p in parts for t in self._parts[p].values())


def zero_grads(params: Iterable[Tensor] | dict[str, Tensor]) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


def gradients(loss: Tensor, params: dict[str, Tensor], zero: bool = True) -> dict[str, np.ndarray]:
    """Backward from a scalar loss; returns a gradient per requested
    parameter (zeros for parameters the loss never touched)."""
    for p in params.values():
        if not p.requires_grad:
            raise ValueError("requested gradient for a non-trainable tensor")
    if zero:
        zero_grads(params)
    loss.backward()
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in params.items()}
