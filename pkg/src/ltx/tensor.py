"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient
(and recording is enabled) the output keeps references to its parents and a
closure that maps the output gradient to one gradient per parent. Calling
:func:`backward` on a scalar output traces those references into a
:class:`ComputationRecord` and replays it in reverse.

Most ops accept leading batch dimensions in addition to the single-instance
shapes they are documented with.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with an op."""


class ContractError(ValueError):
    """A precondition of an op was violated."""


_recording = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(dims={self.dims}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray, broadcast: bool):
    """Equal shapes, a scalar operand, or (with ``broadcast``) numpy-broadcastable shapes."""
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0 or a.size == 1 and a.ndim <= b.ndim \
            or b.size == 1 and b.ndim <= a.ndim:
        return
    if not broadcast:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    ones = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=ones, keepdims=True) if ones else g


def ewise(op_kind: str, a, b, broadcast: bool = False) -> Tensor:
    """Elementwise ``add``, ``sub`` or ``mul`` of equal shapes or with a scalar.

    ``broadcast=True`` also accepts numpy broadcasting (biases shared across
    a batch); :func:`add`, :func:`sub` and :func:`mul` enable it.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, broadcast)
    sa, sb = a.dims, b.dims
    if op_kind == "add":
        out = a.data + b.data

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)
    elif op_kind == "sub":
        out = a.data - b.data

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)
    elif op_kind == "mul":
        out = a.data * b.data
        ad, bd = a.data, b.data

        def bw(g):
            return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)
    else:
        raise ValueError(f"unknown op_kind {op_kind!r}")
    return _node(out, (a, b), bw, op_kind)


def add(a, b) -> Tensor:
    return ewise("add", a, b, broadcast=True)


def sub(a, b) -> Tensor:
    return ewise("sub", a, b, broadcast=True)


def mul(a, b) -> Tensor:
    return ewise("mul", a, b, broadcast=True)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.abs(xd), (x,), lambda g: (np.sign(xd) * g,), "abs")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into ``[lo, hi]``; the gradient is zero where clipping is active."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        inside &= xd >= lo
    if hi is not None:
        inside &= xd <= hi
    return _node(out, (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0, e) / (1.0 + e)


def activation(kind: str, x: Tensor) -> Tensor:
    xd = x.data
    if kind == "relu":
        return _node(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),), "relu")
    if kind == "tanh":
        t = np.tanh(xd)
        return _node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")
    if kind == "sigmoid":
        s = _sigmoid(xd)
        return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")
    raise ValueError(f"unknown activation {kind!r}")


def relu(x):
    return activation("relu", x)


def tanh(x):
    return activation("tanh", x)


def sigmoid(x):
    return activation("sigmoid", x)


def softmax_rows(logits: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max."""
    p = logits.data - logits.data.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (logits,), bw, "softmax")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., r, k] @ b[..., k, c]``; a 2-D ``b`` is shared across a's batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.dims[-1] != b.dims[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.dims} @ {b.dims}")
    if b.ndim > 2 and a.dims[:-2] != b.dims[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {a.dims} @ {b.dims}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd
    out += beta.data
    shape_g = gamma.dims

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, shape_g), _unbroadcast(g, shape_g)

    return _node(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.dims
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    src = x.dims

    def bw(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _node(x.data[index], (x,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.dims[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tensors, bw, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Repeat ``x`` over new leading dimensions."""
    src = x.dims
    out = np.broadcast_to(x.data, shape)
    return _node(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    src = x.dims

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.dims[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Convolution, pooling, resampling
# ---------------------------------------------------------------------------

def conv2d(inp: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid stride-1 cross-correlation plus bias.

    ``inp`` is ``C_in x H x W`` or ``N x C_in x H x W``; ``kernels`` is
    ``C_out x C_in x kh x kw``, or ``N x C_out x C_in x kh x kw`` with a
    matching ``N x C_out`` bias for per-instance weights.
    """
    batched = inp.ndim == 4
    x = inp.data if batched else inp.data[None]
    per_inst = kernels.ndim == 5
    if x.ndim != 4 or kernels.ndim not in (4, 5) or (per_inst and not batched):
        raise ShapeError(f"conv2d expects (N,)C,H,W input and 4-D kernels, got {inp.dims}, {kernels.dims}")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernels.dims[-4:]
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernels {ci}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if per_inst and (kernels.dims[0] != n or bias.dims != (n, co)):
        raise ShapeError(f"per-instance kernels {kernels.dims} / bias {bias.dims} do not match batch {n}")
    if not per_inst and bias.dims != (co,):
        raise ShapeError(f"bias must have shape ({co},), got {bias.dims}")
    kd = kernels.data
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n,c,oh,ow,kh,kw
    if per_inst:
        out = np.einsum("ncyxij,nocij->noyx", win, kd, optimize=True) + bias.data[:, :, None, None]
    else:
        out = np.einsum("ncyxij,ocij->noyx", win, kd, optimize=True) + bias.data[None, :, None, None]
    oh, ow = h - kh + 1, w - kw + 1

    def bw(g):
        gb = g if batched else g[None]
        gx = gk = gbias = None
        if inp.requires_grad:
            full = np.zeros_like(x)
            for i in range(kh):
                for j in range(kw):
                    if per_inst:
                        full[:, :, i:i + oh, j:j + ow] += np.einsum("noyx,noc->ncyx", gb, kd[..., i, j], optimize=True)
                    else:
                        full[:, :, i:i + oh, j:j + ow] += np.einsum("noyx,oc->ncyx", gb, kd[..., i, j], optimize=True)
            gx = full if batched else full[0]
        if kernels.requires_grad:
            spec = "ncyxij,noyx->nocij" if per_inst else "ncyxij,noyx->ocij"
            gk = np.einsum(spec, win, gb, optimize=True)
        if bias.requires_grad:
            gbias = gb.sum(axis=(2, 3)) if per_inst else gb.sum(axis=(0, 2, 3))
        return gx, gk, gbias

    return _node(out if batched else out[0], (inp, kernels, bias), bw, "conv2d")


def maxpool2(inp: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties route gradient to the first cell in row-major order."""
    *lead, h, w = inp.dims
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = inp.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        z = np.zeros(blocks.shape)
        np.put_along_axis(z, arg[..., None], g[..., None], axis=-1)
        z = z.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(z, -2, -3).reshape(*lead, h, w),)

    return _node(out, (inp,), bw, "maxpool2")


def _interp_plan(src: int, dst: int):
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(int), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    t = pos - lo
    mat = np.zeros((dst, src))
    np.add.at(mat, (np.arange(dst), lo), 1.0 - t)
    np.add.at(mat, (np.arange(dst), hi), t)
    return lo, hi, t, mat


def bilinear_upsample(m: Tensor, H: int, W: int) -> Tensor:
    """Align-corners bilinear resize of the last two axes up to ``H x W``.

    Interpolation is evaluated as ``a + t * (b - a)`` so constant maps stay
    exactly constant.
    """
    *lead, h, w = m.dims
    if h < 1 or w < 1:
        raise ContractError("map must be at least 1x1")
    if H < h or W < w:
        raise ContractError(f"bilinear_upsample only enlarges: {h}x{w} -> {H}x{W}")
    r0, r1, rt, ry = _interp_plan(h, H)
    c0, c1, ct, rx = _interp_plan(w, W)
    d = m.data
    rows = d[..., r0, :] + rt[:, None] * (d[..., r1, :] - d[..., r0, :])
    out = rows[..., c0] + ct * (rows[..., c1] - rows[..., c0])

    def bw(g):
        return (ry.T @ g @ rx,)

    return _node(out, (m,), bw, "upsample")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

@dataclass
class ComputationRecord:
    """Topologically ordered nodes reachable from a loss (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, loss: Tensor) -> ComputationRecord:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, record: ComputationRecord | None = None,
             leaves: Iterable[Tensor] = ()) -> ComputationRecord:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf.

    Tensors listed in ``leaves`` that are not on any path to ``loss`` get a
    zero gradient. Returns the record so it can be replayed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.dims}")
    if record is None:
        record = ComputationRecord.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.dims)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.dims:
                pg = pg.reshape(parent.dims)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros(leaf.dims)
    return record


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_entries`` limits how many coordinates per parameter are probed
    (chosen with a fixed seed); ``None`` probes all of them.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    for p in params:
        p.grad = None
    backward(f(), leaves=params)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(a.reshape(-1)[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **hyper) -> AdamState:
        return cls([np.zeros(p.dims) for p in params], [np.zeros(p.dims) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(state.m):
        raise ShapeError("parameter count does not match optimizer state")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.dims)
        if g.shape != p.dims or m.shape != p.dims:
            raise ShapeError(f"gradient {g.shape} / moment {m.shape} do not match parameter {p.dims}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Thin holder pairing a parameter list with its :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 2e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ContractError("learning rate must be non-negative")
        self.params = list(params)
        self.state = AdamState.zeros_like(self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
