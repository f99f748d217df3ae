"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the network, the context aggregation and the losses need
are provided. Volumes are laid out channel-first, either ``(C, D, H, W)`` or
batched ``(N, C, D, H, W)``; the channel axis is always ``-4``.

Every op creates a new :class:`Tensor` whose ``data`` is never mutated
afterwards, so tensors can be read from several threads.
"""
from __future__ import annotations

import contextlib
import math
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "ActivationMeter",
    "no_grad",
    "is_grad_enabled",
    "track_activations",
    "parameter",
    "constant",
    "make_op",
    "detach",
    "add",
    "sub",
    "scale",
    "mul",
    "sum_all",
    "mean_all",
    "gelu",
    "conv3d",
    "upsample_nearest2x",
    "concat_channels",
    "channel_slice",
    "broadcast_batch",
    "take",
    "reduce_mean_batch",
    "batch_mean",
    "backward",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them; results are leaves with no history."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ActivationMeter:
    """Counts live bytes of tensors created while the meter is active.

    Bytes are released when the owning tensor is garbage collected, so the
    peak reflects what a graph (or a streaming loop) actually keeps alive.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.allocations = 0
        self._lock = threading.Lock()

    def _alloc(self, nbytes: int) -> None:
        with self._lock:
            self.live += nbytes
            self.allocations += 1
            if self.live > self.peak:
                self.peak = self.live

    def _free(self, nbytes: int) -> None:
        with self._lock:
            self.live -= nbytes

    def reset_peak(self) -> None:
        self.peak = self.live


@contextlib.contextmanager
def track_activations(meter: ActivationMeter | None):
    """Attribute every tensor created inside the block to ``meter``."""
    if meter is None:
        yield None
        return
    stack = getattr(_state, "meters", None)
    if stack is None:
        stack = _state.meters = []
    stack.append(meter)
    try:
        yield meter
    finally:
        stack.pop()


def _active_meter() -> ActivationMeter | None:
    stack = getattr(_state, "meters", None)
    return stack[-1] if stack else None


class Tensor:
    """An immutable array plus the record needed to differentiate through it.

    ``parents`` and ``backward_fn`` form the graph node: ``backward_fn`` maps
    the upstream gradient to one gradient per parent (``None`` for parents
    that need none).
    """

    __slots__ = ("data", "requires_grad", "name", "parents", "backward_fn", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), backward_fn: Callable | None = None, op: str = "leaf"):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim > 5:
            raise ValueError(f"rank {data.ndim} exceeds the supported maximum of 5")
        self.data = data
        self.requires_grad = requires_grad
        self.name = name
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        meter = _active_meter()
        if meter is not None and op != "leaf":
            nbytes = int(data.nbytes)
            meter._alloc(nbytes)
            weakref.finalize(self, meter._free, nbytes)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data) if dtype is None else np.asarray(data, dtype=dtype)
    return Tensor(arr)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    The node is recorded only when gradients are enabled and at least one
    parent needs them; otherwise the result is a plain value.
    """
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def detach(x: Tensor) -> Tensor:
    """Same value, no gradient path."""
    return Tensor(x.data, op="detach")


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def scale(x: Tensor, c: float) -> Tensor:
    return make_op(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, shape).astype(x.dtype),), "mean")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(x.dtype, copy=False)

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return ((g * (cdf + xd * pdf)).astype(x.dtype, copy=False),)

    return make_op(out, (x,), back, "gelu")


# ---------------------------------------------------------------- convolution

def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ValueError(f"expected a (C,D,H,W) or (N,C,D,H,W) volume, got shape {x.shape}")


_SLAB_BYTES = 1 << 20


def _im2col_slabs(xp: np.ndarray, k: int, s: int, out_sp: tuple, keep: bool = False):
    """Yield ``(i, z, m, cols)`` patch matrices for sample ``i``, output planes ``z:z+m``.

    Slabs are sized to stay cache resident. ``cols`` has shape
    ``(C * k**3, m * H' * W')``; unless ``keep`` is set it is a reused buffer,
    valid only until the next yield.
    """
    n, c = xp.shape[:2]
    d, h, w = out_sp
    step = max(1, min(d, _SLAB_BYTES // (c * k ** 3 * h * w * xp.dtype.itemsize)))
    buf = np.empty((c, k, k, k, step, h, w), dtype=xp.dtype)
    for i in range(n):
        xi = xp[i]
        for z in range(0, d, step):
            m = min(step, d - z)
            cz = np.empty_like(buf[:, :, :, :, :m]) if keep else buf[:, :, :, :, :m]
            for a in range(k):
                z0 = a + s * z
                for b in range(k):
                    for e in range(k):
                        cz[:, a, b, e] = xi[:, z0:z0 + s * m:s, b:b + s * h:s, e:e + s * w:s]
            yield i, z, m, cz.reshape(c * k ** 3, m * h * w)


def _correlate(xp: np.ndarray, w2: np.ndarray, k: int, s: int, out_sp: tuple, keep: bool = False):
    """Returns the output and, with ``keep``, the slabs for the weight gradient."""
    cout = w2.shape[0]
    out = np.empty((xp.shape[0], cout) + tuple(out_sp), dtype=xp.dtype)
    slabs = [] if keep else None
    for i, z, m, cols in _im2col_slabs(xp, k, s, out_sp, keep):
        out[i, :, z:z + m] = (w2 @ cols).reshape((cout, m) + tuple(out_sp[1:]))
        if keep:
            slabs.append((i, z, m, cols))
    return out, slabs


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """3D cross-correlation with bias, cubic kernel, zero padding.

    ``padding`` defaults to ``(k - 1) // 2``. Output side is
    ``floor((side + 2*padding - k) / stride) + 1``. Computed as one matrix
    product over an im2col buffer.
    """
    w = weight.data
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ValueError(f"kernel must be (C_out, C_in, k, k, k), got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if padding is None:
        padding = (k - 1) // 2
    xb, squeeze = _batched(x.data)
    if xb.shape[1] != w.shape[1]:
        raise ValueError(f"input shape {x.shape} does not match kernel shape {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match kernel shape {w.shape}")
    if xb.dtype != w.dtype:
        raise ValueError(f"input dtype {xb.dtype} does not match kernel dtype {w.dtype}")
    p, s = padding, stride
    out_sp = tuple((n + 2 * p - k) // s + 1 for n in xb.shape[2:])
    if min(out_sp) < 1:
        raise ValueError(f"input shape {x.shape} too small for kernel shape {w.shape}")
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xb
    cout = w.shape[0]
    tracked = is_grad_enabled() and (x.requires_grad or weight.requires_grad
                                     or (bias is not None and bias.requires_grad))
    out, slabs = _correlate(xp, w.reshape(cout, -1), k, s, out_sp, keep=tracked and weight.requires_grad)
    if bias is not None:
        out += bias.data[:, None, None, None]
    if squeeze:
        out = out[0]
    if not tracked:
        return Tensor(out, op="conv3d")

    def back(g):
        gb = g[None] if squeeze else g
        gw = None
        if weight.requires_grad:
            gw = np.zeros((cout, w[0].size), dtype=w.dtype)
            for i, z, m, cols in slabs:
                gw += gb[i, :, z:z + m].reshape(cout, -1) @ cols.T
            gw = gw.reshape(w.shape)
        gbias = gb.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        gx = None
        if x.requires_grad:
            if s == 1:
                # transposed correlation: flipped kernel, in/out channels swapped
                q = k - 1 - p
                gp = np.pad(gb, ((0, 0), (0, 0), (q, q), (q, q), (q, q))) if q else gb
                wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gx, _ = _correlate(gp, wt.reshape(wt.shape[0], -1), k, 1, xb.shape[2:])
            else:
                g2 = gb.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
                gcols = (w.reshape(cout, -1).T @ g2).reshape((w.shape[1], k, k, k, xb.shape[0]) + out_sp)
                gxp = np.zeros((xp.shape[1], xp.shape[0]) + xp.shape[2:], dtype=xp.dtype)
                d, h, ww = out_sp
                for a in range(k):
                    for b in range(k):
                        for e in range(k):
                            gxp[:, :, a:a + s * d:s, b:b + s * h:s, e:e + s * ww:s] += gcols[:, a, b, e]
                gxp = gxp.transpose(1, 0, 2, 3, 4)
                gx = gxp[:, :, p:xp.shape[2] - p, p:xp.shape[3] - p, p:xp.shape[4] - p] if p else gxp
                gx = np.ascontiguousarray(gx)
            if squeeze:
                gx = gx[0]
        return (gx, gw, gbias)

    if bias is None:
        return make_op(out, (x, weight), lambda g: back(g)[:2], "conv3d")
    return make_op(out, (x, weight, bias), back, "conv3d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate every voxel into a 2x2x2 block."""
    d = x.data
    out = d.repeat(2, axis=-3).repeat(2, axis=-2).repeat(2, axis=-1)

    def back(g):
        sh = g.shape[:-3] + (g.shape[-3] // 2, 2, g.shape[-2] // 2, 2, g.shape[-1] // 2, 2)
        return (g.reshape(sh).sum(axis=(-5, -3, -1)),)

    return make_op(out, (x,), back, "upsample")


# ---------------------------------------------------------------- channel / batch plumbing

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.ndim != b.ndim or a.shape[:-4] != b.shape[:-4] or a.shape[-3:] != b.shape[-3:]:
        raise ValueError(f"cannot concatenate shapes {a.shape} and {b.shape}")
    c1 = a.shape[-4]
    out = np.concatenate([a.data, b.data], axis=-4)
    return make_op(out, (a, b), lambda g: (g[..., :c1, :, :, :], g[..., c1:, :, :, :]), "concat")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop, :, :, :] = g
        return (full,)

    return make_op(x.data[..., start:stop, :, :, :], (x,), back, "channel_slice")


def broadcast_batch(x: Tensor, n: int) -> Tensor:
    """Repeat an unbatched volume ``n`` times along a new leading axis."""
    if x.ndim != 4:
        raise ValueError(f"expected an unbatched (C,D,H,W) volume, got {x.shape}")
    out = np.broadcast_to(x.data, (n,) + x.shape)
    return make_op(out, (x,), lambda g: (g.sum(axis=0),), "broadcast")


def take(x: Tensor, i: int) -> Tensor:
    """Item ``i`` of a batched tensor."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return make_op(x.data[i], (x,), back, "take")


def _ordered_sum(terms: np.ndarray) -> np.ndarray:
    # sorting makes the result independent of operand order, bit for bit
    return np.add.reduce(np.sort(terms, axis=0), axis=0)


def reduce_mean_batch(xs: Sequence[Tensor], weights: Sequence[float] | None = None) -> Tensor:
    """Weighted mean ``sum(w_i x_i) / sum(w_i)`` with an order-free reduction."""
    if not xs:
        raise ValueError("reduce_mean_batch needs at least one tensor")
    if weights is None:
        weights = [1.0] * len(xs)
    if len(weights) != len(xs):
        raise ValueError(f"{len(xs)} tensors but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ValueError("weights must be non-negative")
    total = math.fsum(weights)
    if total <= 0:
        raise ValueError("at least one weight must be positive")
    shape = xs[0].shape
    for t in xs:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {t.shape} vs {shape}")
    dtype = xs[0].dtype
    terms = np.stack([x.data * dtype.type(w) for x, w in zip(xs, weights)])
    out = (_ordered_sum(terms) / dtype.type(total)).astype(dtype, copy=False)
    coef = [dtype.type(w / total) for w in weights]
    return make_op(out, tuple(xs), lambda g: tuple(g * c for c in coef), "reduce_mean")


def batch_mean(x: Tensor) -> Tensor:
    """Uniform mean over the leading batch axis, order-free like :func:`reduce_mean_batch`."""
    if x.ndim != 5:
        raise ValueError(f"expected a batched volume, got {x.shape}")
    n = x.shape[0]
    out = (_ordered_sum(x.data) / x.dtype.type(n)).astype(x.dtype, copy=False)
    return make_op(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),), "batch_mean")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every named leaf reachable from it.

    If ``params`` is given, every one of them gets an entry, zero when the
    loss does not depend on it.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[str, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if node.backward_fn is None:
                if node.name is not None:
                    grads[id(node)] = g
                    leaves[node.name] = node
                continue
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = {name: np.asarray(grads[id(t)], dtype=t.dtype) for name, t in leaves.items()
           if grads.get(id(t)) is not None}
    if params is not None:
        for t in params:
            if t.name not in out:
                out[t.name] = np.zeros_like(t.data)
    return out
