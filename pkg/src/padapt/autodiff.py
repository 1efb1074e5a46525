"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is define-by-run: every op returns a new Tensor that remembers its
inputs and a closure computing input gradients from the output gradient.
``backward(loss)`` topologically sorts the graph reachable from ``loss`` and
accumulates dLoss/dLeaf into the ``grad`` field of every tracked leaf.

Only the op set needed by the recognizer models lives here; convolution and
normalization ops accept pre-assembled inputs and keep their backward passes
exact (no approximation anywhere).  Broadcasting is deliberately restricted:
elementwise ops take equal shapes or a scalar, and bias-style adds are their
own explicit ops.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

# Context variable so concurrent folds/speakers (thread pools in the
# experiment drivers) can run inference and training graphs independently.
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (pure inference)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    """A dense array plus optional gradient bookkeeping.

    ``grad`` is populated only on tracked leaves (requires_grad=True and not
    produced by an op); intermediate gradients live in a transient dict during
    backward and are discarded afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        # (backward_fn, inputs) set by the op that produced this tensor.
        self._ctx: tuple[Callable[[np.ndarray], Sequence[np.ndarray | None]], tuple[Tensor, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return self._ctx is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; numbers are wrapped as untracked scalars.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._ctx = (backward_fn, inputs)
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Tracked leaves receive ``grad += dLoss/dLeaf`` (repeated calls accumulate;
    call ``zero_grad`` between steps).  Untracked tensors are never touched.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor that does not require grad")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx[1]:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        gout = grads.pop(id(node), None)
        if gout is None:
            continue
        if node._ctx is None:
            node.grad = gout.copy() if node.grad is None else node.grad + gout
            continue
        backward_fn, inputs = node._ctx
        gins = backward_fn(gout)
        for parent, gin in zip(inputs, gins):
            if gin is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
    # Leaves that were never produced by an op but still hold pending grads
    # (can happen when loss itself is a leaf).
    for node in topo:
        if node._ctx is None and id(node) in grads:
            g = grads.pop(id(node))
            node.grad = g.copy() if node.grad is None else node.grad + g


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} must match (or one be scalar)")


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    # Collapse a full-shape gradient back onto a scalar operand.
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape).astype(g.dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")

    def bwd(g: np.ndarray):
        return _reduce_to(a.data.shape, g), _reduce_to(b.data.shape, g)

    return _make(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")

    def bwd(g: np.ndarray):
        return _reduce_to(a.data.shape, g * b.data), _reduce_to(b.data.shape, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray):
        return (-g,)

    return _make(-a.data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")

    def bwd(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g: np.ndarray):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g: np.ndarray):
        return (g * out_data,)

    return _make(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs")

    def bwd(g: np.ndarray):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bwd)


def softmax_lastdim(a: Tensor) -> Tensor:
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g: np.ndarray):
        dot = np.sum(g * out_data, axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (a,), bwd)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out_data = shifted - lse

    def bwd(g: np.ndarray):
        return (g - np.exp(out_data) * np.sum(g, axis=-1, keepdims=True),)

    return _make(out_data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),)

    return _make(np.sum(a.data), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g: np.ndarray):
        return ((np.broadcast_to(g, a.data.shape) / n).astype(a.data.dtype),)

    return _make(np.mean(a.data), (a,), bwd)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]

    def bwd(g: np.ndarray):
        return ((np.expand_dims(g, axis) / n) * np.ones_like(a.data),)

    return _make(np.mean(a.data, axis=axis), (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g: np.ndarray):
        return (g.reshape(a.data.shape),)

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got {a.data.shape}")

    def bwd(g: np.ndarray):
        return (g.T.copy(),)

    return _make(a.data.T.copy(), (a,), bwd)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-M vector to every row of an [N, M] matrix."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: incompatible shapes {a.data.shape} + {v.data.shape}")

    def bwd(g: np.ndarray):
        return g, g.sum(axis=0)

    return _make(a.data + v.data[None, :], (a, v), bwd)


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a length-M vector as the rows of an [n, M] matrix."""
    if v.data.ndim != 1:
        raise ShapeError(f"tile_rows: expected a vector, got shape {v.data.shape}")
    if n < 1:
        raise ShapeError(f"tile_rows: row count must be positive, got {n}")

    def bwd(g: np.ndarray):
        return (g.sum(axis=0),)

    return _make(np.broadcast_to(v.data[None, :], (n, v.data.shape[0])).copy(), (v,), bwd)


def concat_lastdim(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat_lastdim: leading dims differ: {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[-1]

    def bwd(g: np.ndarray):
        return g[..., :na], g[..., na:]

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), bwd)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick a[i, idx[i]] for every row i, returning a length-N vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError("gather_rows: index length must equal the row count")
    if np.any(idx < 0) or np.any(idx >= a.data.shape[1]):
        raise ContractError("gather_rows: index out of range")
    rows = np.arange(a.data.shape[0])

    def bwd(g: np.ndarray):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _make(a.data[rows, idx], (a,), bwd)


def grad_reverse(a: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the gradient by -lam."""

    def bwd(g: np.ndarray):
        return ((-lam) * g,)

    return _make(a.data.copy(), (a,), bwd)


def swap_last2(a: Tensor) -> Tensor:
    """Swap the last two axes of a 3-D tensor."""
    if a.data.ndim != 3:
        raise ShapeError(f"swap_last2 expects a 3-D tensor, got {a.data.shape}")

    def bwd(g: np.ndarray):
        return (np.ascontiguousarray(g.transpose(0, 2, 1)),)

    return _make(np.ascontiguousarray(a.data.transpose(0, 2, 1)), (a,), bwd)


# ---------------------------------------------------------------------------
# Convolution / pooling / normalization ops
# ---------------------------------------------------------------------------

_RING_MASKS: dict[tuple[int, int, int], np.ndarray] = {}


def ring_mask(h: int, w: int, pad: int) -> np.ndarray:
    """Boolean [H+2p, W+2p] mask of border cells; scan order of its True cells
    (row-major) defines the ring storage layout."""
    key = (h, w, pad)
    m = _RING_MASKS.get(key)
    if m is None:
        m = np.ones((h + 2 * pad, w + 2 * pad), dtype=bool)
        m[pad : pad + h, pad : pad + w] = False
        m.setflags(write=False)
        _RING_MASKS[key] = m
    return m


def ring_cells(h: int, w: int, pad: int) -> int:
    """Border cells per channel for an H x W map padded by ``pad``."""
    return (h + 2 * pad) * (w + 2 * pad) - h * w


def pad_assemble(x: Tensor, ring: Tensor | None, pad: int) -> Tensor:
    """Surround [N, C, H, W] with a ``pad``-wide border.

    ``ring`` is a flat per-channel row-major scan of the border cells (length
    C * ring_cells(H, W, pad)); None fills the border with zeros.  pad=0 is
    the identity.  The same ring is applied to every item in the batch, and
    its gradient is summed over the batch.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"pad_assemble expects [N, C, H, W], got {x.data.shape}")
    if pad < 0:
        raise ShapeError(f"pad_assemble: negative pad {pad}")
    if pad == 0:
        return x
    n, c, h, w = x.data.shape
    mask = ring_mask(h, w, pad)
    per = ring_cells(h, w, pad)
    if ring is not None and ring.data.shape != (c * per,):
        raise ShapeError(
            f"ring must have shape ({c * per},) for input {(c, h, w)} pad {pad}, got {ring.data.shape}"
        )
    out_data = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.data.dtype)
    out_data[:, :, pad : pad + h, pad : pad + w] = x.data
    if ring is not None:
        out_data[:, :, mask] = ring.data.reshape(c, per).astype(x.data.dtype, copy=False)

    inputs: tuple[Tensor, ...] = (x,) if ring is None else (x, ring)

    def bwd(g: np.ndarray):
        gx = g[:, :, pad : pad + h, pad : pad + w] if x.requires_grad else None
        if ring is None:
            return (gx,)
        gr = g[:, :, mask].sum(axis=0).reshape(-1) if ring.requires_grad else None
        return gx, gr

    return _make(out_data, inputs, bwd)


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation over an already-padded [N, C, H, W] input."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.data.shape}, {w.data.shape}")
    n, c, h, wdt = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c} vs weight {cw}")
    if kh > h or kw > wdt:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than input {h}x{wdt}")
    if b.data.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {b.data.shape}")
    win = _conv_windows(x.data, kh, kw, stride)
    out_data = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2)) + b.data[None, :, None, None]
    ho, wo = out_data.shape[2], out_data.shape[3]

    def bwd(g: np.ndarray):
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for a_off in range(kh):
                for b_off in range(kw):
                    contrib = np.tensordot(g, w.data[:, :, a_off, b_off], axes=([1], [0]))
                    gx[:, :, a_off : a_off + stride * ho : stride, b_off : b_off + stride * wo : stride] += (
                        contrib.transpose(0, 3, 1, 2)
                    )
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _make(out_data, (x, w, b), bwd)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Temporal cross-correlation on [B, F, T] with zero padding on the time axis."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and weight, got {x.data.shape}, {w.data.shape}")
    bsz, f, t = x.data.shape
    o, fw, k = w.data.shape
    if fw != f:
        raise ShapeError(f"conv1d channel mismatch: input {f} vs weight {fw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    tp = xp.shape[2]
    if k > tp:
        raise ShapeError(f"conv1d kernel {k} larger than padded length {tp}")
    to = (tp - k) // stride + 1
    sn, sf, st = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(bsz, f, to, k), strides=(sn, sf, st * stride, st), writeable=False
    )
    out_data = np.tensordot(win, w.data, axes=([1, 3], [1, 2]))  # (B, To, O)
    out_data = np.ascontiguousarray(out_data.transpose(0, 2, 1)) + b.data[None, :, None]

    def bwd(g: np.ndarray):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a_off in range(k):
                contrib = np.tensordot(g, w.data[:, :, a_off], axes=([1], [0]))  # (B, To, F)
                gxp[:, :, a_off : a_off + stride * to : stride] += contrib.transpose(0, 2, 1)
            gx = gxp[:, :, pad : pad + t] if pad else gxp
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2], [0, 2]))  # (O, F, K)
        if b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return _make(out_data, (x, w, b), bwd)


def global_avgpool2d(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avgpool2d expects [N, C, H, W], got {x.data.shape}")
    n, c, h, w = x.data.shape

    def bwd(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).astype(x.data.dtype),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bwd)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Training mode uses batch statistics and updates the running buffers in
    place; eval mode uses the (frozen) running statistics, so the transform is
    a fixed per-channel affine map.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [N, C, H, W], got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("batchnorm2d: gamma/beta must be per-channel vectors")

    if training:
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * v
    else:
        m = running_mean
        v = running_var

    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m[None, :, None, None]) * inv[None, :, None, None]
    out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    cnt = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    def bwd(g: np.ndarray):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                sum_g = gxhat.sum(axis=(0, 2, 3))
                sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))
                gx = (
                    gxhat - (sum_g[None, :, None, None] + xhat * sum_gx[None, :, None, None]) / cnt
                ) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _make(out_data, (x, gamma, beta), bwd)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x (float64 oracle)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g
