"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records one node per operation in creation order. Because
graph construction is single threaded, reverse creation order is a valid
topological order, so :meth:`Tape.backward` simply replays the node list
backwards, letting each node accumulate gradients into its inputs. All
values are C-contiguous float64 arrays; convolutions use the
cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS_NORM = 1e-12  # guard for every normalization / cosine denominator


class Tensor:
    """A value in a tape's computation graph."""

    __slots__ = ("data", "grad", "tape", "node_id", "requires_grad")

    def __init__(self, data, tape, node_id, requires_grad):
        self.data = data
        self.grad = None
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, node={self.node_id})"

    # arithmetic sugar; scalars are folded into scale/add_scalar nodes
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Append-only record of operations; owns gradient propagation."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, object]] = []
        self._trainables: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _register(self, data: np.ndarray, backward, requires_grad: bool) -> Tensor:
        t = Tensor(data, self, len(self._nodes), requires_grad)
        self._nodes.append((t, backward))
        return t

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        """Wrap an array as a graph input; trainable leaves collect gradients."""
        arr = np.ascontiguousarray(data, dtype=np.float64)
        t = self._register(arr, None, requires_grad)
        if requires_grad:
            self._trainables.append(t)
        return t

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) for every tensor that requires grad."""
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {tuple(loss.data.shape)}"
            )
        loss.grad = np.ones_like(loss.data)
        for out, bwd in reversed(self._nodes):
            if bwd is not None and out.grad is not None:
                bwd(out.grad)
        for t in self._trainables:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _tape_of(*tensors: Tensor) -> Tape:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor):
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("operands live on different tapes")
    if tape is None:
        raise ValueError("at least one operand must be a Tensor")
    return tape


def _coerce(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        sa, sb = a.data.shape, b.data.shape
        for ax in range(1, min(len(sa), len(sb)) + 1):
            da, db = sa[-ax], sb[-ax]
            if da != db and 1 not in (da, db):
                raise ValueError(
                    f"{name}: shapes {sa} and {sb} mismatch at axis -{ax}"
                ) from None
        raise ValueError(f"{name}: shapes {sa} and {sb} are not compatible") from None


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a: Tensor, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _coerce(tape, a), _coerce(tape, b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return tape._register(out, bwd, a.requires_grad or b.requires_grad)


def sub(a: Tensor, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _coerce(tape, a), _coerce(tape, b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return tape._register(out, bwd, a.requires_grad or b.requires_grad)


def mul(a: Tensor, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _coerce(tape, a), _coerce(tape, b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return tape._register(out, bwd, a.requires_grad or b.requires_grad)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * s

    def bwd(g):
        _accumulate(x, g * s)

    return x.tape._register(out, bwd, x.requires_grad)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data + float(c)

    def bwd(g):
        _accumulate(x, g)

    return x.tape._register(out, bwd, x.requires_grad)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        _accumulate(x, g * mask)

    return x.tape._register(out, bwd, x.requires_grad)


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x), computed without overflow
    out = np.logaddexp(0.0, x.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60.0, 60.0)))

    def bwd(g):
        _accumulate(x, g * sig)

    return x.tape._register(out, bwd, x.requires_grad)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bwd(g):
        _accumulate(x, g * 0.5 / np.maximum(out, 1e-300))

    return x.tape._register(out, bwd, x.requires_grad)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bwd(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return x.tape._register(out, bwd, x.requires_grad)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.sum() / n)

    def bwd(g):
        _accumulate(x, np.broadcast_to(g / n, x.data.shape))

    return x.tape._register(out, bwd, x.requires_grad)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    out = x.data.sum(axis=axis)

    def bwd(g):
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return x.tape._register(out, bwd, x.requires_grad)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def bwd(g):
        _accumulate(x, np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape))

    return x.tape._register(out, bwd, x.requires_grad)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.ascontiguousarray(x.data).reshape(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.data.shape))

    return x.tape._register(out, bwd, x.requires_grad)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        _accumulate(x, g.transpose(inv))

    return x.tape._register(out, bwd, x.requires_grad)


# ---------------------------------------------------------------------------
# affine / normalization primitives


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[out, in]^T (+ b[out])."""
    if x.data.shape[-1] != w.data.shape[1]:
        raise ValueError(
            f"linear: input feature axis {x.data.shape[-1]} != weight axis {w.data.shape[1]}"
        )
    out = x.data @ w.data.T
    if b is not None:
        if b.data.shape != (w.data.shape[0],):
            raise ValueError(
                f"linear: bias shape {b.data.shape} != output axis ({w.data.shape[0]},)"
            )
        out = out + b.data

    def bwd(g):
        g2 = g.reshape(-1, w.data.shape[0])
        x2 = x.data.reshape(-1, w.data.shape[1])
        _accumulate(x, (g2 @ w.data).reshape(x.data.shape))
        _accumulate(w, g2.T @ x2)
        if b is not None:
            _accumulate(b, g2.sum(axis=0))

    req = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    return x.tape._register(out, bwd, req)


def l2_normalize(x: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Scale each last-axis slice to unit norm; ||x|| <= eps slices divide by eps."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def bwd(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        live = norm > eps  # below the guard the denominator is constant
        gx = (g - np.where(live, out * proj, 0.0)) / denom
        _accumulate(x, gx)

    return x.tape._register(out, bwd, x.requires_grad)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Per last-axis-slice cosine; denominators guarded by eps."""
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"cosine_similarity: shapes {a.data.shape} != {b.data.shape}"
        )
    na = np.maximum(np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True)), eps)
    nb = np.maximum(np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True)), eps)
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)
    out = cos[..., 0]

    def bwd(g):
        ge = g[..., None]
        live_a = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True)) > eps
        live_b = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True)) > eps
        ga = ge * (b.data / (na * nb) - np.where(live_a, cos * a.data / (na * na), 0.0))
        gb = ge * (a.data / (na * nb) - np.where(live_b, cos * b.data / (nb * nb), 0.0))
        _accumulate(a, ga)
        _accumulate(b, gb)

    return a.tape._register(out, bwd, a.requires_grad or b.requires_grad)


# ---------------------------------------------------------------------------
# convolutions (cross-correlation, zero padding)


def _conv_out_extent(n: int, k: int, stride: int, padding: int, axis: str) -> int:
    out = (n + 2 * padding - k) // stride + 1
    if out < 1:
        raise ValueError(
            f"conv: spatial axis {axis} of extent {n} too small for kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def _conv_checks(x: Tensor, w: Tensor, stride: int, padding: int, nd: int) -> int:
    if x.data.ndim != nd + 2:
        raise ValueError(f"conv{nd}d: input must have {nd + 2} axes, got {x.data.ndim}")
    if w.data.ndim != nd + 2:
        raise ValueError(f"conv{nd}d: kernel must have {nd + 2} axes, got {w.data.ndim}")
    if w.data.shape[1] != x.data.shape[1]:
        raise ValueError(
            f"conv{nd}d: channel axis mismatch, input has {x.data.shape[1]}, "
            f"kernel expects {w.data.shape[1]}"
        )
    k = w.data.shape[2]
    if any(kk != k for kk in w.data.shape[2:]):
        raise ValueError(f"conv{nd}d: kernel must be cubic, got {w.data.shape[2:]}")
    if k % 2 != 1:
        raise ValueError(f"conv{nd}d: kernel extent must be odd, got {k}")
    if stride < 1:
        raise ValueError(f"conv{nd}d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv{nd}d: padding must be >= 0, got {padding}")
    return k


def _conv_nd(x: Tensor, w: Tensor, stride: int, padding: int, nd: int) -> Tensor:
    k = _conv_checks(x, w, stride, padding, nd)
    batch, cin = x.data.shape[:2]
    cout = w.data.shape[0]
    spatial = x.data.shape[2:]
    names = ("X", "Y", "Z")[:nd]
    out_sp = tuple(
        _conv_out_extent(n, k, stride, padding, ax) for n, ax in zip(spatial, names)
    )
    pad = ((0, 0), (0, 0)) + ((padding, padding),) * nd
    xp = np.pad(x.data, pad)
    win = sliding_window_view(xp, (k,) * nd, axis=tuple(range(2, 2 + nd)))
    sl = (slice(None), slice(None)) + (slice(None, None, stride),) * nd
    win = win[sl]  # [B, Cin, *out_sp, *k^nd]
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    npos = int(np.prod(out_sp))
    cols = np.ascontiguousarray(win.transpose(perm)).reshape(batch, npos, cin * k**nd)
    wmat = w.data.reshape(cout, cin * k**nd)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape((batch, cout) + out_sp)
    out = np.ascontiguousarray(out)

    def bwd(g):
        g2 = g.reshape(batch, cout, npos).transpose(0, 2, 1)  # [B, P, Cout]
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 1], [0, 1]))
            _accumulate(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = (g2.reshape(-1, cout) @ wmat).reshape(
                (batch,) + out_sp + (cin,) + (k,) * nd
            )
            back = (0, 1 + nd) + tuple(range(1, 1 + nd)) + tuple(
                range(2 + nd, 2 + 2 * nd)
            )
            gcols = gcols.transpose(back)  # [B, Cin, *out_sp, *k^nd]
            gxp = np.zeros_like(xp)
            for off in np.ndindex(*(k,) * nd):
                slices = tuple(
                    slice(o, o + stride * n, stride) for o, n in zip(off, out_sp)
                )
                gxp[(slice(None), slice(None)) + slices] += gcols[
                    (Ellipsis,) + off
                ]
            crop = tuple(slice(padding, padding + n) for n in spatial)
            _accumulate(x, gxp[(slice(None), slice(None)) + crop])

    return x.tape._register(out, bwd, x.requires_grad or w.requires_grad)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return _conv_nd(x, w, stride, padding, 2)


def conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return _conv_nd(x, w, stride, padding, 3)


# ---------------------------------------------------------------------------
# grid-cell gather / scatter (last axis is the embedding axis)


def take_cells(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows x[n, h, w, :] for each (n, h, w) in idx -> [M, E]."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
    if x.data.ndim != 4:
        raise ValueError(f"take_cells: expected [B,H,W,E] input, got {x.data.shape}")
    if idx.size and (
        idx.min() < 0
        or idx[:, 0].max() >= x.data.shape[0]
        or idx[:, 1].max() >= x.data.shape[1]
        or idx[:, 2].max() >= x.data.shape[2]
    ):
        raise ValueError("take_cells: cell index out of grid")
    i0, i1, i2 = idx[:, 0], idx[:, 1], idx[:, 2]
    out = x.data[i0, i1, i2, :].copy()

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, (i0, i1, i2), g)

    return x.tape._register(out, bwd, x.requires_grad)


def replace_cells(x: Tensor, idx: np.ndarray, v: Tensor) -> Tensor:
    """Overwrite cells x[n, h, w, :] <- v for each (n, h, w) in idx.

    The replaced cells stop gradient to x; v receives the summed gradient of
    every cell it was written to.
    """
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
    if x.data.ndim != 4:
        raise ValueError(f"replace_cells: expected [B,H,W,E] input, got {x.data.shape}")
    if v.data.shape != (x.data.shape[-1],):
        raise ValueError(
            f"replace_cells: vector shape {v.data.shape} != embedding axis "
            f"({x.data.shape[-1]},)"
        )
    if idx.size and (
        idx.min() < 0
        or idx[:, 0].max() >= x.data.shape[0]
        or idx[:, 1].max() >= x.data.shape[1]
        or idx[:, 2].max() >= x.data.shape[2]
    ):
        raise ValueError("replace_cells: cell index out of grid")
    i0, i1, i2 = idx[:, 0], idx[:, 1], idx[:, 2]
    out = x.data.copy()
    out[i0, i1, i2, :] = v.data

    def bwd(g):
        if x.requires_grad:
            gx = g.copy()
            gx[i0, i1, i2, :] = 0.0
            _accumulate(x, gx)
        if v.requires_grad:
            _accumulate(v, g[i0, i1, i2, :].sum(axis=0))

    return x.tape._register(out, bwd, x.requires_grad or v.requires_grad)
