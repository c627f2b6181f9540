"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the denoiser and audio front-end need are provided.
Operations record onto the active :class:`Graph`; outside a graph (or
when no input needs a gradient) they are plain numpy evaluations.
"""

from __future__ import annotations

import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class MaskError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


_local = threading.local()


def _active_graph() -> "Graph | None":
    return getattr(_local, "graph", None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_graph", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        if self._graph is None:
            raise StateError("tensor was not produced by a recorded forward pass")
        self._graph.backward(self)


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters never carry gradient."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name: str, trainable: bool = True):
        super().__init__(value, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Graph:
    """Tape of primitive applications for one forward pass.

    Use as a context manager; ops executed inside it are recorded in
    creation order and :meth:`backward` replays them in reverse, which is
    a valid reverse topological order since every node is appended after
    its inputs.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False
        self._prev = None

    def __enter__(self) -> "Graph":
        self._prev = _active_graph()
        _local.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _local.graph = self._prev

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        out._graph = self
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise StateError("graph already consumed by a previous backward pass")
        if not self._nodes or loss._graph is not self:
            raise StateError("backward called without a recorded forward pass for this loss")
        if loss.data.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is None:
                continue
            fn(out.grad)
            if not isinstance(out, Parameter):
                out.grad = None
        self._nodes.clear()
        self._consumed = True


class no_grad:
    """Suspend recording within the block."""

    def __enter__(self):
        self._prev = _active_graph()
        _local.graph = None

    def __exit__(self, *exc):
        _local.graph = self._prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(t, Parameter) else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


CHECK_FINITE = True


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NumericalError("non-finite value produced by tensor op")
    graph = _active_graph()
    req = graph is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        graph.record(out, backward_fn)
    return out


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        _accum(x, g * s * (1.0 + x.data * (1.0 - s)))

    return _make(x.data * s, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1.0 - y * y))

    return _make(y, (x,), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, 2.0 * g * x.data)

    return _make(x.data * x.data, (x,), bw)


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch dims into rows: one GEMM instead of a batched reduction
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                _accum(b, a2.T @ g2)
            else:
                _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- softmax / normalization ---------------------------------------------


def masked_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to entries where ``mask`` is true.

    Masked entries come out as exact zeros. A row with no visible entry
    raises :class:`MaskError` instead of producing NaN.
    """
    x = as_tensor(logits)
    if mask is None:
        z = x.data - x.data.max(axis=axis, keepdims=True)
    else:
        m = np.asarray(mask, dtype=bool)
        if not np.any(m, axis=axis).all():
            raise MaskError("masked_softmax: a row has no unmasked entry")
        # additive bias at the mask's own (often broadcast) shape is far
        # cheaper than a full-size where()
        z = x.data + np.where(m, 0.0, -np.inf)
        z -= z.max(axis=axis, keepdims=True)
    s = np.exp(z, out=z)
    s /= s.sum(axis=axis, keepdims=True)

    def bw(g):
        gs = g * s
        gs -= s * gs.sum(axis=axis, keepdims=True)
        _accum(x, gs)

    return _make(s, (x,), bw)


def softmax(logits, axis: int = -1) -> Tensor:
    return masked_softmax(logits, None, axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params must have shape ({d},)")
    # row means through a matvec: much faster than a strided reduce for small d
    avg = np.full(d, 1.0 / d)
    xc = x.data - (x.data @ avg)[..., None]
    inv = 1.0 / np.sqrt((xc * xc) @ avg + eps)[..., None]
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, inv * (gx - (gx @ avg)[..., None] - xhat * ((gx * xhat) @ avg)[..., None]))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


# -- shape ops -----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def bw(g):
        _accum(x, g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, part)

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accum(table, full)

    return _make(table.data[ids], (table,), bw)


def gather(x: Tensor, idx, axis: int) -> Tensor:
    """``take`` along ``axis`` with integer indices ``idx`` (1-D).

    The backward pass scatters through a one-hot matrix product, which
    handles repeated indices and is much faster than ``np.add.at``.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather expects a 1-D index vector")
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"gather index out of range for axis of size {n}")

    def bw(g):
        onehot = np.zeros((n, idx.size))
        onehot[idx, np.arange(idx.size)] = 1.0
        gm = np.moveaxis(g, axis, -1)
        _accum(x, np.moveaxis(gm @ onehot.T, -1, axis))

    return _make(np.take(x.data, idx, axis=axis), (x,), bw)


def select(x: Tensor, mask, fill) -> Tensor:
    """Per-element choice between ``x`` (mask true) and ``fill``."""
    x, fill = as_tensor(x), as_tensor(fill)
    m = np.asarray(mask, dtype=bool)

    def bw(g):
        _accum(x, _unbroadcast(np.where(m, g, 0.0), x.shape))
        _accum(fill, _unbroadcast(np.where(m, 0.0, g), fill.shape))

    return _make(np.where(m, x.data, fill.data), (x, fill), bw)


# -- reductions ----------------------------------------------------------


def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(gg, x.shape).copy())

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / n)


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    diff = pred.data - target
    n = diff.size

    def bw(g):
        _accum(pred, (2.0 / n) * g * diff)

    return _make(np.asarray((diff * diff).mean()), (pred,), bw)


# -- optimizer -----------------------------------------------------------


class Adam:
    """Adam with bias correction. Frozen parameters are never touched."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params if p.trainable}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params if p.trainable}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.lr, self.betas, self.t, self.m, self.v, self.eps)


def adam_step(params: Sequence[Parameter], lr: float, betas: tuple[float, float], step: int,
              m: dict | None = None, v: dict | None = None, eps: float = 1e-8) -> None:
    """One in-place Adam update of the trainable members of ``params``.

    ``m``/``v`` hold moment buffers keyed by parameter name and are created
    on demand when omitted.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    m = {} if m is None else m
    v = {} if v is None else v
    for p in params:
        if not p.trainable:
            continue
        if not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in {p.name}")
    for p in params:
        if not p.trainable:
            continue
        mb = m.setdefault(p.name, np.zeros_like(p.data))
        vb = v.setdefault(p.name, np.zeros_like(p.data))
        mb *= b1
        mb += (1 - b1) * p.grad
        vb *= b2
        vb += (1 - b2) * p.grad * p.grad
        mhat = mb / (1 - b1 ** step)
        vhat = vb / (1 - b2 ** step)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


# -- checkpoints ---------------------------------------------------------

_MAGIC = b"SYNCKPT\x00"
_VERSION = 1


def save_checkpoint(path, params: Sequence[Parameter], optimizer: Adam | None = None) -> None:
    """Write parameters (and optionally Adam moments) to a flat binary archive.

    Layout: magic, u32 version, u32 entry count, then per entry the
    utf-8 name, shape, trainable flag and little-endian float64 payload.
    An optimizer section follows with the step count and m/v buffers.
    """
    buf = bytearray(_MAGIC)
    buf += struct.pack("<II", _VERSION, len(params))
    for p in params:
        _pack_array(buf, p.name, p.data, p.trainable)
    if optimizer is None:
        buf += struct.pack("<QI", 0, 0)
    else:
        buf += struct.pack("<QI", optimizer.t, len(optimizer.m))
        for name in sorted(optimizer.m):
            _pack_array(buf, name, optimizer.m[name], True)
            _pack_array(buf, name, optimizer.v[name], True)
    Path(path).write_bytes(bytes(buf))


def _pack_array(buf: bytearray, name: str, arr: np.ndarray, trainable: bool) -> None:
    raw = name.encode("utf-8")
    buf += struct.pack("<I", len(raw)) + raw
    buf += struct.pack("<I", arr.ndim)
    buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    buf += struct.pack("<B", int(trainable))
    buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _unpack_array(data: bytes, off: int):
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    name = data[off:off + n].decode("utf-8")
    off += n
    (ndim,) = struct.unpack_from("<I", data, off)
    off += 4
    shape = struct.unpack_from(f"<{ndim}Q", data, off)
    off += 8 * ndim
    (flag,) = struct.unpack_from("<B", data, off)
    off += 1
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(DTYPE)
    off += 8 * count
    return name, arr, bool(flag), off


def load_checkpoint(path) -> dict:
    """Read an archive written by :func:`save_checkpoint`.

    Returns ``{"params": {name: (array, trainable)}, "step": int,
    "m": {...}, "v": {...}}``.
    """
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    off = len(_MAGIC)
    version, n = struct.unpack_from("<II", data, off)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    params = {}
    for _ in range(n):
        name, arr, flag, off = _unpack_array(data, off)
        params[name] = (arr, flag)
    step, nm = struct.unpack_from("<QI", data, off)
    off += 12
    m, v = {}, {}
    for _ in range(nm):
        name, arr, _, off = _unpack_array(data, off)
        m[name] = arr
        name, arr, _, off = _unpack_array(data, off)
        v[name] = arr
    return {"params": params, "step": step, "m": m, "v": v}


def apply_checkpoint(params: Sequence[Parameter], ckpt: dict, strict: bool = True) -> None:
    stored = ckpt["params"]
    for p in params:
        if p.name not in stored:
            if strict:
                raise CheckpointError(f"checkpoint lacks parameter {p.name}")
            continue
        arr, _ = stored[p.name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {p.name}: {arr.shape} vs {p.shape}")
        p.data = arr.copy()


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g
