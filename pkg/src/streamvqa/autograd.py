"""Reverse-mode automatic differentiation over float64 numpy arrays.

The op set is exactly what a small decoder-only transformer needs:
elementwise arithmetic, matmul, softmax (plain and masked), layer norm,
GELU, embedding lookup, cross-entropy, KL divergence, adaptive average
pooling, concatenation/slicing, plus an Adam optimizer with cosine
learning-rate decay and a binary named-tensor container for checkpoints.

Everything is float64. Any op that produces a NaN or Inf raises
NonFiniteError immediately instead of letting it propagate.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ContainerError",
    "no_grad",
    "tensor",
    "zeros",
    "randn",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "narrow",
    "embedding",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "gelu",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "cross_entropy",
    "kl_divergence",
    "adaptive_avg_pool_1d",
    "Adam",
    "write_container",
    "read_container",
    "save_checkpoint",
    "load_checkpoint",
    "MAGIC_CHECKPOINT",
]


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf values."""


class ContainerError(ValueError):
    """A binary tensor container is malformed or has the wrong magic/version."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(data: np.ndarray, op: str) -> None:
    # min/max are NaN-poisoned, so two allocation-free reductions cover
    # every non-finite case
    if data.size and not (np.isfinite(data.min()) and np.isfinite(data.max())):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A float64 array with an optional gradient slot and graph linkage.

    Leaf tensors are created with `tensor(...)` (or the helpers below);
    interior nodes are created by ops. `backward()` may be called once on
    a scalar result and fills `.grad` on every reachable leaf that has
    `requires_grad=True`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bk", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        _check_finite(self.data, "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bk = None
        self._consumed = False

    # -- introspection ------------------------------------------------------

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
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A leaf sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        """Reverse pass from a scalar. Accumulates into leaf `.grad` slots."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if self._consumed:
            raise RuntimeError("backward() already called on this result")
        self._consumed = True

        topo = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._bk is None:
                # leaf: keep the accumulated gradient
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._bk(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative DFS: graphs from long streaming runs overflow the recursion limit
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bk, op: str,
          check: bool = True) -> Tensor:
    # structural ops (reshape, slice, concat, ...) cannot create non-finite
    # values from finite inputs and skip the scan
    if check:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bk = bk
    else:
        out.requires_grad = False
        out._parents = ()
        out._bk = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- creation helpers --------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bk(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bk, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bk(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bk, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bk(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bk, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bk(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bk, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bk(g):
        return (g * out,)

    return _node(out, (a,), bk, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bk(g):
        return (g / a.data,)

    return _node(out, (a,), bk, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bk(g):
        return (g * 0.5 / out,)

    return _node(out, (a,), bk, "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bk(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), bk, "tanh")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def bk(g):
        # d/dx [x * Phi(x)] = Phi(x) + x * pdf(x)
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)

    return _node(out, (a,), bk, "gelu")


# -- shape ops ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bk(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bk, "matmul")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bk(g):
        return (np.transpose(g, inv),)

    return _node(out, (a,), bk, "transpose", check=False)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bk(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), bk, "reshape", check=False)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [t for t in (_wrap(t) for t in tensors) if t.shape[axis] > 0]
    if not parts:
        raise ValueError("concat of empty tensor list")
    if len(parts) == 1:
        only = parts[0]
        return _node(only.data.copy(), (only,), lambda g: (g,), "concat")
    out = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bk(g):
        slc = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            slc[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slc)])
        return tuple(outs)

    return _node(out, tuple(parts), bk, "concat", check=False)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow out of range: axis {axis} start {start} len {length} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def bk(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(out, (a,), bk, "narrow", check=False)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather: out[..., :] = weight[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= weight.shape[0]):
        raise ValueError("embedding ids out of range")
    out = weight.data[ids]

    def bk(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _node(out, (weight,), bk, "embedding", check=False)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def bk(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _node(out, (a,), bk, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), _wrap(1.0 / count))


# -- neural-net ops -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bk(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), bk, "softmax")


def masked_softmax(scores: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over the positions where `mask` is 1; zeros elsewhere.

    Blocked positions get an exact 0.0 weight and the normalizer runs over
    allowed positions only, so outputs are bit-exactly independent of the
    blocked scores.
    """
    allowed = mask if getattr(mask, "dtype", None) == np.bool_ else np.asarray(mask, dtype=bool)
    x = scores.data
    m = np.where(allowed, x, -np.inf).max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("masked_softmax: a row has no allowed positions")
    d = x - m
    np.minimum(d, 700.0, out=d)  # keep exp finite at blocked entries
    e = np.exp(d)
    e *= allowed  # blocked entries become exactly 0.0
    out = e / e.sum(axis=axis, keepdims=True)

    def bk(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)  # exact zeros at blocked entries

    return _node(out, (scores,), bk, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data
    d = x.shape[-1]

    def bk(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d
        )
        return gx, gg, gb

    return _node(out, (x, gain, bias), bk, "layer_norm")


def cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """Weighted mean next-token loss.

    logits: (..., L, vocab); targets: (..., L) int ids; weights: (..., L)
    nonnegative floats. Returns sum(w_i * nll_i) / sum(w).
    """
    t = np.asarray(targets, dtype=np.int64)
    w = _as_f64(weights)
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tf = t.reshape(-1)
    wf = w.reshape(-1)
    wsum = wf.sum()
    if wsum <= 0:
        raise ValueError("cross_entropy: weights sum to zero")
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True)) + m
    nll = (lse.reshape(-1) - flat[np.arange(flat.shape[0]), tf])
    out = np.asarray((nll * wf).sum() / wsum)

    def bk(g):
        p = np.exp(flat - lse)
        p[np.arange(flat.shape[0]), tf] -= 1.0
        p *= (wf / wsum)[:, None]
        return ((g * p).reshape(logits.shape),)

    return _node(out, (logits,), bk, "cross_entropy")


_KL_CLAMP = 1e-12


def kl_divergence(pred: Tensor, target) -> Tensor:
    """KL(target || pred) = sum target * (log target - log pred).

    `target` is a constant probability vector; zero target entries contribute
    nothing (0 * log 0 := 0). `pred` is clamped at 1e-12 inside the log.
    """
    t = _as_f64(target)
    p = np.maximum(pred.data, _KL_CLAMP)
    pos = t > 0
    out = np.asarray(np.sum(t[pos] * (np.log(t[pos]) - np.log(p[pos]))))

    def bk(g):
        gp = np.zeros_like(pred.data)
        live = pos & (pred.data >= _KL_CLAMP)
        gp[live] = -t[live] / pred.data[live]
        return (g * gp,)

    return _node(out, (pred,), bk, "kl_divergence")


def pool_bins(length: int, parts: int) -> list[tuple[int, int]]:
    """Adaptive pooling bin [start, end) bounds: floor(j*L/P) to ceil((j+1)*L/P)."""
    return [
        (math.floor(j * length / parts), math.ceil((j + 1) * length / parts))
        for j in range(parts)
    ]


def adaptive_avg_pool_1d(x: Tensor, parts: int) -> Tensor:
    """Pool an (L, C) tensor down to (parts, C) rows by bin averaging."""
    if x.ndim != 2:
        raise ValueError("adaptive_avg_pool_1d expects a rank-2 tensor")
    length = x.shape[0]
    if not 1 <= parts <= length:
        raise ValueError(f"pool size {parts} out of range for length {length}")
    bins = pool_bins(length, parts)
    out = np.stack([x.data[s:e].mean(axis=0) for s, e in bins])

    def bk(g):
        gx = np.zeros_like(x.data)
        for j, (s, e) in enumerate(bins):
            gx[s:e] += g[j] / (e - s)
        return (gx,)

    return _node(out, (x,), bk, "adaptive_avg_pool_1d")


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with optional cosine learning-rate decay over `total_steps`."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 total_steps: int = 0):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.total_steps = total_steps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_lr(self) -> float:
        if self.total_steps <= 0:
            return self.lr
        frac = min(self.t, self.total_steps) / self.total_steps
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * frac))

    def step(self) -> None:
        self.t += 1
        lr = self.current_lr()
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[k]
            v = self._v[k]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * (p.grad * p.grad)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- binary named-tensor container ---------------------------------------------
#
# Layout: 4 magic bytes, one version byte, then a stream of entries until EOF.
# Entry: u16-LE name length, UTF-8 name, u8 rank, rank x u64-LE extents,
# then the row-major float64-LE values.

MAGIC_CHECKPOINT = b"VSTT"
CONTAINER_VERSION = 1


def write_container(path, magic: bytes, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("container magic must be 4 bytes")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<B", CONTAINER_VERSION))
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f8")  # tobytes() below handles layout
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
            fh.write(a.tobytes())


def read_container(path, magic: bytes) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 5 or blob[:4] != magic:
        raise ContainerError(f"{path}: bad magic, expected {magic!r}")
    if blob[4] != CONTAINER_VERSION:
        raise ContainerError(f"{path}: unsupported container version {blob[4]}")
    out: dict[str, np.ndarray] = {}
    pos = 5
    n = len(blob)
    while pos < n:
        if pos + 2 > n:
            raise ContainerError(f"{path}: truncated entry header")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if pos + 1 > n:
            raise ContainerError(f"{path}: truncated rank")
        rank = blob[pos]
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", blob, pos) if rank else ()
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        nbytes = 8 * count
        if pos + nbytes > n:
            raise ContainerError(f"{path}: truncated values for {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        out[name] = arr.astype(np.float64)
        pos += nbytes
    return out


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray]) -> None:
    arrays = {k: (p.data if isinstance(p, Tensor) else p) for k, p in params.items()}
    write_container(path, MAGIC_CHECKPOINT, arrays)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return read_container(path, MAGIC_CHECKPOINT)
