"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 numpy array and records a dynamic tape
while operators run.  Calling :meth:`Tensor.backward` on a scalar result
walks the tape in reverse topological order and accumulates gradients
into every tensor that requires them.  Gradients accumulate across
repeated backward calls until :meth:`Tensor.zero_grad` resets them.

Broadcasting is deliberately stricter than numpy: a lower-rank operand
may be expanded along *leading* dimensions only (so ``(4,)`` combines
with ``(3, 4)``, and scalars combine with anything).  Every other shape
mismatch raises :class:`ShapeError` naming the operation and both
shapes.  This keeps gradient bookkeeping trivially correct: the reverse
of leading expansion is a sum over leading axes.

The module also owns the RXT1 on-disk tensor format (see
:func:`save_array`), a central finite-difference oracle used throughout
the test suite, and a small AdamW optimizer for Tensor parameters.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "FormatError",
    "no_grad",
    "tensor",
    "concat",
    "attention",
    "finite_difference_gradient",
    "check_gradient",
    "save_array",
    "load_array",
    "save_tensor",
    "load_tensor",
    "adam_update",
    "AdamW",
]


class ShapeError(ValueError):
    """Shape mismatch in a tensor operation.

    Carries the operation name and the offending shapes so callers (and
    tests) can inspect them structurally instead of parsing a message.
    """

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class FormatError(ValueError):
    """Raised for malformed RXT1 files."""


# ---------------------------------------------------------------------------
# tape plumbing
# ---------------------------------------------------------------------------

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _broadcast_shape(op: str, sa: tuple, sb: tuple) -> tuple:
    """Output shape under the leading-expansion rule, or ShapeError."""
    if sa == sb:
        return sa
    if len(sa) >= len(sb):
        big, small = sa, sb
    else:
        big, small = sb, sa
    if big[len(big) - len(small):] == small:
        return big
    raise ShapeError(op, sa, sb)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reverse leading-dimension expansion by summing leading axes."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _as_tensor(x) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    """A float64 numpy array with an optional gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None

    # -- construction used by every op ------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, vjp) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    # -- basic introspection ----------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy; do not mutate mid-graph)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- backward ----------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable ``.grad``.

        ``self`` must hold exactly one element.  Repeated calls on the
        same graph keep accumulating (grads are never implicitly reset).
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that requires no grad")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            if node._vjp is None:
                continue
            contribs = node._vjp(g)
            for parent, contrib in zip(node._parents, contribs):
                if contrib is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + contrib
                else:
                    flows[key] = contrib

    # -- elementwise binary ops ---------------------------------------------
    def __add__(self, other):
        a, b = self, _as_tensor(other)
        _broadcast_shape("add", a.shape, b.shape)
        out_data = a.data + b.data

        def vjp(g):
            return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

        return Tensor._make(out_data, (a, b), vjp)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _as_tensor(other)
        _broadcast_shape("sub", a.shape, b.shape)
        out_data = a.data - b.data

        def vjp(g):
            return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

        return Tensor._make(out_data, (a, b), vjp)

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, _as_tensor(other)
        _broadcast_shape("mul", a.shape, b.shape)
        out_data = a.data * b.data

        def vjp(g):
            return (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            )

        return Tensor._make(out_data, (a, b), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _as_tensor(other)
        _broadcast_shape("div", a.shape, b.shape)
        out_data = a.data / b.data

        def vjp(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(out_data, (a, b), vjp)

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __neg__(self):
        a = self

        def vjp(g):
            return (-g,)

        return Tensor._make(-a.data, (a,), vjp)

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("pow supports scalar exponents only")
        a = self
        e = float(exponent)
        out_data = a.data ** e

        def vjp(g):
            return (g * e * a.data ** (e - 1.0),)

        return Tensor._make(out_data, (a,), vjp)

    # -- matmul --------------------------------------------------------------
    def __matmul__(self, other):
        a, b = self, _as_tensor(other)
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul", a.shape, b.shape)
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", a.shape, b.shape)
        lead = _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
        out_data = a.data @ b.data
        assert out_data.shape == lead + (a.shape[-2], b.shape[-1])

        def vjp(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return Tensor._make(out_data, (a, b), vjp)

    # -- shape ops -------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)
        in_shape = a.shape

        def vjp(g):
            return (g.reshape(in_shape),)

        return Tensor._make(out_data, (a,), vjp)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)
        out_data = np.transpose(a.data, axes)

        def vjp(g):
            return (np.transpose(g, inv),)

        return Tensor._make(out_data, (a,), vjp)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError("T", self.shape)
        return self.permute(1, 0)

    def __getitem__(self, index):
        a = self
        out_data = a.data[index]
        in_shape = a.shape

        def vjp(g):
            full = np.zeros(in_shape, dtype=np.float64)
            full[index] = g
            return (full,)

        return Tensor._make(np.array(out_data, copy=True), (a,), vjp)

    # -- elementwise unary ops ---------------------------------------------
    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def vjp(g):
            return (g * out_data,)

        return Tensor._make(out_data, (a,), vjp)

    def log(self):
        a = self

        def vjp(g):
            return (g / a.data,)

        return Tensor._make(np.log(a.data), (a,), vjp)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def vjp(g):
            return (g * 0.5 / out_data,)

        return Tensor._make(out_data, (a,), vjp)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def vjp(g):
            return (g * (1.0 - out_data * out_data),)

        return Tensor._make(out_data, (a,), vjp)

    def sigmoid(self):
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def vjp(g):
            return (g * out_data * (1.0 - out_data),)

        return Tensor._make(out_data, (a,), vjp)

    def abs(self):
        a = self
        out_data = np.abs(a.data)

        def vjp(g):
            return (g * np.sign(a.data),)

        return Tensor._make(out_data, (a,), vjp)

    def silu(self):
        """x * sigmoid(x), the denoiser's activation."""
        return self * self.sigmoid()

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)
        in_shape = a.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, in_shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, in_shape).copy(),)

        return Tensor._make(np.asarray(out_data), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.mean(axis=axis, keepdims=keepdims)
        in_shape = a.shape
        count = a.data.size if axis is None else np.prod(
            [in_shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
        )

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g / count, in_shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2 / count, in_shape).copy(),)

        return Tensor._make(np.asarray(out_data), (a,), vjp)

    # -- structured ops -------------------------------------------------------
    def softmax(self, axis: int = -1):
        """Numerically stable softmax; rows sum to 1 to ~1e-16."""
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def vjp(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            return ((g - dot) * out_data,)

        return Tensor._make(out_data, (a,), vjp)

    def layernorm(self, axis: int = -1, eps: float = 1e-5):
        """Normalize to zero mean / unit variance along ``axis``.

        Parameter-free; scale and shift compose from mul/add when needed.
        """
        a = self
        mu = a.data.mean(axis=axis, keepdims=True)
        xc = a.data - mu
        var = (xc * xc).mean(axis=axis, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv

        def vjp(g):
            gm = g.mean(axis=axis, keepdims=True)
            gy = (g * y).mean(axis=axis, keepdims=True)
            return ((g - gm - y * gy) * inv,)

        return Tensor._make(y, (a,), vjp)

    # -- convolution and resampling -------------------------------------------
    def conv2d(self, weight: "Tensor", bias: "Tensor" = None,
               stride: int = 1, padding: int = 0):
        """2D cross-correlation: (N,Cin,H,W) x (Cout,Cin,kh,kw) -> (N,Cout,Ho,Wo)."""
        a, w = self, weight
        if a.ndim != 4 or w.ndim != 4 or a.shape[1] != w.shape[1]:
            raise ShapeError("conv2d", a.shape, w.shape)
        n, cin, h, wd = a.shape
        cout, _, kh, kw = w.shape
        s, p = int(stride), int(padding)
        if h + 2 * p < kh or wd + 2 * p < kw:
            raise ShapeError("conv2d", a.shape, w.shape)
        xp = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else a.data
        ho = (h + 2 * p - kh) // s + 1
        wo = (wd + 2 * p - kw) // s + 1
        s0, s1, s2, s3 = xp.strides
        cols = np.lib.stride_tricks.as_strided(
            xp,
            shape=(n, cin, kh, kw, ho, wo),
            strides=(s0, s1, s2, s3, s2 * s, s3 * s),
        )
        out_data = np.einsum("nckhpq,ockh->nopq", cols, w.data, optimize=True)
        if bias is not None:
            if bias.shape != (cout,):
                raise ShapeError("conv2d-bias", out_data.shape, bias.shape)
            out_data = out_data + bias.data[None, :, None, None]

        def vjp(g):
            # constant kernels (fixed filter banks etc.) skip the weight pass
            gw = (np.einsum("nckhpq,nopq->ockh", cols, g, optimize=True)
                  if w.requires_grad else None)
            gx = None
            if a.requires_grad:
                gcols = np.einsum("nopq,ockh->nckhpq", g, w.data, optimize=True)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + ho * s:s, j:j + wo * s:s] += \
                            gcols[:, :, i, j]
                gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
            if bias is not None:
                gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
                return (gx, gw, gb)
            return (gx, gw)

        parents = (a, w) if bias is None else (a, w, bias)
        return Tensor._make(out_data, parents, vjp)

    def avg_pool2d(self, k: int):
        """Non-overlapping k x k average pooling on (N,C,H,W)."""
        a = self
        n, c, h, w = a.shape
        if h % k or w % k:
            raise ShapeError("avg_pool2d", a.shape, (k, k))
        out_data = a.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

        def vjp(g):
            gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            return (gx,)

        return Tensor._make(out_data, (a,), vjp)

    def upsample2x(self):
        """Nearest-neighbor 2x upsampling on (N,C,H,W)."""
        a = self
        out_data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
        n, c, h, w = a.shape

        def vjp(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return Tensor._make(out_data, (a,), vjp)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [(_as_tensor(t)) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise ShapeError("concat", ref, t.shape)
        for ax, (da, db) in enumerate(zip(ref, t.shape)):
            if ax != (axis % len(ref)) and da != db:
                raise ShapeError("concat", ref, t.shape)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array(p, copy=True) for p in np.split(g, splits, axis=axis))

    return Tensor._make(out_data, tuple(tensors), vjp)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v for (..., n, d) queries and (..., m, d) keys."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape)
    scores = (q @ k.permute(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / np.sqrt(d))
    return scores.softmax(axis=-1) @ v


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` maps a numpy array to a float; the array is perturbed one
    element at a time with (f(x+h e_i) - f(x-h e_i)) / 2h.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = float(f(x))
        xf[i] = orig - h
        fm = float(f(x))
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradient(fn, x0: np.ndarray, h: float = 1e-5):
    """Compare tape gradient of ``fn`` (Tensor -> scalar Tensor) with the oracle.

    Returns (analytic, numeric, max relative error).  Relative error uses
    a unit floor: |a - n| / max(1, |n|), elementwise max.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = fn(leaf)
    out.backward()
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x0)

    def scalar(x):
        with no_grad():
            return fn(Tensor(x)).item()

    numeric = finite_difference_gradient(scalar, x0, h=h)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return analytic, numeric, float(rel.max())


# ---------------------------------------------------------------------------
# RXT1 tensor format
# ---------------------------------------------------------------------------

RXT1_MAGIC = b"RXTENS01"


def save_array(path, arr: np.ndarray) -> None:
    """Write an array as RXT1: magic, u32 rank, u32 extents, f64 LE row-major."""
    arr = np.asarray(arr, dtype=np.float64)
    path = Path(path)
    rank = arr.ndim
    header = RXT1_MAGIC + struct.pack("<I", rank)
    if rank:
        header += struct.pack(f"<{rank}I", *arr.shape)
    path.write_bytes(header + arr.astype("<f8").tobytes(order="C"))


def load_array(path) -> np.ndarray:
    """Read an RXT1 file; raises FormatError on any structural problem."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != RXT1_MAGIC:
        raise FormatError(f"{path}: bad magic, not an RXT1 tensor")
    (rank,) = struct.unpack_from("<I", raw, 8)
    if rank > 32:
        raise FormatError(f"{path}: implausible rank {rank}")
    offset = 12
    if len(raw) < offset + 4 * rank:
        raise FormatError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + 8 * count
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size {len(raw) - offset} != {8 * count} for shape {shape}"
        )
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return data.reshape(shape).astype(np.float64, copy=True)


def save_tensor(path, t: Tensor) -> None:
    save_array(path, t.data)


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    return Tensor(load_array(path), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
                v: np.ndarray, t: int, lr: float,
                beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> None:
    """One in-place Adam step on raw arrays (shared by both optimizers)."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    """Adam with decoupled weight decay over named Tensor parameters."""

    def __init__(self, params: dict, lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            adam_update(p.data, p.grad, self.m[name], self.v[name],
                        self.t, self.lr, self.beta1, self.beta2, self.eps)

    def state_dict(self) -> dict:
        state = {"t": self.t}
        for k in self.params:
            state[f"m/{k}"] = self.m[k].copy()
            state[f"v/{k}"] = self.v[k].copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"], dtype=np.float64, copy=True)
            self.v[k] = np.array(state[f"v/{k}"], dtype=np.float64, copy=True)
