"""Define-by-run reverse-mode autodiff over dense numpy arrays.

Every op is a plain function taking and returning :class:`Tensor`. While a
:class:`Tape` is active (``with Tape() as tape:``) any op whose inputs require
gradients is recorded; ``tape.backward(loss)`` then walks the records in
reverse and returns gradients keyed by ``node_id``.

Storage is float32. Passing float64 arrays everywhere gives a float64 path,
which exists for finite-difference testing only.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "OptimizerState",
    "DimensionError", "ContractError", "NonFiniteError", "ParameterError",
    "dense", "conv2d", "conv_transpose2d", "conv_output_extent",
    "relu", "tanh", "softmax", "log_softmax", "cross_entropy", "mse", "kernel_gram",
    "add", "sub", "mul", "scale", "reshape", "flatten", "sum", "mean", "pick", "max_excluding",
    "optimizer_step",
]


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ParameterError(ValueError):
    pass


_node_ids = itertools.count(1)
_active: list["Tape"] = []


class Tensor:
    """Immutable n-d array with optional tape participation."""

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        arr = np.array(data, dtype=dtype)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _raise_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


@dataclass
class _Record:
    out_id: int
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Single-owner recording of one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc):
        top = _active.pop()
        assert top is self, "tapes must be exited in LIFO order"
        return False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        for t in inputs:
            if t.requires_grad and t.node_id not in self._produced:
                self._leaves.setdefault(t.node_id, t)
        self.records.append(_Record(out.node_id, inputs, vjp))
        self._produced.add(out.node_id)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id not in self._produced and loss.node_id not in self._leaves:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.get(rec.out_id)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        for nid, leaf in self._leaves.items():
            if nid not in grads:
                grads[nid] = np.zeros_like(leaf.data)
        return grads

    def gradient(self, loss: Tensor, tensors: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self.backward(loss)
        out = []
        for t in tensors:
            if t.node_id not in grads:
                raise ContractError(f"no gradient recorded for {t!r}")
            out.append(grads[t.node_id])
        return out


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    # op outputs are fresh arrays: freeze in place instead of copying
    out = Tensor.__new__(Tensor)
    data.setflags(write=False)
    out.data = data
    out.requires_grad = requires_grad
    out.node_id = next(_node_ids)
    return out


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = _active[-1] if _active else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    if not data.flags.owndata or not data.flags.writeable:
        data = data.copy()
    out = _wrap(data, track)
    if track:
        tape._record(out, inputs, vjp)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.maximum(x.data, x.dtype.type(0)), (x,),
                 lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1 if x.data.size == 0 else x.data.size // x.shape[0]))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, src).astype(x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    src = x.shape
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g / n, src).astype(x.dtype),), "mean")


def pick(x: Tensor, index) -> Tensor:
    """Row-wise gather: ``out[b] = x[b, index[b]]``."""
    index = np.asarray(index, dtype=np.int64)
    _check_rows(x, index, "pick")
    rows = np.arange(x.shape[0])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _make(x.data[rows, index], (x,), vjp, "pick")


def max_excluding(x: Tensor, index) -> Tensor:
    """Row-wise max over all columns except ``index[b]`` (lowest column wins ties)."""
    index = np.asarray(index, dtype=np.int64)
    _check_rows(x, index, "max_excluding")
    if x.shape[1] < 2:
        raise DimensionError("max_excluding needs at least two columns")
    rows = np.arange(x.shape[0])
    masked = x.data.copy()
    masked[rows, index] = -np.inf
    arg = masked.argmax(axis=1)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[rows, arg] = g
        return (gx,)

    return _make(x.data[rows, arg], (x,), vjp, "max_excluding")


def _check_rows(x: Tensor, index: np.ndarray, op: str) -> None:
    if x.data.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"{op}: expected [B,K] and [B] indices, got {x.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise IndexError(f"{op}: index out of range [0, {x.shape[1]})")


# ---------------------------------------------------------------- layers

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or b.shape != (w.shape[1],) or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")

    def vjp(g):
        return (
            g @ w.data.T if x.requires_grad else None,
            x.data.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _make(x.data @ w.data + b.data, (x, w, b), vjp, "dense")


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output extent of a strided convolution; must divide exactly."""
    span = size + 2 * padding - kernel
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv extent ({size}+2*{padding}-{kernel})/{stride}+1 is not a positive integer")
    return span // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(B,C,H,W) -> contiguous (B*Ho*Wo, C*kh*kw) patch matrix."""
    win = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def _col2im(gcols: np.ndarray, shape, stride, padding) -> np.ndarray:
    """Scatter-add ``gcols`` (kh,kw,C,B,Ho,Wo) back onto a (B,C,H,W) grid."""
    b, c, h, w = shape
    kh, kw, _, _, ho, wo = gcols.shape
    out = np.zeros((c, b, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _patch_grads(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """(B,F,Ho,Wo) output grads times (F,C,kh,kw) kernel -> (kh,kw,C,B,Ho,Wo)."""
    bsz, f, ho, wo = g.shape
    _, c, kh, kw = k.shape
    kmat = k.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
    p = kmat @ g.transpose(1, 0, 2, 3).reshape(f, -1)
    return p.reshape(kh, kw, c, bsz, ho, wo)


def _cols_times_kernel(cols: np.ndarray, k: np.ndarray, b: int, ho: int, wo: int) -> np.ndarray:
    f = k.shape[0]
    out = cols @ k.reshape(f, -1).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2))


def _kernel_grad(g: np.ndarray, cols: np.ndarray, kshape) -> np.ndarray:
    return (g.transpose(0, 2, 3, 1).reshape(-1, kshape[0]).T @ cols).reshape(kshape)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0, b: Tensor | None = None) -> Tensor:
    """Cross-correlation of ``x`` [B,C,H,W] with ``k`` [F,C,Kh,Kw], optional bias [F]."""
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: incompatible shapes x{x.shape} k{k.shape}")
    if b is not None and b.shape != (k.shape[0],):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({k.shape[0]},)")
    kh, kw = k.shape[2], k.shape[3]
    ho = conv_output_extent(x.shape[2], kh, stride, padding)
    wo = conv_output_extent(x.shape[3], kw, stride, padding)
    cols = _im2col(x.data, kh, kw, stride, padding)
    out = _cols_times_kernel(cols, k.data, x.shape[0], ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def vjp(g):
        gx = gk = gb = None
        if x.requires_grad:
            gx = _col2im(_patch_grads(g, k.data), x.shape, stride, padding)
        if k.requires_grad:
            gk = _kernel_grad(g, cols, k.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if b is None else (gx, gk, gb)

    inputs = (x, k) if b is None else (x, k, b)
    return _make(out, inputs, vjp, "conv2d")


def conv_transpose2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0,
                     b: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input.

    ``x`` is [B,F,Ho,Wo] and ``k`` has the conv layout [F,C,Kh,Kw]; the result is
    [B,C,H,W] with H = (Ho-1)*stride - 2*padding + Kh, so a decoder can reuse the
    encoder's kernel shapes and land exactly on the encoder's input extent.
    """
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[0]:
        raise DimensionError(f"conv_transpose2d: incompatible shapes x{x.shape} k{k.shape}")
    kh, kw = k.shape[2], k.shape[3]
    h = (x.shape[2] - 1) * stride - 2 * padding + kh
    w = (x.shape[3] - 1) * stride - 2 * padding + kw
    if h < 1 or w < 1:
        raise DimensionError(f"conv_transpose2d: non-positive output extent {(h, w)}")
    if b is not None and b.shape != (k.shape[1],):
        raise DimensionError(f"conv_transpose2d: bias shape {b.shape} != ({k.shape[1]},)")
    out = _col2im(_patch_grads(x.data, k.data), (x.shape[0], k.shape[1], h, w), stride, padding)
    if b is not None:
        out += b.data[None, :, None, None]

    def vjp(g):
        gx = gk = gb = None
        cols = _im2col(g, kh, kw, stride, padding)
        if x.requires_grad:
            gx = _cols_times_kernel(cols, k.data, x.shape[0], x.shape[2], x.shape[3])
        if k.requires_grad:
            gk = _kernel_grad(x.data, cols, k.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if b is None else (gx, gk, gb)

    inputs = (x, k) if b is None else (x, k, b)
    return _make(out, inputs, vjp, "conv_transpose2d")


# ---------------------------------------------------------------- losses

def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"softmax expects [B,K], got {x.shape}")
    s = np.exp(_log_softmax(x.data))

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), vjp, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax expects [B,K], got {x.shape}")
    ls = _log_softmax(x.data)
    s = np.exp(ls)
    return _make(ls, (x,), lambda g: (g - s * g.sum(axis=1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Mean (or summed) negative log-likelihood of integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_rows(logits, labels, "cross_entropy")
    if reduction not in ("mean", "sum"):
        raise ParameterError(f"unknown reduction {reduction!r}")
    n = logits.shape[0]
    rows = np.arange(n)
    ls = _log_softmax(logits.data)
    nll = -ls[rows, labels]
    value = nll.mean() if reduction == "mean" else nll.sum()
    denom = n if reduction == "mean" else 1

    def vjp(g):
        d = np.exp(ls)
        d[rows, labels] -= 1
        return (d * (g / denom),)

    return _make(np.asarray(value, dtype=logits.dtype), (logits,), vjp, "cross_entropy")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared elementwise difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        d = diff * (2 * g / n)
        return (d, -d)

    return _make(np.asarray((diff * diff).mean(), dtype=diff.dtype), (a, b), vjp, "mse")


def kernel_gram(a: Tensor, b: Tensor, kind: str = "imq", scale: float = 1.0) -> Tensor:
    """Pairwise kernel matrix between rows of ``a`` [N,Z] and ``b`` [M,Z].

    rbf: exp(-d2/scale); imq: scale/(scale + d2), with d2 the squared distance.
    """
    if scale <= 0:
        raise ParameterError(f"kernel scale must be positive, got {scale}")
    if kind not in ("rbf", "imq"):
        raise ParameterError(f"unknown kernel {kind!r}")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"kernel_gram: incompatible shapes {a.shape} {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    s = a.data.dtype.type(scale)
    if kind == "rbf":
        k = np.exp(-d2 / s)
        dk = -k / s
    else:
        k = s / (s + d2)
        dk = -(k * k) / s

    def vjp(g):
        coef = (g * dk)[:, :, None] * diff * 2
        return (coef.sum(axis=1) if a.requires_grad else None,
                -coef.sum(axis=0) if b.requires_grad else None)

    return _make(k, (a, b), vjp, "kernel_gram")


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")


def optimizer_step(state: OptimizerState, params: dict[str, Tensor],
                   grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Return updated parameters; moment buffers in ``state`` advance in place."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {grads[name].shape}, expected {p.shape}")
    state.step_count += 1
    t = state.step_count
    out = {}
    for name, p in params.items():
        dt = p.data.dtype.type
        g = grads[name].astype(p.dtype, copy=False)
        if state.kind == "sgd":
            new = p.data - dt(state.learning_rate) * g
        else:
            m = state.m.get(name, np.zeros_like(p.data))
            v = state.v.get(name, np.zeros_like(p.data))
            m = dt(state.beta1) * m + dt(1 - state.beta1) * g
            v = dt(state.beta2) * v + dt(1 - state.beta2) * (g * g)
            state.m[name], state.v[name] = m, v
            mhat = m / dt(1 - state.beta1 ** t)
            vhat = v / dt(1 - state.beta2 ** t)
            new = p.data - dt(state.learning_rate) * mhat / (np.sqrt(vhat) + dt(state.eps))
        out[name] = Tensor(new, requires_grad=p.requires_grad, dtype=p.dtype)
    return out
