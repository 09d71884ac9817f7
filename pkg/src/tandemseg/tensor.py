"""Dense-tensor engine with reverse-mode differentiation.

Feature maps are NCHW. Every differentiable operation builds a node in a
dynamic graph; ``Tensor.backward()`` runs a topological sweep from a scalar
loss and accumulates gradients into every tensor created with
``track_grad=True``. The default dtype is float32; wrap code in
``precision("double")`` when float64 is needed (finite-difference checks).
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, EngineError, UsageError

# Grad mode and leaf dtype are per-thread: inference fans slice work out over
# a thread pool, and a shared flag with save/restore semantics would let one
# worker's exit clobber another's (or the main thread's) state.
_STATE = threading.local()

_PRECISION_DTYPES = {"single": np.dtype(np.float32), "double": np.dtype(np.float64)}


def default_dtype() -> np.dtype:
    """Dtype given to newly created leaf tensors."""
    return getattr(_STATE, "dtype", _PRECISION_DTYPES["single"])


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the leaf dtype: ``"single"`` (f32) or ``"double"`` (f64)."""
    if mode not in _PRECISION_DTYPES:
        raise ConfigError(f"unknown precision mode {mode!r}; expected 'single' or 'double'")
    previous = default_dtype()
    _STATE.dtype = _PRECISION_DTYPES[mode]
    try:
        yield
    finally:
        _STATE.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    previous = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


class Tensor:
    """A numpy array plus an optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "track_grad", "_parents", "_grad_fn")

    def __init__(self, data, track_grad: bool = False):
        # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray
        # would promote them to shape (1,)) while still forcing C layout.
        self.data = np.asarray(data, dtype=default_dtype(), order="C")
        self.grad: np.ndarray | None = None
        self.track_grad = bool(track_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"],
                grad_fn: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.track_grad = False
        if _grad_enabled() and any(p._requires for p in parents):
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        return out

    @property
    def _requires(self) -> bool:
        return self.track_grad or self._grad_fn is not None

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.track_grad = False
        out._parents = ()
        out._grad_fn = None
        return out

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise EngineError(f"{what} contains non-finite values")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every tracked ancestor."""
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar, got shape {self.shape}")
        ordered: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative postorder: graphs can be deeper than the recursion limit
            node, done = stack.pop()
            if done:
                ordered.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(ordered):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)
        for node in ordered:
            if not node.track_grad and node is not self:
                node.grad = None

    # -- elementwise arithmetic (numpy broadcasting) --------------------------

    def __add__(self, other):
        a, b = self, _lift(other)
        return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _lift(other)
        return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)

    def __rsub__(self, other):
        a, b = _lift(other), self
        return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)

    def __mul__(self, other):
        a, b = self, _lift(other)
        return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _lift(other)
        return _binary(a, b, a.data / b.data,
                       lambda g: g / b.data,
                       lambda g: -g * a.data / (b.data * b.data))

    def __rtruediv__(self, other):
        a, b = _lift(other), self
        return _binary(a, b, a.data / b.data,
                       lambda g: g / b.data,
                       lambda g: -g * a.data / (b.data * b.data))

    def __neg__(self):
        t = self

        def grad_fn(g):
            if t._requires:
                t._accumulate(-g)

        return Tensor._result(-t.data, (t,), grad_fn)

    def sum(self) -> "Tensor":
        t = self

        def grad_fn(g):
            if t._requires:
                t._accumulate(np.full_like(t.data, g))

        return Tensor._result(np.asarray(t.data.sum(), dtype=t.data.dtype), (t,), grad_fn)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def __repr__(self) -> str:
        flags = []
        if self.track_grad:
            flags.append("track_grad")
        if self._grad_fn is not None:
            flags.append("node")
        tail = f" [{', '.join(flags)}]" if flags else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tail})"


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a: Tensor, b: Tensor, data: np.ndarray,
            dfa: Callable[[np.ndarray], np.ndarray],
            dfb: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    def grad_fn(g):
        if a._requires:
            a._accumulate(_unbroadcast(dfa(g), a.data.shape))
        if b._requires:
            b._accumulate(_unbroadcast(dfb(g), b.data.shape))

    return Tensor._result(data, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Strict elementwise sum used by skip connections: shapes must be identical."""
    if a.shape != b.shape:
        raise DimensionError(f"add requires identical shapes, got {a.shape} and {b.shape}")
    return a + b


def relu(t: Tensor) -> Tensor:
    t = _lift(t)
    mask = t.data > 0

    def grad_fn(g):
        if t._requires:
            t._accumulate(g * mask)

    return Tensor._result(np.maximum(t.data, 0), (t,), grad_fn)


def sigmoid(t: Tensor) -> Tensor:
    t = _lift(t)
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        if t._requires:
            t._accumulate(g * out * (1.0 - out))

    return Tensor._result(out, (t,), grad_fn)


def dropout(t: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; exact identity when ``p == 0`` or in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return t
    if rng is None:
        raise UsageError("dropout in train mode with p > 0 requires an rng")
    keep = (rng.random(t.shape) >= p).astype(t.data.dtype)
    keep /= np.asarray(1.0 - p, dtype=t.data.dtype)

    def grad_fn(g):
        if t._requires:
            t._accumulate(g * keep)

    return Tensor._result(t.data * keep, (t,), grad_fn)


def maxpool2x2(t: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first maximum."""
    n, c, h, w = _expect_nchw(t, "maxpool2x2")
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 requires even spatial extents, got {h}x{w}")
    hh, ww = h // 2, w // 2
    tiles = t.data.reshape(n, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww, 4)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        if not t._requires:
            return
        scat = np.zeros((n, c, hh, ww, 4), dtype=g.dtype)
        np.put_along_axis(scat, idx[..., None], g[..., None], axis=-1)
        full = scat.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        t._accumulate(full)

    return Tensor._result(np.ascontiguousarray(out), (t,), grad_fn)


def upsample_nearest2x(t: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by a factor of 2 in both spatial axes."""
    n, c, h, w = _expect_nchw(t, "upsample_nearest2x")
    out = t.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g):
        if t._requires:
            t._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor._result(out, (t,), grad_fn)


def grid_subsample2x(t: Tensor) -> Tensor:
    """Keep every second row/column; the parameter-free skip for stride-2 blocks."""
    n, c, h, w = _expect_nchw(t, "grid_subsample2x")
    if h % 2 or w % 2:
        raise DimensionError(f"grid_subsample2x requires even spatial extents, got {h}x{w}")
    out = np.ascontiguousarray(t.data[:, :, ::2, ::2])

    def grad_fn(g):
        if not t._requires:
            return
        full = np.zeros((n, c, h, w), dtype=g.dtype)
        full[:, :, ::2, ::2] = g
        t._accumulate(full)

    return Tensor._result(out, (t,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise UsageError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            if t._requires:
                t._accumulate(piece)

    return Tensor._result(data, tuple(tensors), grad_fn)


def _expect_nchw(t: Tensor, op: str) -> tuple[int, int, int, int]:
    if t.ndim != 4:
        raise DimensionError(f"{op} expects an NCHW tensor, got shape {t.shape}")
    return t.shape  # type: ignore[return-value]


def _same_padding(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-extent // stride)  # ceil(extent / stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    before = total // 2
    return before, total - before


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
           stride: int = 1, padding: int | str = "same") -> Tensor:
    """2-D convolution (cross-correlation) for 1x1 or 3x3 square kernels.

    ``padding="same"`` keeps the output at ceil(extent / stride) per axis,
    padding the extra cell (odd totals) at the bottom/right; an integer pads
    symmetrically by that amount.
    """
    n, cin, h, w = _expect_nchw(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d weight must be (Cout, Cin, k, k), got {weight.shape}")
    cout, wcin, kh, kw = weight.shape
    if kh not in (1, 3):
        raise ConfigError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if wcin != cin:
        raise DimensionError(
            f"conv2d input has {cin} channels but weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if not isinstance(stride, int) or stride < 1:
        raise ConfigError(f"conv2d stride must be a positive integer, got {stride}")

    if padding == "same":
        ph0, ph1 = _same_padding(h, kh, stride)
        pw0, pw1 = _same_padding(w, kw, stride)
    elif isinstance(padding, int) and padding >= 0:
        ph0 = ph1 = pw0 = pw1 = padding
    else:
        raise ConfigError(f"conv2d padding must be 'same' or a non-negative int, got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: (N, Cin, Ho, Wo, kh, kw)
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]
    ho, wo = out.shape[2], out.shape[3]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        if bias is not None and bias._requires:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight._requires:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
            weight._accumulate(gw)
        if x._requires:
            gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (N, Ho, Wo, Cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + (ho - 1) * stride + 1:stride,
                        j:j + (wo - 1) * stride + 1:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accumulate(gxp[:, :, ph0:ph0 + h, pw0:pw0 + w])

    return Tensor._result(out, parents, grad_fn)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    Train mode normalises with biased batch statistics and folds them into
    the running buffers in place; eval mode normalises with the buffers.
    """
    if eps <= 0:
        raise ConfigError(f"batchnorm eps must be positive, got {eps}")
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"batchnorm momentum must be in [0, 1], got {momentum}")
    n, c, h, w = _expect_nchw(x, "batchnorm2d")
    for name, arr in (("gamma", gamma.data), ("beta", beta.data),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"batchnorm {name} must have shape ({c},), got {arr.shape}")

    m = n * h * w
    if train:
        if m < 2:
            raise DimensionError("batchnorm train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def grad_fn(g):
        if beta._requires:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma._requires:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if not x._requires:
            return
        gxhat = g * gamma.data[None, :, None, None]
        if train:
            s1 = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            gx = (inv[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv[None, :, None, None]
        x._accumulate(gx)

    return Tensor._result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), grad_fn)
