"""Dense rank-4 tensors with reverse-mode differentiation.

Only the handful of operations the interpolation network needs are
provided. Every op takes and returns :class:`Tensor4` values laid out as
``[batch, channel, height, width]``; scalar reductions return a
``[1, 1, 1, 1]`` tensor so the rank invariant holds everywhere.

Gradients are accumulated into ``.grad`` of every tensor created with
``requires_grad=True`` when :meth:`Tensor4.backward` is called on a
scalar result.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ConfigError(ValueError):
    """An operator was configured with values it cannot honour."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor4:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 extents, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor4, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor4":
        return Tensor4(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor to every leaf that wants them."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once pushed to parents
                if not node.requires_grad:
                    node.grad = None

    def __add__(self, other: "Tensor4") -> "Tensor4":
        return add(self, other)

    def __sub__(self, other: "Tensor4") -> "Tensor4":
        return sub(self, other)

    def __mul__(self, c: float) -> "Tensor4":
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor4(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def _topological(root: Tensor4) -> list[Tensor4]:
    order: list[Tensor4] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor4, bool]] = [(root, False)]
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


def _tracks(t: Tensor4) -> bool:
    return t.requires_grad or t._backward is not None


def _result(data: np.ndarray, parents: Sequence[Tensor4], backward) -> Tensor4:
    out = Tensor4(data)
    if _grad_enabled and any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False) -> Tensor4:
    return Tensor4(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor4:
    return Tensor4(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def _same_shape(a: Tensor4, b: Tensor4, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _same_shape(a, b, "add")

    def backward(g):
        if _tracks(a):
            a._accumulate(g)
        if _tracks(b):
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _same_shape(a, b, "sub")

    def backward(g):
        if _tracks(a):
            a._accumulate(g)
        if _tracks(b):
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), backward)


def scale(x: Tensor4, c: float) -> Tensor4:
    c = float(c)

    def backward(g):
        x._accumulate(c * g)

    return _result(c * x.data, (x,), backward)


def square(x: Tensor4) -> Tensor4:
    def backward(g):
        x._accumulate(2.0 * x.data * g)

    return _result(x.data * x.data, (x,), backward)


def absolute(x: Tensor4) -> Tensor4:
    def backward(g):
        x._accumulate(np.sign(x.data) * g)

    return _result(np.abs(x.data), (x,), backward)


def sum_all(x: Tensor4) -> Tensor4:
    """Sum of every element, as a ``[1,1,1,1]`` tensor."""

    def backward(g):
        x._accumulate(np.broadcast_to(g.reshape(()), x.shape))

    return _result(np.sum(x.data).reshape(1, 1, 1, 1), (x,), backward)


def leaky_relu(x: Tensor4, slope: float = 0.1) -> Tensor4:
    if not 0.0 <= slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    pos = x.data > 0

    def backward(g):
        # subgradient at 0 taken from the slope branch
        x._accumulate(np.where(pos, g, slope * g))

    return _result(np.where(pos, x.data, slope * x.data), (x,), backward)


def sigmoid(x: Tensor4) -> Tensor4:
    # split by sign so large |v| never overflows exp
    v = x.data
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return _result(s, (x,), backward)


def concat_channels(*xs: Tensor4) -> Tensor4:
    if len(xs) < 2:
        raise ShapeError("concat_channels needs at least two tensors")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: batch/spatial extents {t.shape} do not match {xs[0].shape}"
            )
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if _tracks(t):
                t._accumulate(g[:, lo:hi])

    return _result(np.concatenate([t.data for t in xs], axis=1), xs, backward)


def slice_channels(x: Tensor4, start: int, stop: int) -> Tensor4:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel range [{start}, {stop}) invalid for {x.shape[1]} channels")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


def resize_half(x: Tensor4) -> Tensor4:
    """2x2 average pooling."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"resize_half needs even extents, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        x._accumulate(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _result(out, (x,), backward)


def _upsample_taps(size: int):
    # align-corners-false: output i samples source (i + 0.5) / 2 - 0.5
    src = (np.arange(2 * size) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    return lo, hi, frac


def _upsample_matrix(size: int) -> np.ndarray:
    lo, hi, frac = _upsample_taps(size)
    m = np.zeros((2 * size, size), dtype=DTYPE)
    rows = np.arange(2 * size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_double(x: Tensor4) -> Tensor4:
    """Bilinear x2 upsampling, align-corners-false, edge-clamped."""
    _, _, h, w = x.shape
    my = _upsample_matrix(h)
    mx = _upsample_matrix(w)
    out = np.einsum("ih,nchw,jw->ncij", my, x.data, mx, optimize=True)

    def backward(g):
        x._accumulate(np.einsum("ih,ncij,jw->nchw", my, g, mx, optimize=True))

    return _result(out, (x,), backward)


def gram(x: Tensor4) -> Tensor4:
    """Per-sample channel Gram matrix, ``[n, 1, c, c]``."""
    n, c, h, w = x.shape
    f = x.data.reshape(n, c, h * w)
    out = np.matmul(f, f.transpose(0, 2, 1))[:, None]

    def backward(g):
        gs = g[:, 0]
        gf = np.matmul(gs + gs.transpose(0, 2, 1), f)
        x._accumulate(gf.reshape(n, c, h, w))

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Weights ``[c_out, c_in, k_h, k_w]`` and bias stored as ``[1, c_out, 1, 1]``."""

    weight: Tensor4
    bias: Tensor4
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")
        if self.bias.shape != (1, self.weight.shape[0], 1, 1):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @classmethod
    def same(cls, weight, bias=None) -> "ConvParams":
        """Stride 1 with padding that preserves spatial extents (odd kernels)."""
        w = weight if isinstance(weight, Tensor4) else Tensor4(weight)
        kh, kw = w.shape[2], w.shape[3]
        if kh % 2 == 0 or kw % 2 == 0 or kh != kw:
            raise ConfigError(f"'same' padding needs a square odd kernel, got {kh}x{kw}")
        if bias is None:
            bias = np.zeros((1, w.shape[0], 1, 1))
        b = bias if isinstance(bias, Tensor4) else Tensor4(np.reshape(bias, (1, -1, 1, 1)))
        return cls(w, b, stride=1, padding=(kh - 1) // 2)


def conv_output_extent(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"extent {size} with kernel {k}, stride {stride}, padding {padding} "
            f"gives a non-integral or empty output"
        )
    return span // stride + 1


def conv2d(x: Tensor4, p: ConvParams) -> Tensor4:
    """Cross-correlation with bias (no kernel flip)."""
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {p.c_in}")
    kh, kw = p.kernel
    s, pad = p.stride, p.padding
    ho = conv_output_extent(h, kh, s, pad)
    wo = conv_output_extent(w, kw, s, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    taps = [(a, b) for a in range(kh) for b in range(kw)]

    def window(arr, a, b):
        return arr[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s]

    # im2col laid out [n, c, kh, kw, ho, wo] so the reshape below is free
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=DTYPE)
    for a, b in taps:
        cols[:, :, a, b] = window(xp, a, b)
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = p.weight.data.reshape(p.c_out, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, p.c_out, ho, wo) + p.bias.data

    weight, bias = p.weight, p.bias

    def backward(g):
        gm = g.reshape(n, p.c_out, ho * wo)
        if _tracks(weight):
            gw = np.zeros_like(wmat)
            for i in range(n):
                gw += gm[i] @ cols[i].T
            weight._accumulate(gw.reshape(weight.shape))
        if _tracks(bias):
            bias._accumulate(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        if _tracks(x):
            dcols = np.matmul(wmat.T, gm).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for a, b in taps:
                window(dxp, a, b)[...] += dcols[:, :, a, b]
            x._accumulate(dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    return _result(np.ascontiguousarray(out), (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# parameters and optimisation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Insertion-ordered mapping of unique names to learnable tensors."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor4] = OrderedDict()
        self.state: dict[str, AdamState] = {}

    def add(self, name: str, t: Tensor4) -> Tensor4:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        self.state[name] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor4:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


class ParamBuilder:
    """Creates seeded, named conv parameters inside a :class:`ParamStore`.

    Weights are drawn from a He-style uniform fan-in distribution,
    ``U(-sqrt(6 / fan_in), sqrt(6 / fan_in))``; biases start at zero.
    ``zero=True`` gives an all-zero layer (weights and bias).
    """

    def __init__(self, store: ParamStore, seed: int = 0):
        self.store = store
        self.rng = np.random.default_rng(seed)

    def conv(self, name: str, c_in: int, c_out: int, k: int = 3, zero: bool = False) -> ConvParams:
        shape = (c_out, c_in, k, k)
        if zero:
            w = np.zeros(shape, dtype=DTYPE)
        else:
            bound = np.sqrt(6.0 / (c_in * k * k))
            w = self.rng.uniform(-bound, bound, size=shape)
        weight = self.store.add(f"{name}.weight", Tensor4(w))
        bias = self.store.add(f"{name}.bias", Tensor4(np.zeros((1, c_out, 1, 1))))
        return ConvParams(weight, bias, stride=1, padding=(k - 1) // 2)


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over ``store`` in name order; clears grads."""
    for name, t in store.items():
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    for name, t in store.items():
        st = store.state[name]
        g = t.grad
        st.step += 1
        st.m *= beta1
        st.m += (1.0 - beta1) * g
        st.v *= beta2
        st.v += (1.0 - beta2) * (g * g)
        mhat = st.m / (1.0 - beta1 ** st.step)
        vhat = st.v / (1.0 - beta2 ** st.step)
        t.data -= lr * mhat / (np.sqrt(vhat) + eps)
        t.grad = None


def grad_check(
    f: Callable[[ParamStore], Tensor4],
    point: ParamStore,
    h: float = 1e-4,
    samples: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps the store to a scalar tensor. With ``samples`` set, only that
    many seeded random entries per parameter are perturbed.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    point.zero_grad()
    f(point).backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in point.items()}
    point.zero_grad()
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    with no_grad():
        for name, t in point.items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if samples is not None and samples < flat.size:
                idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
            an = analytic[name].reshape(-1)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = f(point).item()
                flat[i] = orig - h
                fm = f(point).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(f"non-finite objective perturbing {name}[{i}]")
                num = (fp - fm) / (2.0 * h)
                denom = max(abs(num), abs(an[i]), 1e-8)
                worst = max(worst, abs(num - an[i]) / denom)
            report[name] = float(worst)
    return report
