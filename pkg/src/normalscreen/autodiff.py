"""Small dense tensor engine with reverse-mode automatic differentiation.

Every value is a :class:`Tensor` wrapping a numpy array. Operations build a
graph of tensors; :func:`backward` walks it in reverse topological order and
accumulates gradients into ``Tensor.grad``. Gradients accumulate across calls
until :meth:`Tensor.zero_grad` is called, the same as most autograd engines.

Only the layers the screening network needs are provided: convolution with
dilation, channel concatenation, elementwise add/mul, ReLU, sigmoid, dense,
global average pooling, spatial and standard dropout, Gaussian noise and
binary cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

TRAIN = "train"
EVAL = "eval"
BCE_EPS = 1e-7

_MODES = (TRAIN, EVAL)


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf is found where finite values are required."""


@dataclass
class RngState:
    """Seeded random stream.

    The generator is numpy's PCG64 bit generator wrapped by
    ``numpy.random.Generator``; the same seed and the same call sequence
    always produce the same values.
    """

    seed: int
    algorithm: str = "PCG64"
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.algorithm != "PCG64":
            raise ValueError(f"unsupported generator {self.algorithm!r}")
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    @classmethod
    def derive(cls, seed: int, *keys: int) -> "RngState":
        """Independent stream for ``(seed, *keys)``, e.g. per epoch or sample."""
        state = cls(seed)
        ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *keys])
        state.generator = np.random.Generator(np.random.PCG64(ss))
        return state


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "parents", "op", "requires_grad", "_backward", "name")

    def __init__(self, data, parents: Sequence["Tensor"] = (), op: str = "",
                 requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        """Gradient, or zeros if nothing has flowed into this tensor."""
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape)

    def check_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{what} {self.name or self.op or ''} contains non-finite values")

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, parents, op)
    if out.requires_grad:
        out._backward = backward
    return out


def _check_mode(mode: str):
    if mode not in _MODES:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape {a.shape} != {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _node(a.data + b.data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape {a.shape} != {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), "mul", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x.accumulate(g * mask)

    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu", backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)

    def backward(g):
        x.accumulate(g * out * (1 - out))

    return _node(out, (x,), "sigmoid", backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        x.accumulate(g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), "reshape", backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x.accumulate(np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", backward)


# ---------------------------------------------------------------- layers

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"dense: expected x[N,D], w[D,K], b[K]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input features D={x.shape[1]} but weight rows={w.shape[0]}")
    if w.shape[1] != b.shape[0]:
        raise ShapeError(f"dense: weight columns K={w.shape[1]} but bias length={b.shape[0]}")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ w.data.T)
        if w.requires_grad:
            w.accumulate(x.data.T @ g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))

    return _node(x.data @ w.data + b.data, (x, w, b), "dense", backward)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``x * scale[c] + shift[c]`` on [N,C,H,W]."""
    if x.data.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"channel_affine: x {x.shape}, scale {scale.shape}, shift {shift.shape}")
    sc = scale.data[None, :, None, None]

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * sc)
        if scale.requires_grad:
            scale.accumulate((g * x.data).sum(axis=(0, 2, 3)))
        if shift.requires_grad:
            shift.accumulate(g.sum(axis=(0, 2, 3)))

    return _node(x.data * sc + shift.data[None, :, None, None], (x, scale, shift),
                 "channel_affine", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        x.accumulate(np.broadcast_to((g / (h * w))[:, :, None, None], x.shape))

    return _node(x.data.mean(axis=(2, 3)), (x,), "gap", backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: expected 4-D inputs, got {a.shape} and {b.shape}")
    for axis, dim in ((0, "N"), (2, "H"), (3, "W")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(f"concat_channels: {dim} mismatch {a.shape[axis]} vs {b.shape[axis]}")
    ca = a.shape[1]

    def backward(g):
        if a.requires_grad:
            a.accumulate(g[:, :ca])
        if b.requires_grad:
            b.accumulate(g[:, ca:])

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), "concat", backward)


def same_padding(size: int, k: int, stride: int, dilation: int) -> tuple[int, int]:
    """Zero padding (low, high) for 'same' output size ceil(size/stride).

    Odd totals put the extra pixel on the high side.
    """
    out = -(-size // stride)
    extent = (k - 1) * dilation + 1
    total = max((out - 1) * stride + extent - size, 0)
    return total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            ho: int, wo: int) -> np.ndarray:
    """Patch matrix ``[N*ho*wo, kh*kw*C]`` of a padded input, channels fastest."""
    n, c = xp.shape[:2]
    nhwc = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    sn, sh, sw, sc = nhwc.strides
    view = np.lib.stride_tricks.as_strided(
        nhwc,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh * dilation, sw * dilation, sc),
        writeable=False,
    )
    return view.reshape(n * ho * wo, kh * kw * c)


def _kernel_matrix(k: np.ndarray) -> np.ndarray:
    """[F,C,kh,kw] -> [F, kh*kw*C] matching :func:`_im2col` column order."""
    return k.transpose(0, 2, 3, 1).reshape(k.shape[0], -1)


def _correlate(xp: np.ndarray, kmat: np.ndarray, kh: int, kw: int, stride: int,
               dilation: int) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Valid cross-correlation of padded ``xp`` with ``kmat`` [F, kh*kw*C].

    Returns the output ``[N,F,ho,wo]`` and the patch matrix used.
    """
    n = xp.shape[0]
    ho = (xp.shape[2] - ((kh - 1) * dilation + 1)) // stride + 1
    wo = (xp.shape[3] - ((kw - 1) * dilation + 1)) // stride + 1
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    out = (cols @ kmat.T).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return out, cols, ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, dilation: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation with dilated taps.

    x is [N,C,H,W], kernel is [F,C,kH,kW], bias is [F]. ``padding`` is
    ``"same"`` (output ceil(H/stride)) or ``"valid"``.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [F,C,kH,kW], got {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input channels C={c} but kernel expects C={kc}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match F={f}")
    if kh < 1 or kw < 1 or stride < 1 or dilation < 1:
        raise ShapeError("conv2d: kernel size, stride and dilation must be >= 1")

    if padding == "same":
        ph = same_padding(h, kh, stride, dilation)
        pw = same_padding(w, kw, stride, dilation)
    elif padding == "valid":
        ph = pw = (0, 0)
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = h + sum(ph), w + sum(pw)
    ext_h, ext_w = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    if ext_h > hp or ext_w > wp:
        raise ShapeError(
            f"conv2d: effective kernel extent {ext_h}x{ext_w} exceeds padded input {hp}x{wp}")

    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw)) if (sum(ph) or sum(pw)) else x.data
    kmat = _kernel_matrix(kernel.data)
    out, cols, ho, wo = _correlate(xp, kmat, kh, kw, stride, dilation)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        g = g.astype(x.dtype, copy=False)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        if kernel.requires_grad:
            kernel.accumulate((gmat.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2))
        if x.requires_grad:
            # input gradient = full correlation of the stride-dilated output
            # gradient with the flipped, channel-swapped kernel
            up_h, up_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            gup = np.zeros((n, f, up_h + 2 * (ext_h - 1), up_w + 2 * (ext_w - 1)), dtype=x.dtype)
            gup[:, :, ext_h - 1:ext_h - 1 + up_h:stride, ext_w - 1:ext_w - 1 + up_w:stride] = g
            kflip = _kernel_matrix(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _, rh, rw = _correlate(gup, kflip, kh, kw, 1, dilation)
            gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
            gxp[:, :, :rh, :rw] = gx
            x.accumulate(gxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w])

    return _node(out.astype(x.dtype, copy=False), (x, kernel, bias), "conv2d", backward)


def spatial_dropout(x: Tensor, rate: float, mode: str, rng: RngState | None) -> Tensor:
    """Zero whole channels with probability ``rate``; survivors scaled by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    _check_mode(mode)
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_dropout: expected [N,C,H,W], got {x.shape}")
    if mode == EVAL or rate == 0:
        return x
    keep = rng.generator.random((x.shape[0], x.shape[1], 1, 1)) >= rate
    scale = (keep / (1 - rate)).astype(x.dtype)
    return _masked(x, scale, "spatial_dropout")


def dropout(x: Tensor, rate: float, mode: str, rng: RngState | None) -> Tensor:
    """Standard inverted dropout on individual elements."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    _check_mode(mode)
    if mode == EVAL or rate == 0:
        return x
    keep = rng.generator.random(x.shape) >= rate
    return _masked(x, (keep / (1 - rate)).astype(x.dtype), "dropout")


def _masked(x: Tensor, scale: np.ndarray, op: str) -> Tensor:
    def backward(g):
        x.accumulate(g * scale)

    return _node(x.data * scale, (x,), op, backward)


def gaussian_noise(x: Tensor, sigma: float, mode: str, rng: RngState | None) -> Tensor:
    """Add N(0, sigma^2) noise in train mode; the gradient passes straight through."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    _check_mode(mode)
    if mode == EVAL or sigma == 0:
        return x
    noise = rng.generator.standard_normal(x.shape).astype(x.dtype) * x.dtype.type(sigma)

    def backward(g):
        x.accumulate(g)

    return _node(x.data + noise, (x,), "gaussian_noise", backward)


def bce_loss(p: Tensor, y, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy with probabilities clipped to [eps, 1-eps]."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: predictions {p.shape} vs labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss: labels must be 0 or 1")
    y = y.astype(p.dtype)
    lo, hi = p.dtype.type(eps), p.dtype.type(1 - eps)
    pc = np.clip(p.data, lo, hi)
    inside = (p.data >= lo) & (p.data <= hi)
    n = p.data.size
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))

    def backward(g):
        dp = (-(y / pc) + (1 - y) / (1 - pc)) / n
        p.accumulate(g * dp * inside)

    return _node(np.asarray(loss, dtype=p.dtype), (p,), "bce", backward)


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Gradients are added into ``.grad`` of every tensor that requires them, so
    repeated calls accumulate. Intermediate gradients are released once used.
    Returns ``{id(tensor): grad}`` for the leaves reached.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {loss.shape}")
    order = _topological(loss)
    loss.accumulate(np.ones(loss.shape, dtype=loss.dtype))
    leaves = {}
    for node in reversed(order):
        if node._backward is not None:
            if node.grad is not None:
                node._backward(node.grad)
            node.grad = None if node is not loss else node.grad
        elif node.requires_grad and node.grad is not None:
            leaves[id(node)] = node.grad
    return leaves


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to array ``x`` (in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-12)
    return float(np.abs(a - b).max(initial=0) / denom)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()
