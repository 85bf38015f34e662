"""Dense tensors with a small reverse-mode tape.

Only the primitives the restoration networks need are provided. Every
primitive is a pure function of its inputs; when a :class:`Tape` is active
and at least one input is tracked, the primitive appends a node to the tape
holding a closure that maps the upstream gradient to input gradients.

Complex spectra (``dft2d``) follow the packed convention: the gradient of a
complex value ``z`` is stored as ``dL/dRe(z) + 1j * dL/dIm(z)``.
"""

from __future__ import annotations

import threading
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

HIGH = np.float64
STANDARD = np.float32

_state = threading.local()


class ConfigurationError(ValueError):
    """Shapes or layer settings that cannot be combined."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.name = name

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def precision(self) -> str:
        return "high" if self.data.dtype in (np.float64, np.complex128) else "standard"

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = " tracked" if self.tracked else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{tag})"

    # operator sugar, thin wrappers over the primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("seq", "out", "parents", "trainable", "backward_fn", "grad")

    def __init__(self, seq, out, parents, backward_fn):
        self.seq = seq
        self.out = out
        self.parents = parents
        # leaf trainability is fixed when the op runs, so freezing is scoped to the forward pass
        self.trainable = tuple(p.requires_grad for p in parents)
        self.backward_fn = backward_fn
        self.grad = None


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the block are
    recorded in execution order. A tape is single-owner and consumed by
    :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> None:
        node = _Node(len(self.nodes), out, parents, backward_fn)
        out.node = node
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.out.node = None
        self.nodes = []

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
        return backward(self, loss, params)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.tracked for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Propagate d(loss) through ``tape`` in strict reverse execution order.

    Leaf tensors with ``requires_grad`` receive their gradient in ``.grad``
    (zeros when not on the path to ``loss``). Returns the gradients of
    ``params`` in the given order. The tape is reset afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got dims {loss.dims}")
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}

    on_tape = loss.node is not None and loss.node.seq < len(tape.nodes) and tape.nodes[loss.node.seq] is loss.node
    if on_tape:
        loss.node.grad = np.ones_like(loss.data)
        for node in reversed(tape.nodes[: loss.node.seq + 1]):
            g = node.grad
            if g is None:
                continue
            node.grad = None
            in_grads = node.backward_fn(g)
            for parent, trainable, pg in zip(node.parents, node.trainable, in_grads):
                if pg is None:
                    continue
                if parent.node is not None:
                    if parent.node.grad is None:
                        parent.node.grad = pg
                    else:
                        parent.node.grad = parent.node.grad + pg
                elif trainable:
                    key = id(parent)
                    leaves[key] = parent
                    leaf_grads[key] = pg if key not in leaf_grads else leaf_grads[key] + pg
    elif loss.requires_grad:
        leaves[id(loss)] = loss
        leaf_grads[id(loss)] = np.ones_like(loss.data)

    for key, leaf in leaves.items():
        leaf.grad = np.asarray(leaf_grads[key], dtype=leaf.data.dtype).reshape(leaf.dims)
    out = []
    for p in params:
        g = leaf_grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
            if p.requires_grad:
                p.grad = g
        else:
            g = p.grad
        out.append(g)
    tape.reset()
    return out


# -- elementwise ----------------------------------------------------------


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _const(b, a)
    if a.dims != b.dims and b.data.size != 1 and a.data.size != 1:
        raise ConfigurationError(f"add: dims {a.dims} vs {b.dims}")
    sa, sb = a.dims, b.dims

    def bw(g):
        return (_reduce_to(g, sa), _reduce_to(g, sb))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _const(a, b) if not isinstance(a, Tensor) else a
    b = _const(b, a)
    if a.dims != b.dims and b.data.size != 1 and a.data.size != 1:
        raise ConfigurationError(f"sub: dims {a.dims} vs {b.dims}")
    sa, sb = a.dims, b.dims

    def bw(g):
        return (_reduce_to(g, sa), _reduce_to(-g, sb))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _const(b, a)
    if a.dims != b.dims and b.data.size != 1 and a.data.size != 1:
        raise ConfigurationError(f"mul: dims {a.dims} vs {b.dims}")
    ad, bd = a.data, b.data

    def bw(g):
        return (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape))

    return _make(ad * bd, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def elementwise_pow(x: Tensor, q: int) -> Tensor:
    if int(q) != q or q < 1:
        raise ConfigurationError(f"power must be a positive integer, got {q}")
    q = int(q)
    xd = x.data
    if q == 1:
        return _make(xd.copy(), (x,), lambda g: (g,))

    def bw(g):
        return (g * (q * xd ** (q - 1)),)

    return _make(xd**q, (x,), bw)


def tanh_apply(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1 - y * y),)

    return _make(y, (x,), bw)


def abs_apply(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def log10_apply(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log10(xd), (x,), lambda g: (g / (xd * np.log(10.0)),))


def log_apply(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    xd = x.data
    y = np.clip(xd, lo, hi)
    inside = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        inside &= xd >= lo
    if hi is not None:
        inside &= xd <= hi
    return _make(y, (x,), lambda g: (np.where(inside, g, 0),))


# -- reductions and reshapes -----------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.dims
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.dims, x.data.size
    return _make(
        np.asarray(x.data.sum() / n), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    shape = x.dims
    return _make(x.data.reshape(dims), (x,), lambda g: (g.reshape(shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (-1,))


def index(x: Tensor, i: int) -> Tensor:
    """Select ``x[i]`` along the leading axis."""
    shape = x.dims

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return _make(x.data[i], (x,), bw)


def stack(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    return _make(np.stack([t.data for t in xs]), xs, lambda g: tuple(g[i] for i in range(len(xs))))


# -- linear maps -------------------------------------------------------------


def matvec(w: Tensor, x: Tensor) -> Tensor:
    if w.data.ndim != 2 or x.data.ndim != 1 or w.dims[1] != x.dims[0]:
        raise ConfigurationError(f"matvec: weight {w.dims} vs input {x.dims}")
    wd, xd = w.data, x.data

    def bw(g):
        return (np.outer(g, xd), wd.T @ g)

    return _make(wd @ xd, (w, x), bw)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[c, ...] + b[c]`` for a channel-first map."""
    if b.data.ndim != 1 or b.dims[0] != x.dims[0]:
        raise ConfigurationError(f"bias {b.dims} does not match channels of {x.dims}")
    extra = (1,) * (x.data.ndim - 1)
    axes = tuple(range(1, x.data.ndim))

    def bw(g):
        return (g, g.sum(axis=axes))

    return _make(x.data + b.data.reshape((-1,) + extra), (x, b), bw)


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, ``[C_in,H,W] * [C_out,C_in,kh,kw]``."""
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects [C,H,W] and [O,C,kh,kw], got {x.dims}, {k.dims}")
    c, h, w = x.dims
    co, ci, kh, kw = k.dims
    if ci != c:
        raise ConfigurationError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d: bad stride {stride} / pad {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ConfigurationError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h}x{w} (pad {pad})")
    ho, wo = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp, kh, kw, stride, ho, wo)  # [C, ho, wo, kh, kw]
    # [ho*wo, C*kh*kw] patch matrix, contiguous so the reduction order is fixed
    patches = np.ascontiguousarray(cols.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * kh * kw)
    kmat = k.data.reshape(co, c * kh * kw)
    y = (kmat @ patches.T).reshape(co, ho, wo)

    def bw(g):
        g2 = g.reshape(co, ho * wo)
        dk = (g2 @ patches).reshape(k.dims)
        dcols = (kmat.T @ g2).reshape(c, kh, kw, ho, wo)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, i, j]
        dx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
        return (dx, dk)

    return _make(y, (x, k), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    c, h, w = x.dims
    y = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _make(y, (x,), bw)


# -- spectra ---------------------------------------------------------------


@lru_cache(maxsize=32)
def _dft_matrix(n: int, dtype=np.complex128) -> np.ndarray:
    jk = np.outer(np.arange(n), np.arange(n)) % n
    m = np.exp(-2j * np.pi * jk / n).astype(dtype)
    m.setflags(write=False)
    return m


def dft2d(x: Tensor) -> Tensor:
    """Unnormalized 2-D DFT over the last two axes (matrix form)."""
    if x.data.ndim < 2:
        raise ConfigurationError(f"dft2d needs at least 2 dims, got {x.dims}")
    h, w = x.dims[-2:]
    ctype = np.complex64 if x.data.dtype in (np.float32, np.complex64) else np.complex128
    fh, fw = _dft_matrix(h, ctype), _dft_matrix(w, ctype)
    y = fh @ x.data @ fw
    real_in = not np.iscomplexobj(x.data)

    def bw(g):
        # adjoint of the DFT is its conjugate (the matrices are symmetric)
        gx = fh.conj() @ g @ fw.conj()
        return (gx.real if real_in else gx,)

    return _make(y, (x,), bw)


def abs2(z: Tensor) -> Tensor:
    """``|z|**2`` for complex input, real output."""
    zd = z.data
    return _make((zd.real**2 + zd.imag**2), (z,), lambda g: (2 * g * zd,))


# -- finite differences ----------------------------------------------------

FD_FLOOR = 1e-8


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float | None = None,
                 indices: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; step defaults to 1e-5*max(1,|x_i|)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        h = eps if eps is not None else 1e-5 * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"function not finite at perturbation of element {i}")
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def relative_error(analytic: np.ndarray, fd: np.ndarray, floor: float = FD_FLOOR) -> float:
    """Largest deviation from the finite-difference gradient, relative to its largest entry.

    Normalizing by the tensor-wide magnitude keeps near-zero entries, whose
    central differences are pure cancellation noise, from dominating.
    """
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    fd = np.asarray(fd, dtype=np.float64).reshape(-1)
    mask = ~np.isnan(fd)
    if not mask.any():
        return 0.0
    scale = max(float(np.abs(fd[mask]).max()), floor)
    return float(np.abs(analytic[mask] - fd[mask]).max() / scale)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float | None = None,
                      indices: Iterable[int] | None = None) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` maps a tracked tensor to a scalar tensor. ``eps`` fixes the step;
    by default it scales as 1e-5*max(1,|x_i|).
    """
    if eps is not None and eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    (analytic,) = tape.backward(out, [leaf])

    def scalar(arr):
        return float(f(Tensor(arr)).data)

    fd = numeric_grad(scalar, x0, eps, indices)
    return relative_error(analytic, fd)
