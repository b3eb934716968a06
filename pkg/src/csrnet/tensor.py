"""Dense NCHW tensors with define-by-run reverse-mode differentiation.

Every op is a plain function over :class:`Tensor` values.  When a :class:`Tape`
is active (``with Tape() as tape:``) and at least one operand is tracked, the
op appends a node holding a closure that maps the output gradient to operand
gradients.  :func:`backward` walks that list in reverse.

Values are float32 by default; :func:`verification_mode` switches newly
created tensors to float64 for finite-difference checks.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ConvWeights",
    "Tape",
    "ShapeError",
    "verification_mode",
    "default_dtype",
    "record",
    "conv2d",
    "conv2d_transpose",
    "transpose_padding",
    "relu",
    "add",
    "mul",
    "scale",
    "concat_channels",
    "slice_channels",
    "sum_all",
    "backward",
    "grad_check",
    "register_gradcheck",
    "gradcheck_ops",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's precondition."""


_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def verification_mode():
    """Create float64 tensors inside the block (gradient-check numerics)."""
    prev = default_dtype()
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """Immutable array value plus an optional gradient buffer.

    ``requires_grad`` marks a leaf (a parameter or an input under test);
    ``backward`` fills ``grad`` for such leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tracked", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = default_dtype()
        arr = np.array(data, dtype=dtype, order="K", copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tracked = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # op outputs are fresh buffers (any memory layout); adopt without copying
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._tracked = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor._wrap(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass(frozen=True)
class ConvWeights:
    """Kernel laid out (out_channels, in_channels, kH, kW) and a bias per output channel."""

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        k = self.kernel.shape
        if len(k) != 4:
            raise ShapeError(f"kernel must be 4-D (out, in, kH, kW), got shape {k}")
        if k[2] < 1 or k[3] < 1:
            raise ShapeError(f"kernel spatial extents must be >= 1, got {k[2]}x{k[3]}")
        if self.bias.shape != (k[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_channels {k[0]}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]


class _Node:
    __slots__ = ("op", "output", "inputs", "backward_fn")

    def __init__(self, op, output, inputs, backward_fn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of op nodes; operands always precede their consumers.

    A tape belongs to one thread.  Entering it makes it the active tape for
    that thread until exit.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(
    op: str,
    output: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``output`` as a Tensor, appending a tape node when gradients can flow.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per entry of ``inputs``.
    """
    out = Tensor._wrap(output)
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.nodes.append(_Node(op, out, tuple(inputs), backward_fn))
    return out


def _require_4d(name: str, t: Tensor):
    if t.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {t.shape}")


def _nhwc(a: np.ndarray) -> np.ndarray:
    """Channels-last view of an NCHW array; free when the storage is already NHWC."""
    return a.transpose(0, 2, 3, 1)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: padded NHWC input -> (N*ho*wo, kh*kw*C) patch matrix
    n, c = xp.shape[0], xp.shape[3]
    if kh == kw == 1 and stride == 1:
        return np.ascontiguousarray(xp).reshape(n * ho * wo, c)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # cols: (N, ho, wo, kh, kw, C) -> scatter-add into an NHWC buffer of ``shape``, fixed (i, j) order
    if kh == kw == 1 and stride == 1:
        return cols.reshape(shape)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols[:, :, :, i, j, :]
    return out


def _pad_hw(xt: np.ndarray, p: int) -> np.ndarray:
    return np.pad(xt, ((0, 0), (p, p), (p, p), (0, 0))) if p else xt


def conv2d(x: Tensor, w: ConvWeights, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``w`` plus bias, zero padding."""
    _require_4d("conv2d input", x)
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.kernel.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, kernel expects {ci}")
    span_h, span_w = h + 2 * padding - kh, wd + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d output extent is not a positive integer: (H+2p-kH)/stride = {span_h}/{stride}, "
            f"(W+2p-kW)/stride = {span_w}/{stride}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = _pad_hw(_nhwc(x.data), padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    # (out, kh*kw*in), matching the patch-matrix column order
    kmat = w.kernel.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * ci)
    out = cols @ kmat.T
    out += w.bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        gmat = np.ascontiguousarray(_nhwc(g)).reshape(-1, o)
        dk = (gmat.T @ cols).reshape(o, kh, kw, ci).transpose(0, 3, 1, 2)
        db = gmat.sum(axis=0)
        dx = None
        if x._tracked:
            dcols = (gmat @ kmat).reshape(n, ho, wo, kh, kw, c)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            dx = dxp[:, padding : padding + h, padding : padding + wd, :].transpose(0, 3, 1, 2)
        return dx, dk, db

    return record("conv2d", out, (x, w.kernel, w.bias), back)


def transpose_padding(kernel_size: int, stride: int) -> int:
    """Padding that makes a transposed convolution scale extents by exactly ``stride``."""
    extra = kernel_size - stride
    if extra < 0 or extra % 2:
        raise ShapeError(
            f"transposed conv with kernel {kernel_size} and stride {stride} cannot produce exactly "
            f"{stride}x extents (kernel - stride must be even and >= 0)"
        )
    return extra // 2


def conv2d_transpose(x: Tensor, w: ConvWeights, stride: int = 2) -> Tensor:
    """Transposed convolution whose output extents are exactly ``stride`` times the input.

    ``w.kernel`` keeps the (out, in, kH, kW) layout used by :func:`conv2d`; each
    input pixel scatters ``x[c] * kernel[:, c]`` into the output.
    """
    _require_4d("conv2d_transpose input", x)
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.kernel.shape
    if c != ci:
        raise ShapeError(f"conv2d_transpose channel mismatch: input has {c} channels, kernel expects {ci}")
    if kh != kw:
        raise ShapeError(f"conv2d_transpose needs a square kernel, got {kh}x{kw}")
    pad = transpose_padding(kh, stride)

    xmat = np.ascontiguousarray(_nhwc(x.data)).reshape(-1, c)
    # (in, kh*kw*out)
    kmat = w.kernel.data.transpose(1, 2, 3, 0).reshape(ci, kh * kw * o)
    cols = (xmat @ kmat).reshape(n, h, wd, kh, kw, o)
    full_shape = (n, (h - 1) * stride + kh, (wd - 1) * stride + kw, o)
    full = _col2im(cols, full_shape, kh, kw, stride, h, wd)
    out = full[:, pad : pad + h * stride, pad : pad + wd * stride, :] + w.bias.data
    out = out.transpose(0, 3, 1, 2)

    def back(g):
        gp = _pad_hw(_nhwc(g), pad)
        gcols = _im2col(gp, kh, kw, stride, h, wd)
        dx = None
        if x._tracked:
            dx = (gcols @ kmat.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        dk = (xmat.T @ gcols).reshape(ci, kh, kw, o).transpose(3, 0, 1, 2)
        db = _nhwc(g).sum(axis=(0, 1, 2))
        return dx, dk, db

    return record("conv2d_transpose", out, (x, w.kernel, w.bias), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, x.dtype.type(0))
    return record("relu", out, (x,), lambda g: (g * mask,))


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _same_shape("mul", a, b)
    return record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return record("scale", x.data * f, (x,), lambda g: (g * f,))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving part order."""
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    for p in parts:
        _require_4d("concat_channels part", p)
    n, _, h, w = parts[0].shape
    for i, p in enumerate(parts[1:], start=1):
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels part {i} has (N,H,W)={p.shape[0], p.shape[2], p.shape[3]}, expected {(n, h, w)}"
            )
    out = np.concatenate([_nhwc(p.data) for p in parts], axis=3).transpose(0, 3, 1, 2)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    return record("concat_channels", out, tuple(parts), back)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d("slice_channels input", x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {x.shape[1]} channels")
    out = x.data[:, start:stop].copy()

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return record("slice_channels", out, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a 1x1x1x1 tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return record("sum_all", out, (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0], dtype=x.dtype),))


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Leaves in ``params`` that the loss does not reach get an all-zero gradient.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"loss must be a scalar of shape (1, 1, 1, 1), got {loss.shape}")
    if not tape.nodes or tape.nodes[-1].output is not loss:
        raise ValueError("loss must be the final node recorded on the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp._tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.requires_grad:
                leaves[key] = inp

    for key, leaf in leaves.items():
        leaf.grad = np.ascontiguousarray(grads[key], dtype=leaf.dtype)
    for p in params:
        if id(p) not in leaves:
            p.grad = np.zeros(p.shape, dtype=p.dtype)


# ---------------------------------------------------------------------------
# finite-difference gradient checks

_GRADCHECK: dict[str, Callable[[np.random.Generator], tuple[list[Tensor], Callable[[list[Tensor]], Tensor]]]] = {}


def register_gradcheck(name: str):
    """Register a builder ``rng -> (leaves, fn)`` where ``fn(leaves)`` returns a scalar Tensor."""

    def deco(builder):
        _GRADCHECK[name] = builder
        return builder

    return deco


def gradcheck_ops() -> list[str]:
    return sorted(_GRADCHECK)


def _project(out: Tensor, seed: int) -> Tensor:
    # random linear functional so every output element carries a distinct weight
    r = Tensor(np.random.default_rng(seed).uniform(-1.0, 1.0, size=out.shape), dtype=out.dtype)
    return sum_all(mul(out, r))


def _params(*shapes, rng, low=-1.0, high=1.0):
    return [Tensor(rng.uniform(low, high, size=s), requires_grad=True) for s in shapes]


@register_gradcheck("conv2d")
def _gc_conv2d(rng):
    x, k, b = _params((1, 2, 5, 5), (3, 2, 3, 3), (3,), rng=rng)
    r = int(rng.integers(2**31))
    return [x, k, b], lambda t: _project(conv2d(t[0], ConvWeights(t[1], t[2]), stride=2, padding=1), r)


@register_gradcheck("conv2d_transpose")
def _gc_conv2d_transpose(rng):
    x, k, b = _params((1, 2, 3, 3), (3, 2, 4, 4), (3,), rng=rng)
    r = int(rng.integers(2**31))
    return [x, k, b], lambda t: _project(conv2d_transpose(t[0], ConvWeights(t[1], t[2]), stride=2), r)


@register_gradcheck("relu")
def _gc_relu(rng):
    mag = rng.uniform(0.1, 1.0, size=(2, 3, 4, 4))
    sign = rng.choice([-1.0, 1.0], size=mag.shape)
    x = Tensor(mag * sign, requires_grad=True)
    r = int(rng.integers(2**31))
    return [x], lambda t: _project(relu(t[0]), r)


@register_gradcheck("add")
def _gc_add(rng):
    a, b = _params((1, 2, 4, 4), (1, 2, 4, 4), rng=rng)
    r = int(rng.integers(2**31))
    return [a, b], lambda t: _project(add(t[0], t[1]), r)


@register_gradcheck("mul")
def _gc_mul(rng):
    a, b = _params((1, 2, 4, 4), (1, 2, 4, 4), rng=rng)
    return [a, b], lambda t: sum_all(mul(t[0], t[1]))


@register_gradcheck("scale")
def _gc_scale(rng):
    (x,) = _params((1, 2, 3, 3), rng=rng)
    r = int(rng.integers(2**31))
    return [x], lambda t: _project(scale(t[0], 2.5), r)


@register_gradcheck("concat_channels")
def _gc_concat(rng):
    a, b = _params((1, 2, 3, 3), (1, 3, 3, 3), rng=rng)
    r = int(rng.integers(2**31))
    return [a, b], lambda t: _project(concat_channels([t[0], t[1]]), r)


@register_gradcheck("slice_channels")
def _gc_slice(rng):
    (x,) = _params((1, 5, 3, 3), rng=rng)
    r = int(rng.integers(2**31))
    return [x], lambda t: _project(slice_channels(t[0], 1, 4), r)


@register_gradcheck("sum_all")
def _gc_sum(rng):
    (x,) = _params((1, 2, 3, 3), rng=rng)
    return [x], lambda t: sum_all(t[0])


def grad_check(op_name: str, seed: int = 0, h: float = 1e-3, corrupt: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64.  ``corrupt`` perturbs the analytic gradient so callers can
    confirm the detector fires.
    """
    if op_name not in _GRADCHECK:
        raise KeyError(f"unknown gradcheck op {op_name!r}; registered: {', '.join(gradcheck_ops())}")
    with verification_mode():
        leaves, fn = _GRADCHECK[op_name](np.random.default_rng(seed))
        return finite_difference_error(leaves, fn, h=h, corrupt=corrupt)


def finite_difference_error(
    leaves: list[Tensor],
    fn: Callable[[list[Tensor]], Tensor],
    h: float = 1e-3,
    corrupt: bool = False,
    indices: dict[int, np.ndarray] | None = None,
) -> float:
    """Compare backward() against central differences of ``fn`` over ``leaves``.

    ``indices`` restricts probing to the listed flat positions per leaf index
    (leaves absent from it are skipped); by default every element is probed.
    """
    with Tape() as tape:
        loss = fn(leaves)
    backward(tape, loss, leaves)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        if indices is not None and i not in indices:
            continue
        analytic = leaf.grad.reshape(-1).copy()
        if corrupt:
            analytic = analytic * 1.01 + 1e-3
        base = leaf.data.reshape(-1)
        positions = indices[i] if indices is not None else range(base.size)
        for pos in positions:
            vals = []
            for step in (h, -h):
                probe = base.copy()
                probe[pos] += step
                trial = list(leaves)
                trial[i] = Tensor(probe.reshape(leaf.shape), dtype=leaf.dtype)
                vals.append(fn(trial).item())
            fd = (vals[0] - vals[1]) / (2 * h)
            a = analytic[pos]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
