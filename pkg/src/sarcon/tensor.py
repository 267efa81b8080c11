"""Dense tensors and a reverse-mode differentiation tape.

A :class:`Tensor` wraps a row-major numpy array (float64 by default).
Operations executed while a :class:`Tape` is active append one record per
operation; ``backward`` replays the records in reverse execution order and
accumulates gradients into every tensor that can influence the loss.

Tensors without an active tape are plain immutable values and are safe to
share across threads.  A tape and the tensors it records form a
single-threaded unit of work; concurrent runs must use disjoint tapes.

Backward rules must hand freshly owned arrays to ``_accumulate`` (slices of
cached buffers are copied at the call site) so later in-place accumulation
cannot corrupt another tensor's gradient.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericFaultError

DEFAULT_DTYPE = np.float64


def _check_finite(arr: np.ndarray, op: str) -> None:
    # One reduction instead of a full isfinite pass; a non-finite element or
    # an overflowing magnitude both poison the sum.
    if arr.size and not np.isfinite(arr.sum(dtype=np.float64)):
        if not np.all(np.isfinite(arr)):
            raise NumericFaultError(f"{op} produced non-finite values")
        raise NumericFaultError(f"{op} produced values large enough to overflow")


class Tensor:
    """A dense multi-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_grad", "_on_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._on_tape = False

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
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        """Accumulated gradient, or None if no backward pass reached this tensor."""
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = g
        else:
            self._grad = self._grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Small amount of operator sugar; the module-level functions are the API.
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        return mul(self, other if isinstance(other, Tensor) else Tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations with their backward rules."""

    _stack: list["Tape"] = []

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def __len__(self) -> int:
        return len(self._records)

    def record(self, inputs, outputs, backward) -> None:
        for out in outputs:
            out._on_tape = True
        self._records.append(_Record(tuple(inputs), tuple(outputs), backward))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every recorded tensor reachable from ``loss``.

        Recorded tensors that cannot influence the loss receive a zero
        gradient; each record is visited exactly once, in reverse execution
        order.
        """
        if loss.data.ndim != 0:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not loss._on_tape:
            raise ContractError("loss tensor was not produced on the active tape")
        loss._accumulate(np.ones((), dtype=loss.dtype))
        for rec in reversed(self._records):
            if any(out._grad is not None for out in rec.outputs):
                rec.backward()
        for rec in self._records:
            for t in rec.inputs + rec.outputs:
                if t.requires_grad and t._grad is None:
                    t._grad = np.zeros_like(t.data)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation for ``loss`` on the active tape."""
    tape = Tape.active()
    if tape is None:
        raise ContractError("backward called with no active tape")
    tape.backward(loss)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._on_tape


def _maybe_record(inputs, outputs, backward_fn) -> None:
    tape = Tape.active()
    if tape is not None and any(_needs_grad(t) for t in inputs):
        tape.record(inputs, outputs, backward_fn)


# ---------------------------------------------------------------------------
# numpy-level helpers shared with the layer kernels


def np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def np_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    _check_finite(out.data, "matmul")

    def bw():
        g = out._grad
        if _needs_grad(a):
            a._accumulate(g @ b.data.T)
        if _needs_grad(b):
            b._accumulate(a.data.T @ g)

    _maybe_record((a, b), (out,), bw)
    return out


def _bias_broadcastable(a: Tensor, b: Tensor) -> bool:
    # A channel vector may broadcast over the time axis of a 2-D operand.
    return a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-D bias may broadcast over the rows of a 2-D operand."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)

        def bw():
            g = out._grad
            if _needs_grad(a):
                a._accumulate(g)
            if _needs_grad(b):
                b._accumulate(g)

    elif _bias_broadcastable(a, b):
        out = Tensor(a.data + b.data[:, None])

        def bw():
            g = out._grad
            if _needs_grad(a):
                a._accumulate(g)
            if _needs_grad(b):
                b._accumulate(g.sum(axis=1))

    else:
        raise DimensionError(f"add shapes incompatible: {a.shape} vs {b.shape}")
    _check_finite(out.data, "add")
    _maybe_record((a, b), (out,), bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; same broadcast rule as :func:`add`."""
    if a.shape == b.shape:
        out = Tensor(a.data * b.data)

        def bw():
            g = out._grad
            if _needs_grad(a):
                a._accumulate(g * b.data)
            if _needs_grad(b):
                b._accumulate(g * a.data)

    elif _bias_broadcastable(a, b):
        out = Tensor(a.data * b.data[:, None])

        def bw():
            g = out._grad
            if _needs_grad(a):
                a._accumulate(g * b.data[:, None])
            if _needs_grad(b):
                b._accumulate((g * a.data).sum(axis=1))

    else:
        raise DimensionError(f"mul shapes incompatible: {a.shape} vs {b.shape}")
    _check_finite(out.data, "mul")
    _maybe_record((a, b), (out,), bw)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(np_sigmoid(x.data))

    def bw():
        x._accumulate(out._grad * out.data * (1.0 - out.data))

    _maybe_record((x,), (out,), bw)
    return out


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))

    def bw():
        x._accumulate(out._grad * (1.0 - out.data * out.data))

    _maybe_record((x,), (out,), bw)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bw():
        x._accumulate(out._grad * (x.data > 0.0))

    _maybe_record((x,), (out,), bw)
    return out


_ELEMENTWISE = {"add": add, "mul": mul, "sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch to one of the elementwise primitives by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalization along ``axis``, stabilized by max-subtraction."""
    if not np.all(np.isfinite(x.data)):
        raise NumericFaultError("softmax requires finite inputs")
    out = Tensor(np_softmax(x.data, axis))

    def bw():
        g = out._grad
        y = out.data
        x._accumulate((g - (g * y).sum(axis=axis, keepdims=True)) * y)

    _maybe_record((x,), (out,), bw)
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; other extents must agree."""
    if not parts:
        raise ContractError("concat requires at least one part")
    ref = parts[0].shape
    ax = axis % max(parts[0].ndim, 1)
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            p.shape[d] != ref[d] for d in range(p.ndim) if d != ax
        ):
            raise DimensionError(
                f"concat parts disagree off-axis: {[p.shape for p in parts]}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=ax))
    offsets = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bw():
        g = out._grad
        sl = [slice(None)] * out.ndim
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if _needs_grad(p):
                sl[ax] = slice(lo, hi)
                p._accumulate(g[tuple(sl)].copy())

    _maybe_record(tuple(parts), (out,), bw)
    return out


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Arithmetic mean over ``axis`` (all axes when None)."""
    out = Tensor(x.data.mean(axis=axis))

    def bw():
        g = out._grad
        if axis is None:
            x._accumulate(np.full_like(x.data, 1.0 / x.data.size) * g)
        else:
            n = x.data.shape[axis]
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape) / n)

    _maybe_record((x,), (out,), bw)
    return out


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over ``axis`` (all axes when None)."""
    out = Tensor(x.data.sum(axis=axis))
    _check_finite(out.data, "sum")

    def bw():
        g = out._grad
        if axis is None:
            x._accumulate(np.full_like(x.data, 1.0) * g)
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    _maybe_record((x,), (out,), bw)
    return out


def transpose(x: Tensor) -> Tensor:
    """Transpose of a 2-D tensor."""
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {x.shape}")
    out = Tensor(x.data.T.copy())

    def bw():
        x._accumulate(out._grad.T.copy())

    _maybe_record((x,), (out,), bw)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape).copy())

    def bw():
        x._accumulate(out._grad.reshape(x.shape).copy())

    _maybe_record((x,), (out,), bw)
    return out


# ---------------------------------------------------------------------------
# temporal convolution


def _same_padding(width: int) -> tuple[int, int]:
    # Symmetric zero padding; the left side takes the extra sample for even
    # widths so pooling always sees the original length.
    total = width - 1
    left = (total + 1) // 2
    return left, total - left


def _im2col(padded: np.ndarray, width: int) -> np.ndarray:
    # padded [B, c, Tp] -> [c*width, B*To] matrix for a BLAS matmul
    win = np.lib.stride_tricks.sliding_window_view(padded, width, axis=2)
    b, c, t_out, _ = win.shape
    return win.transpose(1, 3, 0, 2).reshape(c * width, b * t_out), t_out


def conv1d(
    x: Tensor, kernels: Tensor, bias: Tensor, padding: str = "same"
) -> Tensor:
    """Cross-correlation over the time axis (no kernel flip), stride 1.

    ``x`` is [channels_in, T] or [batch, channels_in, T]; kernels are
    [channels_out, width, channels_in].  Same-padding keeps the output
    length equal to T; valid mode yields T - width + 1.
    """
    if kernels.ndim != 3:
        raise DimensionError(f"kernels must be [c_out, width, c_in], got {kernels.shape}")
    single = x.ndim == 2
    xb = x.data[None] if single else x.data
    if xb.ndim != 3:
        raise DimensionError(f"conv1d input must be 2-D or 3-D, got {x.shape}")
    c_out, width, c_in = kernels.shape
    if xb.shape[1] != c_in:
        raise DimensionError(
            f"conv1d channel mismatch: input {x.shape} vs kernels {kernels.shape}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(f"bias must be [{c_out}], got {bias.shape}")
    if padding == "same":
        left, right = _same_padding(width)
    elif padding == "valid":
        left = right = 0
    else:
        raise ContractError(f"unknown padding mode {padding!r}")
    t_in = xb.shape[2]
    if width > t_in + left + right:
        raise DimensionError(
            f"kernel width {width} exceeds padded input length {t_in + left + right}"
        )

    padded = np.pad(xb, ((0, 0), (0, 0), (left, right)))
    cols, t_out = _im2col(padded, width)
    k2 = kernels.data.transpose(0, 2, 1).reshape(c_out, c_in * width)
    out2 = k2 @ cols + bias.data[:, None]
    batch = xb.shape[0]
    res = out2.reshape(c_out, batch, t_out).transpose(1, 0, 2)
    out = Tensor(res[0] if single else res)
    _check_finite(out.data, "conv1d")

    def bw():
        g = out._grad
        gb = g[None] if single else g
        g2 = gb.transpose(1, 0, 2).reshape(c_out, batch * t_out)
        if _needs_grad(bias):
            bias._accumulate(g2.sum(axis=1))
        if _needs_grad(kernels):
            dk2 = g2 @ cols.T
            kernels._accumulate(dk2.reshape(c_out, c_in, width).transpose(0, 2, 1).copy())
        if _needs_grad(x):
            # Gradient w.r.t. the padded input is a correlation of the padded
            # output gradient with the width-flipped kernels.
            kf = kernels.data[:, ::-1, :]
            kt2 = kf.transpose(2, 0, 1).reshape(c_in, c_out * width)
            gpad = np.pad(gb, ((0, 0), (0, 0), (width - 1, width - 1)))
            gcols, t_pad = _im2col(gpad, width)
            dpad = (kt2 @ gcols).reshape(c_in, batch, t_pad).transpose(1, 0, 2)
            dx = dpad[:, :, left : left + t_in]
            x._accumulate(dx[0].copy() if single else dx.copy())

    _maybe_record((x, kernels, bias), (out,), bw)
    return out
