"""Dense NCHW tensors with tape-based reverse-mode automatic differentiation.

Deliberately small: float32/float64 only, row-major layout, explicit shapes,
and exactly one implicit broadcast (a per-channel vector [C] against a batch
[N,C,H,W]).  The tape is freed as soon as ``backward`` runs; there are no
higher-order derivatives.  A graph and the tensors it connects belong to a
single thread; tensors with ``requires_grad=False`` may be shared read-only.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "absolute",
    "elementwise",
    "sum_all",
    "mean_all",
    "channel_mean",
    "channel_std",
    "reduce",
    "conv2d_same",
    "reshape",
    "narrow_channels",
    "concat_channels",
    "backward",
    "finite_diff_grad",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense real tensor; records a backward rule while grad mode is on.

    ``grad`` is a numpy array of the same shape, populated by ``backward``
    and accumulated across multiple uses of the tensor in one graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "_spent")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """New leaf sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


def _result(data, parents, backward_fn):
    """Wrap an op result, attaching the tape record when grad is needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._spent = False
    live = [p for p in parents if p.requires_grad]
    if _grad_enabled and live:
        for p in live:
            if p._spent:
                raise RuntimeError("building on a graph already consumed by backward()")
        out.requires_grad = True
        out._parents = tuple(live)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t, g):
    t.grad = g if t.grad is None else t.grad + g


def _check_dtypes(a, b, name):
    if a.dtype != b.dtype:
        raise ValueError(f"{name}: mixed dtypes {a.dtype} vs {b.dtype}")


def _broadcast_kind(a, b, name):
    """'same', 'a_channel' (a is [C] against b [N,C,H,W]) or 'b_channel'."""
    if a.shape == b.shape:
        return "same"
    if a.ndim == 1 and b.ndim == 4 and a.shape[0] == b.shape[1]:
        return "a_channel"
    if b.ndim == 1 and a.ndim == 4 and b.shape[0] == a.shape[1]:
        return "b_channel"
    raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _chan(v):
    return v.reshape(1, -1, 1, 1)


def _fold(g, is_channel_operand):
    return g.sum(axis=(0, 2, 3)) if is_channel_operand else g


def add(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _scalar_op(a, lambda d: d + a.dtype.type(c), lambda g, d, y: g)
    _check_dtypes(a, b, "add")
    kind = _broadcast_kind(a, b, "add")
    if kind == "same":
        data = a.data + b.data
    elif kind == "a_channel":
        data = _chan(a.data) + b.data
    else:
        data = a.data + _chan(b.data)
    out = _result(data, (a, b), None)

    def bwd():
        g = out.grad
        if a.requires_grad:
            _accum(a, _fold(g, kind == "a_channel"))
        if b.requires_grad:
            _accum(b, _fold(g, kind == "b_channel"))

    out._backward = bwd if out.requires_grad else None
    return out


def sub(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _scalar_op(a, lambda d: d - a.dtype.type(c), lambda g, d, y: g)
    _check_dtypes(a, b, "sub")
    kind = _broadcast_kind(a, b, "sub")
    if kind == "same":
        data = a.data - b.data
    elif kind == "a_channel":
        data = _chan(a.data) - b.data
    else:
        data = a.data - _chan(b.data)
    out = _result(data, (a, b), None)

    def bwd():
        g = out.grad
        if a.requires_grad:
            _accum(a, _fold(g, kind == "a_channel"))
        if b.requires_grad:
            _accum(b, _fold(-g, kind == "b_channel"))

    out._backward = bwd if out.requires_grad else None
    return out


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _scalar_op(a, lambda d: d * a.dtype.type(c), lambda g, d, y: g * a.dtype.type(c))
    _check_dtypes(a, b, "mul")
    kind = _broadcast_kind(a, b, "mul")
    av = _chan(a.data) if kind == "a_channel" else a.data
    bv = _chan(b.data) if kind == "b_channel" else b.data
    out = _result(av * bv, (a, b), None)

    def bwd():
        g = out.grad
        if a.requires_grad:
            _accum(a, _fold(g * bv, kind == "a_channel"))
        if b.requires_grad:
            _accum(b, _fold(g * av, kind == "b_channel"))

    out._backward = bwd if out.requires_grad else None
    return out


def _scalar_op(a, fwd, grad_rule):
    """Unary op with constant parameters folded into the closures."""
    data = fwd(a.data)
    out = _result(data, (a,), None)

    def bwd():
        if a.requires_grad:
            _accum(a, grad_rule(out.grad, a.data, out.data))

    out._backward = bwd if out.requires_grad else None
    return out


def sigmoid(x):
    # exp(-softplus(-x)) is exact and overflow-free for any finite input
    return _scalar_op(
        x,
        lambda d: np.exp(-np.logaddexp(d.dtype.type(0), -d)),
        lambda g, d, y: g * y * (1 - y),
    )


def tanh(x):
    return _scalar_op(x, np.tanh, lambda g, d, y: g * (1 - y * y))


def exp(x):
    return _scalar_op(x, np.exp, lambda g, d, y: g * y)


def log(x):
    if np.any(x.data <= 0):
        raise ValueError("log: input has non-positive entries")
    return _scalar_op(x, np.log, lambda g, d, y: g / d)


def absolute(x):
    # subgradient 0 at exact zeros, via sign()
    return _scalar_op(x, np.abs, lambda g, d, y: g * np.sign(d))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "abs": absolute,
}


def elementwise(op, a, b=None):
    """Dispatch by name; binary ops require b, unary ops forbid it."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op} is unary")
    return fn(a)


def _check_nonempty(x, name):
    if x.size == 0:
        raise ValueError(f"{name}: empty tensor")


def sum_all(x):
    _check_nonempty(x, "sum")
    out = _result(x.data.sum(), (x,), None)

    def bwd():
        _accum(x, np.broadcast_to(out.grad, x.shape).astype(x.dtype, copy=False))

    out._backward = bwd if out.requires_grad else None
    return out


def mean_all(x):
    _check_nonempty(x, "mean")
    n = x.dtype.type(x.size)
    out = _result(x.data.mean(), (x,), None)

    def bwd():
        _accum(x, np.broadcast_to(out.grad / n, x.shape).astype(x.dtype, copy=False))

    out._backward = bwd if out.requires_grad else None
    return out


def _check_nchw(x, name):
    if x.ndim != 4:
        raise ValueError(f"{name}: expected [N,C,H,W], got shape {x.shape}")


def channel_mean(x):
    """Per-channel mean over batch and spatial axes: [N,C,H,W] -> [C]."""
    _check_nonempty(x, "channel_mean")
    _check_nchw(x, "channel_mean")
    n = x.dtype.type(x.shape[0] * x.shape[2] * x.shape[3])
    out = _result(x.data.mean(axis=(0, 2, 3)), (x,), None)

    def bwd():
        _accum(x, np.broadcast_to(_chan(out.grad / n), x.shape).astype(x.dtype, copy=False))

    out._backward = bwd if out.requires_grad else None
    return out


def channel_std(x):
    """Per-channel population standard deviation: [N,C,H,W] -> [C].

    Needs more than one element per channel; the gradient is the usual
    (x - mean) / (n * std) and is undefined for a constant channel.
    """
    _check_nonempty(x, "channel_std")
    _check_nchw(x, "channel_std")
    n_elem = x.shape[0] * x.shape[2] * x.shape[3]
    if n_elem < 2:
        raise ValueError("channel_std: needs more than one element per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    std = x.data.std(axis=(0, 2, 3))  # population convention (divide by n)
    out = _result(std, (x,), None)

    def bwd():
        n = x.dtype.type(n_elem)
        _accum(x, _chan(out.grad) * (x.data - _chan(mean)) / (n * _chan(std)))

    out._backward = bwd if out.requires_grad else None
    return out


_REDUCE = {
    "sum": sum_all,
    "mean": mean_all,
    "channel_mean": channel_mean,
    "channel_std": channel_std,
}


def reduce(op, x):
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduce op {op!r}") from None
    return fn(x)


def conv2d_same(x, w, b=None):
    """2-D cross-correlation with zero 'same' padding, stride 1, odd kernel.

    x: [N,Cin,H,W], w: [Cout,Cin,k,k], optional b: [Cout].  Output spatial
    size equals the input's.  Implemented as k*k shifted matmuls so the bulk
    of the work lands in BLAS.
    """
    _check_nchw(x, "conv2d_same")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d_same: weight must be [Cout,Cin,k,k], got {w.shape}")
    k = w.shape[2]
    if k % 2 != 1:
        raise ValueError(f"conv2d_same: kernel size {k} is not odd")
    if w.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d_same: input has {x.shape[1]} channels, weight expects {w.shape[1]}"
        )
    _check_dtypes(x, w, "conv2d_same")
    if b is not None:
        _check_dtypes(x, b, "conv2d_same")
        if b.shape != (w.shape[0],):
            raise ValueError(f"conv2d_same: bias shape {b.shape} != ({w.shape[0]},)")

    n, c_in, h, wd = x.shape
    c_out = w.shape[0]
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    acc = np.zeros((n, c_out, h * wd), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            xs = xp[:, :, dy : dy + h, dx : dx + wd].reshape(n, c_in, h * wd)
            acc += np.matmul(w.data[:, :, dy, dx], xs)
    data = acc.reshape(n, c_out, h, wd)
    if b is not None:
        data = data + _chan(b.data)

    parents = (x, w) if b is None else (x, w, b)
    out = _result(data, parents, None)

    def bwd():
        g = out.grad
        go = g.reshape(n, c_out, h * wd)
        if w.requires_grad:
            gw = np.empty_like(w.data)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                if w.requires_grad:
                    xs = xp[:, :, dy : dy + h, dx : dx + wd].reshape(n, c_in, h * wd)
                    gw[:, :, dy, dx] = np.tensordot(go, xs, axes=([0, 2], [0, 2]))
                if x.requires_grad:
                    gxp[:, :, dy : dy + h, dx : dx + wd] += np.matmul(
                        w.data[:, :, dy, dx].T, go
                    ).reshape(n, c_in, h, wd)
        if w.requires_grad:
            _accum(w, gw)
        if x.requires_grad:
            _accum(x, gxp[:, :, pad : pad + h, pad : pad + wd])
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    out._backward = bwd if out.requires_grad else None
    return out


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)
    out = _result(data, (x,), None)

    def bwd():
        _accum(x, out.grad.reshape(x.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def narrow_channels(x, start, stop):
    """Contiguous channel slice [:, start:stop] of an [N,C,H,W] tensor."""
    _check_nchw(x, "narrow_channels")
    if not (0 <= start < stop <= x.shape[1]):
        raise ValueError(f"narrow_channels: bad range [{start}:{stop}] for C={x.shape[1]}")
    out = _result(np.ascontiguousarray(x.data[:, start:stop]), (x,), None)

    def bwd():
        g = np.zeros(x.shape, dtype=x.dtype)
        g[:, start:stop] = out.grad
        _accum(x, g)

    out._backward = bwd if out.requires_grad else None
    return out


def concat_channels(a, b):
    """Concatenate two [N,C,H,W] tensors along the channel axis."""
    _check_nchw(a, "concat_channels")
    _check_nchw(b, "concat_channels")
    _check_dtypes(a, b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = _result(np.concatenate([a.data, b.data], axis=1), (a, b), None)

    def bwd():
        g = out.grad
        if a.requires_grad:
            _accum(a, g[:, :ca].copy())
        if b.requires_grad:
            _accum(b, g[:, ca:].copy())

    out._backward = bwd if out.requires_grad else None
    return out


def backward(loss):
    """Populate grads of every reachable requires_grad tensor from a scalar.

    Visits each tape record exactly once in reverse topological order, then
    frees the tape; a second backward through the same graph raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._spent:
        raise RuntimeError("backward: graph already consumed")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not require grad")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.dtype) if loss.ndim == 0 else np.ones(
        loss.shape, dtype=loss.dtype
    )
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
            node._backward = None
            node._parents = ()
            node._spent = True


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar-valued f at leaf tensor x.

    The independent oracle for every backward rule in this module; runs f
    with the tape suspended, perturbing one coordinate at a time.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    flat = x.data.reshape(-1)
    grad = np.empty(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape).astype(x.dtype, copy=False)
