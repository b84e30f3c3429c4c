"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward closure on the output
tensor; :func:`backward` replays the tape in reverse topological order.
Single evaluations are single-threaded; concurrent evaluations are safe
as long as each owns its gradient accumulators (parameters are only read
during forward/backward).

Binary elementwise ops accept equal shapes or a scalar on either side;
general broadcasting is deliberately unsupported. For bias terms use
:func:`add_bias`, which sums the gradient over the batch axes.
"""

import numpy as np

from .errors import DomainError, ShapeError
from . import kernels

LOG_2PI = float(np.log(2.0 * np.pi))


class Tensor:
    """A node of the recorded computation. Wraps a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor data must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _node(data, parents, backward_fn):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _check_binary(a, b, op):
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} need to match or be scalar")


def _reduce_to(grad, shape):
    # undo a scalar-with-tensor broadcast
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "add")

    def backward_fn(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, _reduce_to(g, b.data.shape))

    return _node(a.data + b.data, (a, b), backward_fn)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "sub")

    def backward_fn(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, _reduce_to(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), backward_fn)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "mul")

    def backward_fn(g):
        _accumulate(a, _reduce_to(g * b.data, a.data.shape))
        _accumulate(b, _reduce_to(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), backward_fn)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")

    def backward_fn(g):
        _accumulate(a, _reduce_to(g / b.data, a.data.shape))
        _accumulate(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), backward_fn)


def relu(x):
    x = _wrap(x)
    mask = x.data > 0.0

    def backward_fn(g):
        _accumulate(x, g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), backward_fn)


def tanh(x):
    x = _wrap(x)
    y = np.tanh(x.data)

    def backward_fn(g):
        _accumulate(x, g * (1.0 - y * y))

    return _node(y, (x,), backward_fn)


def softplus(x):
    x = _wrap(x)
    # stable form: max(x, 0) + log1p(exp(-|x|))
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def backward_fn(g):
        _accumulate(x, g * sig)

    return _node(y, (x,), backward_fn)


def exp(x):
    x = _wrap(x)
    y = np.exp(x.data)

    def backward_fn(g):
        _accumulate(x, g * y)

    return _node(y, (x,), backward_fn)


def log(x):
    x = _wrap(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: argument must be positive")

    def backward_fn(g):
        _accumulate(x, g / x.data)

    return _node(np.log(x.data), (x,), backward_fn)


_ELEMENTWISE = {}


def elementwise(op, *args):
    """Dispatch an elementwise op by name: add, sub, mul, relu, tanh, softplus, exp, log."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


_ELEMENTWISE.update(
    add=add, sub=sub, mul=mul, relu=relu, tanh=tanh, softplus=softplus, exp=exp, log=log
)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward_fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward_fn)


def conv2d(x, k, stride=1):
    """Valid cross-correlation. Accepts (C,H,W) or batched (N,C,H,W) input."""
    x, k = _wrap(x), _wrap(k)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.data.shape} must be 3- or 4-d, kernels {k.data.shape} 4-d")
    if stride < 1:
        raise DomainError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, w = xd.shape
    f, kc, kh, kw = k.data.shape
    if kc != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {kc}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than input {(h, w)}")
    out = kernels.conv2d_forward(xd, k.data, stride)

    def backward_fn(g):
        gb = g[None] if squeeze else g
        if x.requires_grad:
            gx = kernels.conv2d_grad_input(gb, k.data, stride, h, w)
            _accumulate(x, gx[0] if squeeze else gx)
        if k.requires_grad:
            _accumulate(k, kernels.conv2d_grad_kernels(gb, xd, stride, kh, kw))

    return _node(out[0] if squeeze else out, (x, k), backward_fn)


def add_bias(x, b):
    """Add a bias vector over the channel/feature axis.

    Supports x of shape (n, d) with b of shape (d,), and x of shape
    (n, f, h, w) with b of shape (f,).
    """
    x, b = _wrap(x), _wrap(b)
    if x.data.ndim == 2 and b.data.shape == (x.data.shape[1],):
        data = x.data + b.data
        axes = (0,)
    elif x.data.ndim == 4 and b.data.shape == (x.data.shape[1],):
        data = x.data + b.data[None, :, None, None]
        axes = (0, 2, 3)
    else:
        raise ShapeError(f"add_bias: shapes {x.data.shape} and {b.data.shape} do not pair")

    def backward_fn(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=axes))

    return _node(data, (x, b), backward_fn)


def sum_all(x):
    x = _wrap(x)

    def backward_fn(g):
        _accumulate(x, np.full_like(x.data, float(g)))

    return _node(np.sum(x.data), (x,), backward_fn)


def mean_all(x):
    x = _wrap(x)
    n = x.data.size

    def backward_fn(g):
        _accumulate(x, np.full_like(x.data, float(g) / n))

    return _node(np.mean(x.data), (x,), backward_fn)


def mean_rows(x):
    """Mean over axis 0 of a (n, d) tensor, returning (d,)."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows: expected 2-d input, got {x.data.shape}")
    n = x.data.shape[0]

    def backward_fn(g):
        _accumulate(x, np.tile(g / n, (n, 1)))

    return _node(x.data.mean(axis=0), (x,), backward_fn)


def repeat_rows(v, n):
    """Tile a (d,) vector into (n, d) rows."""
    v = _wrap(v)
    if v.data.ndim != 1:
        raise ShapeError(f"repeat_rows: expected 1-d input, got {v.data.shape}")

    def backward_fn(g):
        _accumulate(v, g.sum(axis=0))

    return _node(np.tile(v.data, (n, 1)), (v,), backward_fn)


def take_rows(x, indices):
    """Select rows of a (n, d) tensor; backward scatter-adds into the sources."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-d input, got {x.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accumulate(x, gx)

    return _node(x.data[idx], (x,), backward_fn)


def concat_cols(a, b):
    """Concatenate two (n, *) tensors along axis 1."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.data.shape} and {b.data.shape}")
    p = a.data.shape[1]

    def backward_fn(g):
        _accumulate(a, g[:, :p])
        _accumulate(b, g[:, p:])

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), backward_fn)


def reshape(x, shape):
    x = _wrap(x)
    old = x.data.shape

    def backward_fn(g):
        _accumulate(x, g.reshape(old))

    return _node(x.data.reshape(shape), (x,), backward_fn)


class ParameterSet:
    """Named parameter tensors with stable iteration order and gradient accumulators."""

    def __init__(self):
        self._tensors = {}

    def add(self, name, data):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.data)

    def count(self):
        return sum(t.data.size for t in self._tensors.values())

    def copy(self):
        out = ParameterSet()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy())
        return out

    def state_bytes(self):
        """Concatenated raw bytes of all parameter values, in iteration order."""
        return b"".join(t.data.tobytes() for t in self._tensors.values())


def _topo_order(root):
    # iterative post-order over requires_grad nodes; deterministic because
    # parent tuples are ordered
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Propagate d(loss)/d(node) through the recorded graph.

    ``loss`` must be a scalar. When ``params`` is given its accumulators
    are zeroed first and end up holding the full gradient; the parameter
    values themselves are never touched.
    """
    loss = _wrap(loss)
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if params is not None:
        params.zero_grad()
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node is not loss:
            node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # intermediate grads are not part of the contract; free them
    for node in order:
        if node._parents and node is not loss:
            node.grad = None


def grad_check(f, params, eps=1e-5):
    """Max relative error between analytic gradients and central differences.

    ``f`` rebuilds a scalar loss from the live parameter tensors on every
    call. The relative error is |analytic - fd| / max(1, |analytic|, |fd|),
    maximized over every parameter coordinate.
    """
    if not 0.0 < eps <= 1e-2:
        raise DomainError(f"grad_check: eps must be in (0, 1e-2], got {eps}")
    loss = f(params)
    backward(loss, params)
    analytic = {name: t.grad.copy() for name, t in params.items()}
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        ref = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(params).data)
            flat[i] = orig - eps
            lo = float(f(params).data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(ref[i] - fd) / max(1.0, abs(ref[i]), abs(fd))
            if err > worst:
                worst = err
    return worst
