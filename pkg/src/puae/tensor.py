"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable computation in the package goes through :func:`apply`,
which runs one primitive forward and records a vector-Jacobian product on the
output tensor. :func:`backward` walks the recorded graph in reverse
topological order and returns gradients keyed by parameter name.

Graphs are never reused: each forward pass builds a fresh one.
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import GraphError, InvalidAttributeError, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

PRIMITIVES = frozenset(
    {
        "matmul",
        "add",
        "sub",
        "mul",
        "relu",
        "exp",
        "log",
        "neg",
        "concat",
        "reshape",
        "transpose",
        "gather_rows",
        "reduce_max",
        "reduce_sum",
        "reduce_mean",
        "softmax",
        "l1_normalize",
        "batch_norm",
        "dropout",
        "sqrt",
        "square",
    }
)

GradientMap = Dict[str, np.ndarray]


class Tensor:
    """A dense array, optionally attached to a recorded computation graph."""

    __slots__ = ("data", "requires_grad", "name", "kind", "_parents", "_vjp", "aux")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.kind = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self.aux: dict = {}

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}{grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        if grad.shape[lead:] == tuple(shape) and grad.flags.c_contiguous:
            return grad.reshape((-1,) + tuple(shape)).sum(axis=0)
        grad = grad.sum(axis=tuple(range(lead)))
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _axis(kind, axis, ndim):
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise InvalidAttributeError(f"{kind}: axis {axis!r} out of range for rank {ndim}")
    return int(axis) % ndim


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# Each forward returns (out_data, vjp, aux). vjp maps the output cotangent to
# a tuple with one entry per input (None where no gradient is needed).


def _fw_matmul(inputs, attrs):
    a, b = (t.data for t in inputs)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one large GEMM instead of a loop over the leading axes
        a2 = a.reshape(-1, a.shape[-1])
        out = (a2 @ b).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        try:
            out = np.matmul(a, b)
        except ValueError:
            raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb

    return out, vjp, None


def _fw_add(inputs, attrs):
    a, b = (t.data for t in inputs)
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), None


def _fw_sub(inputs, attrs):
    a, b = (t.data for t in inputs)
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), None


def _fw_mul(inputs, attrs):
    a, b = (t.data for t in inputs)
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), None


def _fw_relu(inputs, attrs):
    x = inputs[0].data
    # gradient at exactly 0 is 0
    return np.maximum(x, 0).astype(x.dtype, copy=False), lambda g: (g * (x > 0),), None


def _fw_exp(inputs, attrs):
    y = np.exp(inputs[0].data)
    return y, lambda g: (g * y,), None


def _fw_log(inputs, attrs):
    x = inputs[0].data
    return np.log(x), lambda g: (g / x,), None


def _fw_neg(inputs, attrs):
    return -inputs[0].data, lambda g: (-g,), None


def _fw_square(inputs, attrs):
    x = inputs[0].data
    return x * x, lambda g: (2 * g * x,), None


def _fw_sqrt(inputs, attrs):
    x = inputs[0].data
    if np.any(x < 0):
        raise InvalidAttributeError("sqrt: negative input")
    y = np.sqrt(x)

    def vjp(g):
        # subgradient 0 at the kink, as for relu
        safe = np.where(y > 0, y, 1)
        return (np.where(y > 0, 0.5 * g / safe, 0).astype(y.dtype),)

    return y, vjp, None


def _fw_concat(inputs, attrs):
    arrays = [t.data for t in inputs]
    if not arrays:
        raise InvalidAttributeError("concat: no inputs")
    axis = _axis("concat", attrs.get("axis", -1), arrays[0].ndim)
    ref = list(arrays[0].shape)
    for arr in arrays[1:]:
        other = list(arr.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis):
            raise ShapeMismatchError(
                f"concat: incompatible shapes {[a.shape for a in arrays]} along axis {axis}"
            )
    out = np.concatenate(arrays, axis=axis)
    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis)), None


def _fw_reshape(inputs, attrs):
    x = inputs[0].data
    shape = tuple(attrs["shape"])
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return out, lambda g: (g.reshape(x.shape),), None


def _fw_transpose(inputs, attrs):
    x = inputs[0].data
    axes = attrs.get("axes")
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise InvalidAttributeError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return np.transpose(x, axes), lambda g: (np.transpose(g, inverse),), None


def _fw_gather_rows(inputs, attrs):
    x = inputs[0].data
    idx = np.asarray(attrs["indices"])
    if not np.issubdtype(idx.dtype, np.integer):
        raise InvalidAttributeError("gather_rows: indices must be integers")
    if x.ndim < 1:
        raise ShapeMismatchError("gather_rows: input must have rank >= 1")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InvalidAttributeError(f"gather_rows: index out of range for {n} rows")
    out = x[idx]

    def vjp(g):
        flat = idx.reshape(-1)
        g2 = g.reshape(flat.size, -1)
        scatter = sp.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
            shape=(n, flat.size),
        )
        return (np.asarray(scatter @ g2).reshape(x.shape),)

    return out, vjp, None


def _fw_reduce_max(inputs, attrs):
    x = inputs[0].data
    axis = _axis("reduce_max", attrs.get("axis", -1), x.ndim)
    keepdims = attrs.get("keepdims", False)
    peak = np.max(x, axis=axis, keepdims=True)
    out = peak if keepdims else np.squeeze(peak, axis=axis)

    def winners():
        # ties go to the lowest index
        hit = x == peak
        tied = np.count_nonzero(hit, axis=axis) > 1
        if tied.any():
            # repair only the tied slices
            view = np.moveaxis(hit, axis, -1)
            first = np.argmax(view[tied], axis=-1)
            fixed = np.zeros((len(first), view.shape[-1]), dtype=bool)
            fixed[np.arange(len(first)), first] = True
            view[tied] = fixed
        return hit

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.multiply(winners(), gk, dtype=x.dtype),)

    # np.argmax is slow along inner axes; only computed on request
    return out, vjp, _LazyAux(argmax=lambda: np.argmax(x, axis=axis))


class _LazyAux(dict):
    def __init__(self, **factories):
        super().__init__()
        self._factories = factories

    def __missing__(self, key):
        if key not in self._factories:
            raise KeyError(key)
        value = self[key] = self._factories[key]()
        return value


def _reduce_axes(kind, axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (tuple, list)):
        return tuple(sorted(_axis(kind, a, ndim) for a in axis))
    return (_axis(kind, axis, ndim),)


def _fw_reduce_sum(inputs, attrs):
    x = inputs[0].data
    axes = _reduce_axes("reduce_sum", attrs.get("axis"), x.ndim)
    keepdims = attrs.get("keepdims", False)
    out = np.sum(x, axis=axes, keepdims=keepdims)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, x.shape).copy(),)

    return out, vjp, None


def _fw_reduce_mean(inputs, attrs):
    x = inputs[0].data
    axes = _reduce_axes("reduce_mean", attrs.get("axis"), x.ndim)
    keepdims = attrs.get("keepdims", False)
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeMismatchError(f"reduce_mean: empty reduction over shape {x.shape}")
    out = np.mean(x, axis=axes, keepdims=keepdims)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return ((np.broadcast_to(gk, x.shape) / count).astype(x.dtype),)

    return out, vjp, None


def _fw_softmax(inputs, attrs):
    x = inputs[0].data
    axis = _axis("softmax", attrs.get("axis", -1), x.ndim)
    y = x - x.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def vjp(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return y, vjp, None


def _fw_l1_normalize(inputs, attrs):
    x = inputs[0].data
    axis = _axis("l1_normalize", attrs.get("axis", -1), x.ndim)
    eps = attrs.get("eps", 1e-9)
    nonneg = bool(x.min() >= 0) if x.size else True
    s = eps + (x if nonneg else np.abs(x)).sum(axis=axis, keepdims=True)
    y = x / s

    def vjp(g):
        scale = (g * x).sum(axis=axis, keepdims=True) / s
        gx = g - (scale if nonneg else np.sign(x) * scale)
        gx /= s
        return (gx,)

    return y, vjp, None


def _fw_batch_norm(inputs, attrs):
    """Normalize over every axis but the last (the channel axis)."""
    x, gamma, beta = (t.data for t in inputs)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(
            f"batch_norm: affine shapes {gamma.shape}, {beta.shape} do not match channels {c}"
        )
    momentum = attrs.get("momentum", 0.9)
    if not 0.0 <= momentum <= 1.0:
        raise InvalidAttributeError(f"batch_norm: momentum {momentum} outside [0, 1]")
    eps = attrs.get("eps", 1e-5)
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod(x.shape[:-1]))
    running_mean = attrs.get("running_mean")
    running_var = attrs.get("running_var")
    if running_mean is None:
        running_mean = np.zeros(c, dtype=x.dtype)
    if running_var is None:
        running_var = np.ones(c, dtype=x.dtype)

    if not attrs.get("training", True):
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv
        out = xhat * gamma + beta

        def vjp_eval(g):
            return g * (gamma * inv), (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return out.astype(x.dtype, copy=False), vjp_eval, None

    if n == 1:
        # a single sample per channel carries no statistics: pass it through
        xhat = x
        out = x * gamma + beta

        def vjp_single(g):
            return g * gamma, (g * x).sum(axis=axes), g.sum(axis=axes)

        aux = {"running_mean": running_mean, "running_var": running_var}
        return out, vjp_single, aux

    flat = x.reshape(n, c)
    mean = flat.mean(axis=0)
    xhat = flat - mean
    var = np.einsum("ij,ij->j", xhat, xhat) / n
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat *= inv
    out = xhat * gamma
    out += beta
    unbiased = var * (n / (n - 1))
    aux = {
        "batch_mean": mean,
        "batch_var": var,
        "running_mean": (momentum * running_mean + (1 - momentum) * mean).astype(x.dtype),
        "running_var": (momentum * running_var + (1 - momentum) * unbiased).astype(x.dtype),
    }

    def vjp(g):
        g2 = g.reshape(n, c)
        gsum = g2.sum(axis=0)
        gxhat_sum = np.einsum("ij,ij->j", g2, xhat)
        gx = xhat * (-gxhat_sum / n).astype(x.dtype)
        gx += g2
        gx -= (gsum / n).astype(x.dtype)
        gx *= (gamma * inv).astype(x.dtype)
        return gx.reshape(x.shape), gxhat_sum, gsum

    return out.reshape(x.shape).astype(x.dtype, copy=False), vjp, aux


def _fw_dropout(inputs, attrs):
    x = inputs[0].data
    rate = attrs.get("rate", 0.5)
    if not 0.0 <= rate < 1.0:
        raise InvalidAttributeError(f"dropout: rate {rate} outside [0, 1)")
    if not attrs.get("training", True) or rate == 0.0:
        return x.copy(), lambda g: (g,), {"mask": None}
    mask = attrs.get("mask")
    if mask is None:
        rng = attrs.get("rng")
        if rng is None:
            raise InvalidAttributeError("dropout: training mode needs an rng or a recorded mask")
        mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)
    elif mask.shape != x.shape:
        raise ShapeMismatchError(f"dropout: mask shape {mask.shape} != input shape {x.shape}")
    return x * mask, lambda g: (g * mask,), {"mask": mask}


_FORWARD = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "relu": _fw_relu,
    "exp": _fw_exp,
    "log": _fw_log,
    "neg": _fw_neg,
    "concat": _fw_concat,
    "reshape": _fw_reshape,
    "transpose": _fw_transpose,
    "gather_rows": _fw_gather_rows,
    "reduce_max": _fw_reduce_max,
    "reduce_sum": _fw_reduce_sum,
    "reduce_mean": _fw_reduce_mean,
    "softmax": _fw_softmax,
    "l1_normalize": _fw_l1_normalize,
    "batch_norm": _fw_batch_norm,
    "dropout": _fw_dropout,
    "sqrt": _fw_sqrt,
    "square": _fw_square,
}

_ARITY = {"matmul": 2, "add": 2, "sub": 2, "mul": 2, "batch_norm": 3}


def apply(kind: str, inputs: Sequence, attrs: Optional[Mapping] = None) -> Tensor:
    """Run primitive ``kind`` on ``inputs`` and record it on the graph."""
    if kind not in _FORWARD:
        raise InvalidAttributeError(f"unknown primitive {kind!r}")
    attrs = dict(attrs or {})
    inputs = list(inputs)
    expected = _ARITY.get(kind, None if kind == "concat" else 1)
    if expected is not None and len(inputs) != expected:
        raise InvalidAttributeError(f"{kind}: expected {expected} inputs, got {len(inputs)}")
    ref = next((t for t in inputs if isinstance(t, Tensor)), None)
    inputs = [as_tensor(t, like=ref) for t in inputs]
    data, vjp, aux = _FORWARD[kind](inputs, attrs)
    out = Tensor(data)
    out.kind = kind
    out.aux = aux if aux is not None else {}
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = tuple(inputs)
        out._vjp = vjp
    return out


def matmul(a, b):
    return apply("matmul", [a, b])


def add(a, b):
    return apply("add", [a, b])


def sub(a, b):
    return apply("sub", [a, b])


def mul(a, b):
    return apply("mul", [a, b])


def relu(x):
    return apply("relu", [x])


def exp(x):
    return apply("exp", [x])


def log(x):
    return apply("log", [x])


def neg(x):
    return apply("neg", [x])


def sqrt(x):
    return apply("sqrt", [x])


def square(x):
    return apply("square", [x])


def concat(xs, axis=-1):
    return apply("concat", list(xs), {"axis": axis})


def reshape(x, shape):
    return apply("reshape", [x], {"shape": shape})


def transpose(x, axes=None):
    return apply("transpose", [x], {"axes": axes})


def gather_rows(x, indices):
    return apply("gather_rows", [x], {"indices": indices})


def reduce_max(x, axis=-1, keepdims=False):
    return apply("reduce_max", [x], {"axis": axis, "keepdims": keepdims})


def reduce_sum(x, axis=None, keepdims=False):
    return apply("reduce_sum", [x], {"axis": axis, "keepdims": keepdims})


def reduce_mean(x, axis=None, keepdims=False):
    return apply("reduce_mean", [x], {"axis": axis, "keepdims": keepdims})


def softmax(x, axis=-1):
    return apply("softmax", [x], {"axis": axis})


def l1_normalize(x, axis=-1, eps=1e-9):
    return apply("l1_normalize", [x], {"axis": axis, "eps": eps})


def batch_norm(x, gamma, beta, *, training, running_mean=None, running_var=None, momentum=0.9, eps=1e-5):
    return apply(
        "batch_norm",
        [x, gamma, beta],
        {
            "training": training,
            "running_mean": running_mean,
            "running_var": running_var,
            "momentum": momentum,
            "eps": eps,
        },
    )


def dropout(x, rate, *, training, rng=None, mask=None):
    return apply("dropout", [x], {"rate": rate, "training": training, "rng": rng, "mask": mask})


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> GradientMap:
    """Gradients of scalar ``loss`` w.r.t. trainable leaves.

    Leaves are keyed by their ``name``. When ``params`` is given the result has
    exactly its keys, with zeros for parameters the loss does not reach.
    """
    if loss.data.shape != ():
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss is detached from any trainable parameter")

    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[id(node)] = (node, g)
            continue
        for parent, gp in zip(node._parents, node._vjp(g)):
            if gp is None or not parent.requires_grad:
                continue
            if gp.dtype != parent.dtype:
                gp = gp.astype(parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp

    if params is None:
        out = {}
        for node, g in leaves.values():
            name = node.name if node.name is not None else f"tensor@{id(node):x}"
            out[name] = np.asarray(g, dtype=node.dtype).reshape(node.shape)
        return out
    out = {}
    for name, tensor in params.items():
        hit = leaves.get(id(tensor))
        if hit is None:
            out[name] = np.zeros_like(tensor.data)
        else:
            out[name] = np.asarray(hit[1], dtype=tensor.dtype).reshape(tensor.shape)
    return out


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    coords: Optional[Iterable[int]] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a float64 Tensor to a scalar Tensor. ``coords`` restricts the
    comparison to a subset of flat indices (useful for large parameters).
    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise InvalidAttributeError(f"finite_difference_check: eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("finite_difference_check: non-finite input")
    leaf = Tensor(x, requires_grad=True, name="x")
    loss = f(leaf)
    if not np.isfinite(loss.data):
        raise NonFiniteError("finite_difference_check: non-finite loss")
    analytic = backward(loss, {"x": leaf})["x"].reshape(-1)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("finite_difference_check: non-finite analytic gradient")

    flat = x.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        bumped = flat.copy()
        bumped[i] += eps
        plus = f(Tensor(bumped.reshape(x.shape))).data
        bumped[i] -= 2 * eps
        minus = f(Tensor(bumped.reshape(x.shape))).data
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NonFiniteError(f"finite_difference_check: non-finite value at coordinate {i}")
        numeric = float(plus - minus) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
