"""Minimal reverse-mode autodiff over numpy arrays.

A computation graph is built fresh for every step and discarded after
``backward``; parameter tensors are leaves that survive across graphs,
so nothing in a graph may mutate a value in place. Training runs in
float32; gradient checks force float64 because central differences are
unreliable at single precision.

Raw numpy arrays and python floats passed to an op are constants: they
take part in the forward value but receive no gradient. Only ``Tensor``
objects participate in backpropagation.
"""

import os

import numpy as np

from .backend import K
from .errors import ConfigError, InternalError, UsageError

DEBUG = os.environ.get("SEGLM_DEBUG", "") not in ("", "0")


def _check_finite(value: np.ndarray, op: str) -> None:
    if DEBUG and not np.all(np.isfinite(value)):
        raise InternalError(f"non-finite values out of op {op}")


class Tensor:
    """One node of the graph: a value, a lazily allocated gradient, and
    the backward rule that scatters the gradient to its parents."""

    __slots__ = ("value", "grad", "_parents", "_backprop")

    def __init__(self, value: np.ndarray, parents=(), backprop=None):
        self.value = value
        self.grad = None
        self._parents = parents
        self._backprop = backprop

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def detach(self) -> np.ndarray:
        """The raw value, outside the graph. Treat it as read-only."""
        return self.value

    def _accum(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.value.shape, dtype=self.value.dtype)
        np.add(self.grad, g, out=self.grad, casting="same_kind")

    # operator sugar; every form funnels into the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype})"


def tensor(value, dtype=None) -> Tensor:
    """Wrap an array as a leaf tensor (receives a gradient, has no parents)."""
    arr = np.asarray(value, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through its whole graph."""
    if loss.value.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    order = []
    seen = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    loss.grad = np.ones(loss.value.shape, dtype=loss.value.dtype)
    for node in reversed(order):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def _binary_values(a, b, op: str):
    av, bv = _value_of(a), _value_of(b)
    try:
        np.broadcast_shapes(av.shape, bv.shape)
    except ValueError:
        raise ConfigError(f"{op}: shapes {av.shape} and {bv.shape} do not broadcast") from None
    return av, bv


def add(a, b) -> Tensor:
    av, bv = _binary_values(a, b, "add")
    out = Tensor(av + bv)

    def backprop(g):
        if isinstance(a, Tensor):
            a._accum(_reduce_to(g, av.shape))
        if isinstance(b, Tensor):
            b._accum(_reduce_to(g, bv.shape))

    out._parents = tuple(t for t in (a, b) if isinstance(t, Tensor))
    out._backprop = backprop
    return out


def mul(a, b) -> Tensor:
    av, bv = _binary_values(a, b, "mul")
    out = Tensor(av * bv)

    def backprop(g):
        if isinstance(a, Tensor):
            a._accum(_reduce_to(g * bv, av.shape))
        if isinstance(b, Tensor):
            b._accum(_reduce_to(g * av, bv.shape))

    out._parents = tuple(t for t in (a, b) if isinstance(t, Tensor))
    out._backprop = backprop
    return out


def div(a, b) -> Tensor:
    av, bv = _binary_values(a, b, "div")
    out = Tensor(av / bv)

    def backprop(g):
        if isinstance(a, Tensor):
            a._accum(_reduce_to(g / bv, av.shape))
        if isinstance(b, Tensor):
            b._accum(_reduce_to(-g * av / (bv * bv), bv.shape))

    out._parents = tuple(t for t in (a, b) if isinstance(t, Tensor))
    out._backprop = backprop
    _check_finite(out.value, "div")
    return out


def matmul(a, b) -> Tensor:
    av, bv = _value_of(a), _value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ConfigError(f"matmul needs rank >= 2 operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ConfigError(f"matmul: inner extents differ, {av.shape} vs {bv.shape}")
    out = Tensor(np.matmul(av, bv))

    def backprop(g):
        if isinstance(a, Tensor):
            a._accum(_reduce_to(np.matmul(g, bv.swapaxes(-1, -2)), av.shape))
        if isinstance(b, Tensor):
            b._accum(_reduce_to(np.matmul(av.swapaxes(-1, -2), g), bv.shape))

    out._parents = tuple(t for t in (a, b) if isinstance(t, Tensor))
    out._backprop = backprop
    return out


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.value.reshape(shape), (x,))
    out._backprop = lambda g: x._accum(g.reshape(x.value.shape))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(x.value.transpose(axes), (x,))
    out._backprop = lambda g: x._accum(g.transpose(inv))
    return out


def take(x: Tensor, key) -> Tensor:
    """Basic slicing (slices and integer indices only, no fancy indexing)."""
    out = Tensor(x.value[key], (x,))

    def backprop(g):
        dx = np.zeros(x.value.shape, dtype=x.value.dtype)
        dx[key] = g
        x._accum(dx)

    out._backprop = backprop
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    values = [_value_of(t) for t in tensors]
    out = Tensor(np.concatenate(values, axis=axis))
    offsets = np.cumsum([0] + [v.shape[axis] for v in values])

    def backprop(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if isinstance(t, Tensor):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    out._parents = tuple(t for t in tensors if isinstance(t, Tensor))
    out._backprop = backprop
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.value.sum(axis=axis, keepdims=keepdims), (x,))

    def backprop(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.value.shape))

    out._backprop = backprop
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.value.size if axis is None else np.prod([x.value.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    xv = x.value
    # stable two-sided form, never exponentiates a positive number
    e = np.exp(-np.abs(xv))
    y = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xv.dtype)
    out = Tensor(y, (x,))
    out._backprop = lambda g: x._accum(g * y * (1.0 - y))
    return out


def tlog(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.value), (x,))
    out._backprop = lambda g: x._accum(g / x.value)
    _check_finite(out.value, "log")
    return out


def texp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    out = Tensor(y, (x,))
    out._backprop = lambda g: x._accum(g * y)
    return out


def gelu(x: Tensor) -> Tensor:
    out = Tensor(K.gelu_fwd(x.value), (x,))
    out._backprop = lambda g: x._accum(K.gelu_bwd(x.value, np.ascontiguousarray(g)))
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, (x,))

    def backprop(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accum(y * (g - dot))

    out._backprop = backprop
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y, (x,))

    def backprop(g):
        x._accum(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    out._backprop = backprop
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Row-wise layer normalization of a rank-2 tensor.

    Zero-variance rows normalize to zeros (epsilon floor in the kernel),
    so padded rows never produce NaN.
    """
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ConfigError(f"layernorm: got x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    y, mean_, rstd = K.layernorm_fwd(x.value, gain.value, bias.value)
    out = Tensor(y, (x, gain, bias))

    def backprop(g):
        dx, dgain, dbias = K.layernorm_bwd(x.value, gain.value, mean_, rstd, np.ascontiguousarray(g))
        x._accum(dx)
        gain._accum(dgain)
        bias._accum(dbias)

    out._backprop = backprop
    return out


# ---------------------------------------------------------------------------
# softmax-family fused ops
# ---------------------------------------------------------------------------


def masked_softmax(scores: Tensor, limits: np.ndarray, scale: float) -> Tensor:
    """Softmax over the first limits[r] columns of each row of scores*scale.

    Output columns at or beyond a row's limit are exactly zero, which is
    what makes fixed-shape attention insensitive to masked-out content.
    """
    flat = scores.value.reshape(-1, scores.shape[-1])
    probs = K.masked_softmax(np.ascontiguousarray(flat), limits.reshape(-1), scale)
    out = Tensor(probs.reshape(scores.value.shape), (scores,))

    def backprop(g):
        d = K.masked_softmax_bwd(probs, np.ascontiguousarray(g.reshape(probs.shape)))
        scores._accum(d.reshape(scores.value.shape) * scores.dtype.type(scale))

    out._backprop = backprop
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood in nats for integer targets."""
    if logits.ndim != 2:
        raise ConfigError(f"cross_entropy wants rank-2 logits, got {logits.shape}")
    flat = np.ascontiguousarray(logits.value)
    targets = np.ascontiguousarray(targets.reshape(-1).astype(np.int64))
    losses, probs = K.xent_fwd(flat, targets)
    out = Tensor(losses, (logits,))

    def backprop(g):
        if not np.all(g == g.flat[0]):
            raise UsageError("cross_entropy backward expects a uniform upstream gradient")
        logits._accum(K.xent_bwd(probs, targets, float(g.flat[0])))

    out._backprop = backprop
    return out


# ---------------------------------------------------------------------------
# lookups and masks
# ---------------------------------------------------------------------------


def take_rows(src: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather out[i] = src[idx[i]]; the embedding lookup primitive."""
    if src.ndim != 2:
        raise ConfigError(f"take_rows wants a rank-2 source, got {src.shape}")
    idx_flat = np.ascontiguousarray(idx.reshape(-1).astype(np.int64))
    got = K.gather_rows(src.value, idx_flat)
    out = Tensor(got.reshape(idx.shape + (src.shape[1],)), (src,))

    def backprop(g):
        g2 = np.ascontiguousarray(g.reshape(idx_flat.shape[0], src.shape[1]))
        src._accum(K.scatter_add_rows(g2, idx_flat, src.shape[0]))

    out._backprop = backprop
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigError(f"embedding ids out of range for table {table.shape}")
    return take_rows(table, ids)


def dropout(x: Tensor, p: float, key: int, training: bool) -> Tensor:
    """Inverted dropout; the identity when p == 0 or not training."""
    if not training or p <= 0.0:
        return x
    mask = K.dropout_mask(x.value.size, p, key, dtype=x.value.dtype).reshape(x.value.shape)
    return mul(x, mask)


def masked_fill(x: Tensor, keep: np.ndarray, fill) -> Tensor:
    """x where keep == 1, else fill (which may itself be a tensor)."""
    keep = keep.astype(x.value.dtype, copy=False)
    return add(mul(x, keep), mul(fill, 1.0 - keep))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class Parameter:
    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(value)
        self.trainable = trainable

    @property
    def value(self) -> np.ndarray:
        return self.tensor.value

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.value.shape)})"


class ParameterStore:
    """Ordered, name-unique collection of parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def trainable(self):
        return [p for p in self._params.values() if p.trainable]

    def count(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(f, params, rng=None, n_coords=None, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must rebuild its graph from the parameters' current values on
    every call and be deterministic. Error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    for p in params:
        if p.value.dtype != np.float64:
            raise UsageError(f"grad_check requires float64 parameters, {p.name} is {p.value.dtype}")
        p.tensor.grad = None
    loss = f()
    backward(loss)
    analytic = {p.name: (np.zeros_like(p.value) if p.grad is None else p.grad.copy()) for p in params}

    coords = []
    for p in params:
        for i in range(p.value.size):
            coords.append((p, i))
    if n_coords is not None and n_coords < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        picks = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in picks]

    worst = 0.0
    for p, i in coords:
        flat = p.value.reshape(-1)
        saved = flat[i]
        flat[i] = saved + eps
        up = float(f().value)
        flat[i] = saved - eps
        down = float(f().value)
        flat[i] = saved
        numeric = (up - down) / (2.0 * eps)
        err = abs(analytic[p.name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
