"""Reverse-mode differentiation over dense numpy arrays.

Expressions are built eagerly (define-by-run): every operator computes its
value immediately and records a closure that propagates adjoints to its
parents. Calling :meth:`Tensor.backward` on a scalar result runs the chain
rule over the recorded graph in reverse topological order.

Conventions kept deliberately strict so the gradient code stays auditable:

* matmul/transpose operate on 2-D arrays only;
* broadcasting is limited to python-scalar-with-tensor and row-vector
  (last-axis) operands of ``add``/``subtract``/``multiply``; anything else
  must be an explicit ``reshape``/``concat``;
* every forward result is checked for NaN/Inf and raises ``NumericError``;
* graph traversal order is derived from construction order (tuples, not
  sets), so two runs over the same graph produce bit-identical gradients.

Backward closures capture only local arrays, never the result tensor, so
expression graphs hold no reference cycles and free promptly by refcount
as soon as the loss goes out of scope.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as _sp

from .errors import ConfigError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)


def _check_finite(data: np.ndarray, op: str) -> None:
    # min+max is NaN- and Inf-propagating, cheaper than a full isfinite pass
    if data.size and not np.isfinite(data.min() + data.max()):
        raise NumericError(f"{op}: forward produced non-finite values")


class Tensor:
    """Dense real tensor participating in the autodiff graph.

    ``data`` must be treated as immutable once the tensor exists; parameter
    updates go through :meth:`assign`, which rebinds a fresh array. ``grad``
    is populated by :meth:`backward` for leaves created with
    ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item: tensor is not scalar")
        return float(self.data.reshape(()))

    def assign(self, data) -> None:
        """Rebind the value (parameter updates); shape must be unchanged."""
        arr = np.asarray(data, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign: shape {arr.shape} != {self.data.shape}")
        self.data = arr

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the full set lives in module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError("backward: root must be a scalar")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)


def _topo_order(root: Tensor) -> list:
    # Iterative post-order DFS; graphs can exceed Python's recursion limit.
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(node: Tensor, contribution: np.ndarray) -> None:
    # Accumulation rebinds rather than mutating, so aliasing a child's grad
    # array on the first contribution is safe.
    if node.grad is None:
        node.grad = contribution
    else:
        node.grad = node.grad + contribution


def _result(data, op, parents, fn):
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=fn)
    return Tensor(data)


def constant(data) -> Tensor:
    """A leaf that never receives gradients."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(data, copy=True), requires_grad=True)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad

    def fn(g):
        if ga:
            _accumulate(a, g @ b_data.T)
        if gb:
            _accumulate(b, a_data.T @ g)

    return _result(a_data @ b_data, "matmul", (a, b), fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D operand, got {a.shape}")

    def fn(g):
        _accumulate(a, g.T)

    return _result(a.data.T, "transpose", (a,), fn)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _binary_mode(a_shape, b_shape, op):
    """Classify the allowed operand pairing: equal shapes or row-vector."""
    if a_shape == b_shape:
        return "equal"
    # Row-vector against the last axis of a 2-D tensor (bias/gain style).
    if len(a_shape) == 2 and b_shape in ((a_shape[1],), (1, a_shape[1])):
        return "row"
    raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not conform")


def _row_reduce(g, b_shape):
    return g.sum(axis=0).reshape(b_shape)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)

        def fn_s(g):
            _accumulate(a, g)

        return _result(a.data + scalar, "add", (a,), fn_s)

    mode = _binary_mode(a.shape, b.shape, "add")
    b_shape = b.shape
    ga, gb = a.requires_grad, b.requires_grad
    data = a.data + (b.data if mode == "equal" else b.data.reshape(1, -1))

    def fn(g):
        if ga:
            _accumulate(a, g)
        if gb:
            _accumulate(b, g if mode == "equal" else _row_reduce(g, b_shape))

    return _result(data, "add", (a, b), fn)


def subtract(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)

        def fn_s(g):
            _accumulate(a, g)

        return _result(a.data - scalar, "subtract", (a,), fn_s)

    mode = _binary_mode(a.shape, b.shape, "subtract")
    b_shape = b.shape
    ga, gb = a.requires_grad, b.requires_grad
    data = a.data - (b.data if mode == "equal" else b.data.reshape(1, -1))

    def fn(g):
        if ga:
            _accumulate(a, g)
        if gb:
            _accumulate(b, -g if mode == "equal" else -_row_reduce(g, b_shape))

    return _result(data, "subtract", (a, b), fn)


def multiply(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)

        def fn_s(g):
            _accumulate(a, g * scalar)

        return _result(a.data * scalar, "multiply", (a,), fn_s)

    mode = _binary_mode(a.shape, b.shape, "multiply")
    a_data = a.data
    b_shape = b.shape
    ga, gb = a.requires_grad, b.requires_grad
    b_view = b.data if mode == "equal" else b.data.reshape(1, -1)

    def fn(g):
        if ga:
            _accumulate(a, g * b_view)
        if gb:
            _accumulate(b, g * a_data if mode == "equal" else _row_reduce(g * a_data, b_shape))

    return _result(a_data * b_view, "multiply", (a, b), fn)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    a_shape = a.shape

    def fn(g):
        _accumulate(a, g.reshape(a_shape))

    return _result(a.data.reshape(shape), "reshape", (a,), fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty operand list")
    ndim = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != ndim:
            raise ShapeError("concat: operands differ in rank")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _result(data, "concat", tuple(tensors), fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis >= a.data.ndim or stop > a.shape[axis] or start < 0 or start >= stop:
        raise ShapeError(f"slice: [{start}:{stop}] on axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    a_shape, a_dtype = a.shape, a.dtype

    def fn(g):
        full = np.zeros(a_shape, dtype=a_dtype)
        full[idx] = g
        _accumulate(a, full)

    return _result(a.data[idx], "slice", (a,), fn)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a_shape, a_dtype = a.shape, a.dtype
    if axis is None:
        n = a.data.size

        def fn_all(g):
            _accumulate(a, np.full(a_shape, float(g) / n, dtype=a_dtype))

        return _result(np.asarray(a.data.mean()), "mean", (a,), fn_all)

    if axis >= a.data.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for {a.shape}")
    n = a.shape[axis]

    def fn(g):
        _accumulate(a, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _result(a.data.mean(axis=axis), "mean", (a,), fn)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    a_data = a.data

    def fn(g):
        _accumulate(a, g * (a_data > 0))

    return _result(np.maximum(a_data, 0.0), "relu", (a,), fn)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any x and vectorizes in one pass
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_values(a.data)

    def fn(g):
        _accumulate(a, g * s * (1.0 - s))

    return _result(s, "sigmoid", (a,), fn)


# tanh-form GELU: gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))

    def fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner))

    return _result(0.5 * x * (1.0 + t), "gelu", (a,), fn)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(a, s * (g - dot))

    return _result(s, "softmax", (a,), fn)


LAYERNORM_EPS = 1e-5


def layernorm(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def fn(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * y).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - g_mean - y * gy_mean))

    return _result(y, "layernorm", (a,), fn)


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: scales by 1/(1-p) at train time, identity at eval."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype)
    scale = 1.0 / (1.0 - p)

    def fn(g):
        _accumulate(a, g * keep * scale)

    return _result(a.data * keep * scale, "dropout", (a,), fn)


# ---------------------------------------------------------------------------
# gather / scatter (graph message passing)
# ---------------------------------------------------------------------------


def _segment_sum(rows: np.ndarray, idx: np.ndarray, num_segments: int) -> np.ndarray:
    # Sparse matmul beats np.add.at by ~5x on the message-passing hot path;
    # CSR row sums run in fixed index order, so results stay deterministic.
    mat = _sp.csr_matrix(
        (np.ones(idx.size, dtype=rows.dtype), (idx, np.arange(idx.size))),
        shape=(num_segments, idx.size),
    )
    return np.asarray(mat @ rows)


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows of a 2-D tensor; ``out[e] = a[index[e]]``."""
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: expects 2-D source and 1-D index, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows: index out of range")
    rows = a.shape[0]

    def fn(g):
        _accumulate(a, _segment_sum(g, idx, rows))

    return _result(a.data[idx], "gather_rows", (a,), fn)


def scatter_sum(a: Tensor, index, num_segments: int) -> Tensor:
    """Sum rows of a 2-D tensor into segments; ``out[s] = sum(a[e] for index[e]==s)``."""
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1 or idx.size != a.shape[0]:
        raise ShapeError(f"scatter_sum: index length {idx.shape} does not match rows {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_segments):
        raise ShapeError("scatter_sum: index out of range")

    def fn(g):
        _accumulate(a, g[idx])

    return _result(_segment_sum(a.data, idx, num_segments), "scatter_sum", (a,), fn)


# ---------------------------------------------------------------------------
# losses and mask regularizers
# ---------------------------------------------------------------------------


def cross_entropy_logits(logits: Tensor, targets, valid=None) -> Tensor:
    """Mean softmax cross-entropy against probability-row targets.

    ``targets`` is a constant array of per-row probability vectors (one-hot
    for hard labels). ``valid`` optionally masks rows out of both the mean
    and the gradient (padded batch entries).
    """
    t = np.asarray(targets, dtype=logits.dtype)
    if logits.data.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(
            f"cross_entropy_logits: targets {t.shape} do not match logits {logits.shape}"
        )
    if valid is None:
        mask = np.ones(logits.shape[0], dtype=logits.dtype)
    else:
        mask = np.asarray(valid, dtype=logits.dtype).reshape(-1)
        if mask.shape[0] != logits.shape[0]:
            raise ShapeError("cross_entropy_logits: valid mask length mismatch")
    n_valid = float(mask.sum())
    if n_valid == 0:
        raise ShapeError("cross_entropy_logits: no valid rows")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    per_row = (lse.reshape(-1) - (t * z).sum(axis=-1)) * mask

    def fn(g):
        p = np.exp(z - lse)
        _accumulate(logits, float(g) * mask[:, None] * (p - t) / n_valid)

    return _result(np.asarray(per_row.sum() / n_valid), "cross_entropy_logits", (logits,), fn)


def binary_entropy_logits(a: Tensor) -> Tensor:
    """Elementwise Bernoulli entropy of sigmoid(x), computed stably.

    H(x) = p*softplus(-x) + (1-p)*softplus(x) with p = sigmoid(x);
    dH/dx = -x * p * (1-p).
    """
    x = a.data
    sp_pos = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)  # softplus(x)
    sp_neg = sp_pos - x  # softplus(-x)
    p = _sigmoid_values(x)

    def fn(g):
        _accumulate(a, g * (-x * p * (1.0 - p)))

    return _result(p * sp_neg + (1.0 - p) * sp_pos, "binary_entropy_logits", (a,), fn)


OPERATOR_NAMES = (
    "matmul",
    "transpose",
    "add",
    "subtract",
    "multiply",
    "concat",
    "slice",
    "mean",
    "relu",
    "sigmoid",
    "gelu",
    "softmax",
    "layernorm",
    "dropout",
    "gather_rows",
    "scatter_sum",
    "cross_entropy_logits",
    "binary_entropy_logits",
)
