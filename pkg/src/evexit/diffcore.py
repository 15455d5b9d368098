"""Minimal reverse-mode differentiation over float64 tensors.

Just enough machinery to train toy multi-exit networks and differentiate
the evidential and divergence losses: a `Tensor` wraps a float64 array and
remembers how it was produced; `backward` walks the graph once in reverse
topological order, summing a contribution per downstream use.

Broadcasting is deliberately restricted: binary primitives accept equal
shapes or a scalar (Python number / 0-d tensor) on one side. Anything
else needs an explicit `expand_last` or `reshape`. Array arithmetic is
delegated to numpy; reductions use numpy's deterministic summation, so
repeated runs on one platform are bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ContractViolation, NumericError

Array = np.ndarray


def _as_array(values) -> Array:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """A node in the differentiation graph.

    `data` is the cached forward value, `grad` the gradient accumulator
    (allocated during backward, same shape as `data`). Leaves carry
    `requires_grad`; interior nodes keep references to their parents and
    a closure that maps the output gradient to parent contributions.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), vjp=None):
        data = _as_array(values)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values in operation '{op}'")
        self.data = data
        self.grad = None
        self.op = op
        self._parents = parents
        self._vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph (no gradient flows back)."""
        return Tensor(self.data, op="detach")

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # Operator sugar; scalars are handled inside the primitives.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ConfigurationError(
        f"{op}: shapes {a.shape} and {b.shape} do not conform "
        "(equal shapes or scalar-with-tensor only)")


def _reduce_to(grad: Array, shape: tuple[int, ...]) -> Array:
    # Gradient for a scalar operand of a broadcast binary op.
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary_shapes("add", a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor(a.data + b.data, op="add", parents=(a, b), vjp=vjp)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary_shapes("sub", a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor(a.data - b.data, op="sub", parents=(a, b), vjp=vjp)


def mul(a, b) -> Tensor:
    """Elementwise product; with a scalar operand this is scalar-multiply."""
    a, b = _lift(a), _lift(b)
    _check_binary_shapes("mul", a, b)

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor(a.data * b.data, op="mul", parents=(a, b), vjp=vjp)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary_shapes("div", a, b)

    def vjp(g):
        return (_reduce_to(g / b.data, a.shape),
                _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return Tensor(a.data / b.data, op="div", parents=(a, b), vjp=vjp)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(
            f"matmul: shapes {a.shape} @ {b.shape} do not conform (2-D only)")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, op="matmul", parents=(a, b), vjp=vjp)


def relu(x) -> Tensor:
    x = _lift(x)

    def vjp(g):
        return (g * (x.data > 0),)

    return Tensor(np.maximum(x.data, 0.0), op="relu", parents=(x,), vjp=vjp)


def _softplus_values(x: Array) -> Array:
    # ln(1 + exp(x)) rewritten so large x cannot overflow:
    # for x > 30 use x + ln(1 + exp(-x)).
    out = np.where(x > 30.0,
                   x + np.log1p(np.exp(-np.abs(x))),
                   np.log1p(np.exp(np.minimum(x, 30.0))))
    return np.asarray(out, dtype=np.float64)


def _sigmoid_values(x: Array) -> Array:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x) -> Tensor:
    x = _lift(x)

    def vjp(g):
        return (g * _sigmoid_values(x.data),)

    return Tensor(_softplus_values(x.data), op="softplus", parents=(x,), vjp=vjp)


def exp(x) -> Tensor:
    x = _lift(x)
    with np.errstate(over="ignore"):
        values = np.exp(x.data)
    out = Tensor(values, op="exp", parents=(x,), vjp=None)

    def vjp(g):
        return (g * out.data,)

    out._vjp = vjp
    return out


def log(x) -> Tensor:
    x = _lift(x)

    def vjp(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.log(x.data)
    return Tensor(values, op="log", parents=(x,), vjp=vjp)


def square(x) -> Tensor:
    x = _lift(x)

    def vjp(g):
        return (g * (2.0 * x.data),)

    return Tensor(x.data * x.data, op="square", parents=(x,), vjp=vjp)


def softmax(x) -> Tensor:
    """Softmax over the last axis (shift-stabilized)."""
    x = _lift(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out_values = ex / ex.sum(axis=-1, keepdims=True)
    out = Tensor(out_values, op="softmax", parents=(x,), vjp=None)

    def vjp(g):
        y = out.data
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    out._vjp = vjp
    return out


def tsum(x) -> Tensor:
    """Full reduction to a scalar."""
    x = _lift(x)

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(np.sum(x.data), op="sum", parents=(x,), vjp=vjp)


def sum_last(x) -> Tensor:
    """Reduce the last axis, keeping it as size 1."""
    x = _lift(x)
    if x.data.ndim == 0:
        raise ConfigurationError("sum_last: scalar input has no last axis")

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(np.sum(x.data, axis=-1, keepdims=True), op="sum_last",
                  parents=(x,), vjp=vjp)


def mean(x) -> Tensor:
    x = _lift(x)
    n = x.data.size

    def vjp(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return Tensor(np.sum(x.data) / n, op="mean", parents=(x,), vjp=vjp)


def expand_last(x, k: int) -> Tensor:
    """Explicitly repeat a trailing size-1 axis `k` times."""
    x = _lift(x)
    if x.data.ndim == 0 or x.shape[-1] != 1:
        raise ConfigurationError(
            f"expand_last: trailing axis of {x.shape} is not size 1")

    def vjp(g):
        return (np.sum(g, axis=-1, keepdims=True),)

    return Tensor(np.repeat(x.data, k, axis=-1), op="expand_last",
                  parents=(x,), vjp=vjp)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ConfigurationError(
            f"reshape: cannot view {x.shape} as {shape}")

    def vjp(g):
        return (g.reshape(x.shape),)

    return Tensor(x.data.reshape(shape), op="reshape", parents=(x,), vjp=vjp)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every reachable tensor that requires gradients.

    Gradient accumulators are (re)zeroed for the touched subgraph, then each
    node's contribution is pushed to its parents exactly once per use.
    """
    if loss.data.shape != ():
        raise ContractViolation(
            f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None or not node.requires_grad:
            continue
        contributions = node._vjp(node.grad)
        for parent, contribution in zip(node._parents, contributions):
            if parent.requires_grad:
                parent.grad += contribution


def gradients(loss: Tensor, wrt) -> list[Array]:
    """Run backward and return gradient copies for the given leaves."""
    backward(loss)
    out = []
    for t in wrt:
        out.append(np.zeros_like(t.data) if t.grad is None else t.grad.copy())
    return out


def grad_check(f, point, step: float = 1e-5, max_coords: int = 100,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of a scalar function with central differences.

    `point` is one array-like or a list of them; `f` receives matching
    leaf tensors and must return a scalar tensor. Returns the max over
    sampled coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    if step <= 0:
        raise ConfigurationError("grad_check: step must be positive")
    single = not isinstance(point, (list, tuple))
    points = [point] if single else list(point)
    leaves = [Tensor(p, requires_grad=True) for p in points]
    analytic = gradients(f(*leaves), leaves)

    coords = [(i, idx) for i, leaf in enumerate(leaves)
              for idx in np.ndindex(leaf.data.shape)]
    if len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in picked]

    def evaluate(values_list) -> float:
        out = f(*[Tensor(v) for v in values_list]).item()
        if not np.isfinite(out):
            raise NumericError("grad_check: non-finite value at probe point")
        return out

    worst = 0.0
    base = [leaf.data.copy() for leaf in leaves]
    for which, idx in coords:
        plus = [b.copy() for b in base]
        minus = [b.copy() for b in base]
        plus[which][idx] += step
        minus[which][idx] -= step
        numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
        err = abs(analytic[which][idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
