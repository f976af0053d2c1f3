"""Reverse-mode differentiation over a recorded tape of numpy array operations.

Every value computed through a `Tape` is a `Var` holding a float64 array. Each
recorded operation stores, per parent, a function mapping the adjoint of its
output to the adjoint contribution of that parent (a vector-Jacobian product).
Nodes are appended in creation order, so replaying the tape in reverse is a
valid topological order for backpropagation.

The module level functions (`exp`, `cos`, `dense`, `stack`, ...) accept either
plain numpy arrays or `Var`s, which lets environment models and networks be
written once and evaluated both with and without a tape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from pyspil.errors import NumericError, UsageError

ArrayLike = Union[np.ndarray, float, int]
Operand = Union["Var", ArrayLike]
VJP = Callable[[np.ndarray], np.ndarray]

ACTIVATIONS = ("relu", "tanh", "identity")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that broadcasting added or stretched to reach `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


class Tape:
    """An append-only record of primitive operations.

    Tapes are not thread safe. Build one tape per objective evaluation; distinct
    tapes share no state.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value: ArrayLike) -> "Var":
        """Register an input whose gradient can be requested."""
        return self._record(np.array(value, dtype=np.float64), (), "variable", True)

    def constant(self, value: ArrayLike) -> "Var":
        return self._record(np.array(value, dtype=np.float64), (), "constant", False)

    def _record(
        self,
        value: np.ndarray,
        parents: tuple[tuple["Var", VJP], ...],
        op: str,
        requires_grad: Optional[bool] = None,
    ) -> "Var":
        if requires_grad is None:
            requires_grad = any(parent.requires_grad for parent, _ in parents)
        node = Var(self, value, parents, op, len(self.nodes), requires_grad)
        self.nodes.append(node)
        return node

    def lift(self, x: Operand) -> "Var":
        if isinstance(x, Var):
            if x.tape is not self:
                raise UsageError("cannot mix values recorded on different tapes")
            return x
        return self.constant(x)

    def first_non_finite(self, upto: Optional[int] = None) -> Optional["Var"]:
        nodes = self.nodes if upto is None else self.nodes[: upto + 1]
        for node in nodes:
            if not np.all(np.isfinite(node.value)):
                return node
        return None

    def gradient(
        self, root: "Var", wrt: Union["Var", Sequence["Var"]]
    ) -> Union[np.ndarray, list[np.ndarray]]:
        """Backpropagate from the scalar `root` and return d(root)/d(wrt).

        Args:
            root: A single-element value recorded on this tape.
            wrt: One variable or a sequence of variables recorded on this tape.

        Raises:
            UsageError: root is not a scalar or a requested variable lives elsewhere.
            NumericError: root is not finite. The message names the first non-finite node.

        Returns:
            An array shaped like `wrt` (or a list of them, one per requested variable).
        """
        single = isinstance(wrt, Var)
        targets = [wrt] if single else list(wrt)
        for target in [root, *targets]:
            if target.tape is not self:
                raise UsageError("value was not recorded on this tape")
        if root.value.size != 1:
            raise UsageError(f"root must be a scalar, got shape {root.value.shape}")
        if not np.all(np.isfinite(root.value)):
            bad = self.first_non_finite(root.index)
            raise NumericError(
                f"root is not finite; first non-finite value at node {bad.index} ({bad.op})",
                node=bad.index,
            )

        wanted = {t.index for t in targets}
        found: dict[int, np.ndarray] = {}
        adjoints: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.index + 1]):
            grad = adjoints.pop(node.index, None)
            if grad is None:
                continue
            if node.index in wanted:
                found[node.index] = grad
            for parent, vjp in node.parents:
                if not parent.requires_grad:
                    continue
                contribution = vjp(grad)
                if parent.index in adjoints:
                    adjoints[parent.index] = adjoints[parent.index] + contribution
                else:
                    adjoints[parent.index] = contribution

        grads = [
            np.array(found.get(t.index, np.zeros_like(t.value)), dtype=np.float64).reshape(t.value.shape)
            for t in targets
        ]
        return grads[0] if single else grads


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "value", "parents", "op", "index", "requires_grad")
    # ndarray (op) Var defers to the reflected Var method.
    __array_ufunc__ = None

    def __init__(self, tape, value, parents, op, index, requires_grad):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.op = op
        self.index = index
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape}, index={self.index})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def item(self) -> float:
        return float(self.value.reshape(()))

    def _unary(self, value: np.ndarray, derivative: np.ndarray, op: str) -> "Var":
        return self.tape._record(value, ((self, lambda g: g * derivative),), op)

    # arithmetic

    def __add__(self, other: Operand) -> "Var":
        other = self.tape.lift(other)
        a_shape, b_shape = self.value.shape, other.value.shape
        return self.tape._record(
            self.value + other.value,
            (
                (self, lambda g: _unbroadcast(g, a_shape)),
                (other, lambda g: _unbroadcast(g, b_shape)),
            ),
            "add",
        )

    def __radd__(self, other: Operand) -> "Var":
        return self.tape.lift(other) + self

    def __neg__(self) -> "Var":
        return self.tape._record(-self.value, ((self, lambda g: -g),), "neg")

    def __sub__(self, other: Operand) -> "Var":
        other = self.tape.lift(other)
        a_shape, b_shape = self.value.shape, other.value.shape
        return self.tape._record(
            self.value - other.value,
            (
                (self, lambda g: _unbroadcast(g, a_shape)),
                (other, lambda g: -_unbroadcast(g, b_shape)),
            ),
            "sub",
        )

    def __rsub__(self, other: Operand) -> "Var":
        return self.tape.lift(other) - self

    def __mul__(self, other: Operand) -> "Var":
        other = self.tape.lift(other)
        a, b = self.value, other.value
        return self.tape._record(
            a * b,
            (
                (self, lambda g: _unbroadcast(g * b, a.shape)),
                (other, lambda g: _unbroadcast(g * a, b.shape)),
            ),
            "mul",
        )

    def __rmul__(self, other: Operand) -> "Var":
        return self.tape.lift(other) * self

    def __truediv__(self, other: Operand) -> "Var":
        other = self.tape.lift(other)
        a, b = self.value, other.value
        out = a / b
        return self.tape._record(
            out,
            (
                (self, lambda g: _unbroadcast(g / b, a.shape)),
                (other, lambda g: _unbroadcast(-g * out / b, b.shape)),
            ),
            "div",
        )

    def __rtruediv__(self, other: Operand) -> "Var":
        return self.tape.lift(other) / self

    def __pow__(self, exponent: float) -> "Var":
        if isinstance(exponent, Var):
            raise UsageError("only constant exponents are supported")
        x = self.value
        return self._unary(x**exponent, exponent * x ** (exponent - 1), "pow")

    def __matmul__(self, other: Operand) -> "Var":
        other = self.tape.lift(other)
        a, b = self.value, other.value

        if a.ndim > 2 or b.ndim > 2:
            raise UsageError("matmul supports vectors and matrices only")

        def grad_a(g):
            if b.ndim == 1:
                return np.outer(g, b) if a.ndim == 2 else g * b
            return g @ b.T

        def grad_b(g):
            if a.ndim == 1:
                return np.outer(a, g) if b.ndim == 2 else g * a
            return a.T @ g

        return self.tape._record(a @ b, ((self, grad_a), (other, grad_b)), "matmul")

    # structure

    def __getitem__(self, key) -> "Var":
        shape = self.value.shape

        def vjp(g):
            out = np.zeros(shape, dtype=np.float64)
            np.add.at(out, key, g)
            return out

        return self.tape._record(self.value[key], ((self, vjp),), "index")

    def reshape(self, *shape) -> "Var":
        old = self.value.shape
        return self.tape._record(
            self.value.reshape(*shape), ((self, lambda g: g.reshape(old)),), "reshape"
        )

    def sum(self, axis: Optional[int] = None) -> "Var":
        shape = self.value.shape

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return self.tape._record(self.value.sum(axis=axis), ((self, vjp),), "sum")

    def mean(self, axis: Optional[int] = None) -> "Var":
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis) * (1.0 / count)


# numpy/Var dispatching primitives


def exp(x: Operand):
    if isinstance(x, Var):
        out = np.exp(x.value)
        return x._unary(out, out, "exp")
    return np.exp(x)


def log(x: Operand):
    if isinstance(x, Var):
        return x._unary(np.log(x.value), 1.0 / x.value, "log")
    return np.log(x)


def sqrt(x: Operand):
    """Square root with the derivative at exactly zero fixed to 0."""
    if isinstance(x, Var):
        out = np.sqrt(x.value)
        with np.errstate(divide="ignore"):
            slope = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return x._unary(out, slope, "sqrt")
    return np.sqrt(x)


def cos(x: Operand):
    if isinstance(x, Var):
        return x._unary(np.cos(x.value), -np.sin(x.value), "cos")
    return np.cos(x)


def sin(x: Operand):
    if isinstance(x, Var):
        return x._unary(np.sin(x.value), np.cos(x.value), "sin")
    return np.sin(x)


def tanh(x: Operand):
    if isinstance(x, Var):
        out = np.tanh(x.value)
        return x._unary(out, 1.0 - out * out, "tanh")
    return np.tanh(x)


def sigmoid(x: Operand):
    if isinstance(x, Var):
        out = _sigmoid(x.value)
        return x._unary(out, out * (1.0 - out), "sigmoid")
    return _sigmoid(np.asarray(x, dtype=np.float64))


def softplus(x: Operand):
    """log(1 + exp(x)), stable for any finite x."""
    if isinstance(x, Var):
        return x._unary(np.logaddexp(0.0, x.value), _sigmoid(x.value), "softplus")
    return np.logaddexp(0.0, x)


def relu(x: Operand):
    """max(x, 0); the subgradient at exactly 0 is 0."""
    if isinstance(x, Var):
        return x._unary(np.maximum(x.value, 0.0), (x.value > 0).astype(np.float64), "relu")
    return np.maximum(x, 0.0)


def _select(a: Operand, b: Operand, take_a: Callable[[np.ndarray, np.ndarray], np.ndarray], op: str):
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = tape.lift(a), tape.lift(b)
    mask = take_a(a.value, b.value)
    out = np.where(mask, a.value, b.value)
    return tape._record(
        out,
        (
            (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), a.value.shape)),
            (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), b.value.shape)),
        ),
        op,
    )


def maximum(a: Operand, b: Operand):
    """Elementwise maximum; ties route the gradient to `a`."""
    if isinstance(a, Var) or isinstance(b, Var):
        return _select(a, b, lambda x, y: x >= y, "maximum")
    return np.maximum(a, b)


def minimum(a: Operand, b: Operand):
    """Elementwise minimum; ties route the gradient to `a`."""
    if isinstance(a, Var) or isinstance(b, Var):
        return _select(a, b, lambda x, y: x <= y, "minimum")
    return np.minimum(a, b)


def clip(x: Operand, lower: Operand, upper: Operand):
    return minimum(maximum(x, lower), upper)


def _tape_of(values: Iterable[Operand]) -> Optional[Tape]:
    for value in values:
        if isinstance(value, Var):
            return value.tape
    return None


def stack(values: Sequence[Operand], axis: int = 0):
    tape = _tape_of(values)
    if tape is None:
        return np.stack(values, axis=axis)
    lifted = [tape.lift(v) for v in values]
    parents = tuple(
        (v, (lambda i: lambda g: np.take(g, i, axis=axis))(i)) for i, v in enumerate(lifted)
    )
    return tape._record(np.stack([v.value for v in lifted], axis=axis), parents, "stack")


def concatenate(values: Sequence[Operand], axis: int = -1):
    tape = _tape_of(values)
    if tape is None:
        return np.concatenate(values, axis=axis)
    lifted = [tape.lift(v) for v in values]
    bounds = np.cumsum([0] + [v.value.shape[axis] for v in lifted])
    parents = tuple(
        (v, (lambda lo, hi: lambda g: np.take(g, np.arange(lo, hi), axis=axis))(bounds[i], bounds[i + 1]))
        for i, v in enumerate(lifted)
    )
    return tape._record(
        np.concatenate([v.value for v in lifted], axis=axis), parents, "concatenate"
    )


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def _activation_slope(out: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (out > 0).astype(np.float64)
    if activation == "tanh":
        return 1.0 - out * out
    return np.ones_like(out)


def dense(x: Operand, weight: Operand, bias: Operand, activation: str = "identity"):
    """activation(x @ weight + bias) as a single recorded node.

    Only the activated output is kept on the tape, which bounds the memory a long
    rollout needs to one array per layer per step.
    """
    if activation not in ACTIVATIONS:
        raise UsageError(f"unknown activation {activation!r}")
    tape = _tape_of((x, weight, bias))
    if tape is None:
        return _activate(np.asarray(x) @ weight + bias, activation)

    x, weight, bias = tape.lift(x), tape.lift(weight), tape.lift(bias)
    xv, wv = x.value, weight.value
    out = _activate(xv @ wv + bias.value, activation)
    slope = _activation_slope(out, activation)

    def grad_x(g):
        return (g * slope) @ wv.T

    def grad_w(g):
        gz = g * slope
        return np.outer(xv, gz) if xv.ndim == 1 else xv.T @ gz

    def grad_b(g):
        gz = g * slope
        return gz if gz.ndim == 1 else gz.sum(axis=0)

    return tape._record(out, ((x, grad_x), (weight, grad_w), (bias, grad_b)), f"dense[{activation}]")


def value_of(x: Operand) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def gradient(root: Var, wrt: Union[Var, Sequence[Var]]):
    """d(root)/d(wrt) for values recorded on the same tape."""
    return root.tape.gradient(root, wrt)


def finite_difference_check(
    f: Callable[[Tape, Var], Var],
    params: np.ndarray,
    step: float = 1e-5,
    kink_tolerance: float = 1e-3,
) -> float:
    """Compare the tape gradient of `f` with central differences.

    `f` builds its objective on the tape it is given from the flat parameter
    variable it is given, and must be deterministic (noise held fixed).
    Coordinates whose one-sided slopes disagree by more than `kink_tolerance`
    straddle a ReLU kink and are left out of the comparison.

    Returns:
        max over the compared coordinates of
        |analytic - central| / max(1, |central|); 0.0 when nothing was compared.
    """
    if step <= 0:
        raise UsageError("step must be positive")
    values = np.array(getattr(params, "values", params), dtype=np.float64)

    tape = Tape()
    theta = tape.variable(values)
    analytic = tape.gradient(f(tape, theta), theta).ravel()

    def evaluate(point: np.ndarray) -> float:
        sub = Tape()
        return f(sub, sub.variable(point)).item()

    base = evaluate(values)
    flat = values.ravel()
    worst = 0.0
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] = flat[i] + step
        upper = evaluate(shifted.reshape(values.shape))
        shifted[i] = flat[i] - step
        lower = evaluate(shifted.reshape(values.shape))
        forward_slope = (upper - base) / step
        backward_slope = (base - lower) / step
        central = (upper - lower) / (2.0 * step)
        scale = max(1.0, abs(central))
        if abs(forward_slope - backward_slope) > kink_tolerance * scale:
            continue
        worst = max(worst, abs(analytic[i] - central) / scale)
    return worst
