"""Reverse-mode automatic differentiation over 2-D float64 arrays.

Everything is a matrix: scalars are [1, 1], vectors are [1, d] or [d, 1].
Each operation records a vector-Jacobian closure on the output node;
``Node.backward`` runs the closures in reverse topological order.

Conventions:

- Gradients accumulate. Leaf gradients persist across backward calls until
  explicitly zeroed (``Parameter.zero_grad``); a second ``backward`` on the
  same loss node is rejected. Separate backward calls must not share
  intermediate nodes, so build one combined loss per step.
- Row-reductions (``mean_rows``, ``max_rows``) collapse axis 0 to a [1, d]
  row; ``max_cols`` collapses axis 1 to an [n, 1] column.
- ``max_rows``/``max_cols`` route the gradient to the first argmax on ties.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

LAYERNORM_EPS = 1e-5
L2NORM_EPS = 1e-12


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"only rank <= 2 supported, got shape {a.shape}")
    return a


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjps", "_done")

    def __init__(self, value, requires_grad=False, parents=(), vjps=()):
        self.value = _as_matrix(value)
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjps = vjps
        self._done = False

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be scalar shaped [1, 1]. Calling backward twice on the
        same node is rejected; rebuild the graph to differentiate again.
        """
        if self.value.shape != (1, 1):
            raise ContractError(f"backward requires a scalar loss, got shape {self.value.shape}")
        if self._done:
            raise ContractError("backward already ran on this node; rebuild the graph to differentiate again")
        order = _toposort(self)
        for node in order:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
        self.grad[0, 0] += 1.0
        for node in reversed(order):
            for parent, vjp in zip(node._parents, node._vjps):
                vjp(parent.grad, node.grad)
        self._done = True

    def __add__(self, other):
        return add(self, other if isinstance(other, Node) else constant(other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Node) else constant(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(value, inputs, vjps) -> Node:
    """Create an op output, recording vjps only for inputs that need grad."""
    parents = tuple(n for n, _ in zip(inputs, vjps) if n.requires_grad)
    kept = tuple(v for n, v in zip(inputs, vjps) if n.requires_grad)
    return Node(value, requires_grad=bool(parents), parents=parents, vjps=kept)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] > 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] > 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a: Node, b: Node, op: str) -> None:
    for da, db in zip(a.value.shape, b.value.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: incompatible shapes {a.value.shape} and {b.value.shape}")


# ---------------------------------------------------------------------------
# elementwise / broadcast arithmetic


def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")
    value = a.value + b.value
    return _make(value, (a, b), (
        lambda ga, g: ga.__iadd__(_unbroadcast(g, a.value.shape)),
        lambda gb, g: gb.__iadd__(_unbroadcast(g, b.value.shape)),
    ))


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")
    value = a.value - b.value
    return _make(value, (a, b), (
        lambda ga, g: ga.__iadd__(_unbroadcast(g, a.value.shape)),
        lambda gb, g: gb.__isub__(_unbroadcast(g, b.value.shape)),
    ))


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "mul")
    value = a.value * b.value
    return _make(value, (a, b), (
        lambda ga, g: ga.__iadd__(_unbroadcast(g * b.value, a.value.shape)),
        lambda gb, g: gb.__iadd__(_unbroadcast(g * a.value, b.value.shape)),
    ))


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), (lambda ga, g: ga.__iadd__(g * c),))


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.value.shape} and {b.value.shape}")
    value = a.value @ b.value
    return _make(value, (a, b), (
        lambda ga, g: ga.__iadd__(g @ b.value.T),
        lambda gb, g: gb.__iadd__(a.value.T @ g),
    ))


def transpose(a: Node) -> Node:
    return _make(np.ascontiguousarray(a.value.T), (a,), (lambda ga, g: ga.__iadd__(g.T),))


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return _make(t, (a,), (lambda ga, g: ga.__iadd__(g * (1.0 - t * t)),))


def exp(a: Node) -> Node:
    e = np.exp(a.value)
    return _make(e, (a,), (lambda ga, g: ga.__iadd__(g * e),))


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise NumericError("log: non-positive input")
    return _make(np.log(a.value), (a,), (lambda ga, g: ga.__iadd__(g / a.value),))


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    return _make(np.where(mask, a.value, 0.0), (a,), (lambda ga, g: ga.__iadd__(g * mask),))


def sigmoid(a: Node) -> Node:
    s = 1.0 / (1.0 + np.exp(-a.value))
    return _make(s, (a,), (lambda ga, g: ga.__iadd__(g * s * (1.0 - s)),))


def clamp(a: Node, lo: float, hi: float) -> Node:
    mask = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), (lambda ga, g: ga.__iadd__(g * mask),))


# ---------------------------------------------------------------------------
# row / column structure


def softmax_rows(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(ga, g):
        inner = (g * s).sum(axis=1, keepdims=True)
        ga += s * (g - inner)

    return _make(s, (a,), (vjp,))


def mean_rows(a: Node) -> Node:
    n = a.value.shape[0]
    value = a.value.mean(axis=0, keepdims=True)
    return _make(value, (a,), (lambda ga, g: ga.__iadd__(np.broadcast_to(g / n, a.value.shape)),))


def max_rows(a: Node) -> Node:
    idx = np.argmax(a.value, axis=0)
    cols = np.arange(a.value.shape[1])
    value = a.value[idx, cols].reshape(1, -1)

    def vjp(ga, g):
        ga[idx, cols] += g[0]

    return _make(value, (a,), (vjp,))


def max_cols(a: Node) -> Node:
    idx = np.argmax(a.value, axis=1)
    rows = np.arange(a.value.shape[0])
    value = a.value[rows, idx].reshape(-1, 1)

    def vjp(ga, g):
        ga[rows, idx] += g[:, 0]

    return _make(value, (a,), (vjp,))


def l2norm_rows(a: Node) -> Node:
    norms = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, L2NORM_EPS)
    y = a.value / denom
    free = norms >= L2NORM_EPS

    def vjp(ga, g):
        inner = (g * y).sum(axis=1, keepdims=True)
        ga += np.where(free, (g - y * inner) / denom, g / denom)

    return _make(y, (a,), (vjp,))


def layernorm_rows(a: Node, gain: Node, bias: Node) -> Node:
    """Per-row layer normalization with affine parameters [1, d]."""
    d = a.value.shape[1]
    if gain.value.shape != (1, d) or bias.value.shape != (1, d):
        raise DimensionError(
            f"layernorm: affine shapes {gain.value.shape}/{bias.value.shape} do not match row width {d}")
    m = a.value.mean(axis=1, keepdims=True)
    var = ((a.value - m) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = (a.value - m) * inv
    value = xhat * gain.value + bias.value

    def vjp_a(ga, g):
        dxhat = g * gain.value
        t1 = dxhat.mean(axis=1, keepdims=True)
        t2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        ga += inv * (dxhat - t1 - xhat * t2)

    return _make(value, (a, gain, bias), (
        vjp_a,
        lambda gg, g: gg.__iadd__((g * xhat).sum(axis=0, keepdims=True)),
        lambda gb, g: gb.__iadd__(g.sum(axis=0, keepdims=True)),
    ))


def concat_rows(nodes: list[Node]) -> Node:
    if not nodes:
        raise ContractError("concat_rows: empty input list")
    width = nodes[0].value.shape[1]
    for n in nodes:
        if n.value.shape[1] != width:
            raise DimensionError(f"concat_rows: widths differ, {n.value.shape} vs [*, {width}]")
    value = np.vstack([n.value for n in nodes])
    offsets = np.cumsum([0] + [n.value.shape[0] for n in nodes])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda gn, g: gn.__iadd__(g[lo:hi])

    return _make(value, tuple(nodes), tuple(make_vjp(i) for i in range(len(nodes))))


def concat_cols(nodes: list[Node]) -> Node:
    if not nodes:
        raise ContractError("concat_cols: empty input list")
    height = nodes[0].value.shape[0]
    for n in nodes:
        if n.value.shape[0] != height:
            raise DimensionError(f"concat_cols: heights differ, {n.value.shape} vs [{height}, *]")
    value = np.hstack([n.value for n in nodes])
    offsets = np.cumsum([0] + [n.value.shape[1] for n in nodes])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda gn, g: gn.__iadd__(g[:, lo:hi])

    return _make(value, tuple(nodes), tuple(make_vjp(i) for i in range(len(nodes))))


def slice_rows(a: Node, start: int, stop: int) -> Node:
    if not (0 <= start < stop <= a.value.shape[0]):
        raise DimensionError(f"slice_rows: [{start}, {stop}) out of range for shape {a.value.shape}")
    value = a.value[start:stop].copy()
    return _make(value, (a,), (lambda ga, g: ga[start:stop].__iadd__(g),))


def slice_cols(a: Node, start: int, stop: int) -> Node:
    if not (0 <= start < stop <= a.value.shape[1]):
        raise DimensionError(f"slice_cols: [{start}, {stop}) out of range for shape {a.value.shape}")
    value = a.value[:, start:stop].copy()
    return _make(value, (a,), (lambda ga, g: ga[:, start:stop].__iadd__(g),))


def sum_all(a: Node) -> Node:
    return _make(a.value.sum(), (a,), (lambda ga, g: ga.__iadd__(g[0, 0]),))


def mean_all(a: Node) -> Node:
    return scale(sum_all(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# generic dispatch

_KINDS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "transpose": transpose,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "clamp": clamp,
    "softmax-rows": softmax_rows,
    "mean-rows": mean_rows,
    "max-rows": max_rows,
    "max-cols": max_cols,
    "l2norm-rows": l2norm_rows,
    "layernorm-row": layernorm_rows,
    "concat-rows": lambda *nodes: concat_rows(list(nodes)),
    "concat-cols": lambda *nodes: concat_cols(list(nodes)),
    "slice-rows": slice_rows,
    "slice-cols": slice_cols,
    "sum": sum_all,
}


def forward_op(kind: str, inputs: list[Node], **params) -> Node:
    """Apply the named operation to `inputs`; see module docstring for kinds."""
    if kind not in _KINDS:
        raise ContractError(f"unknown op kind {kind!r}")
    return _KINDS[kind](*inputs, **params)


def op_kinds() -> tuple[str, ...]:
    return tuple(_KINDS)


# ---------------------------------------------------------------------------
# parameters and optimization


class Parameter:
    """Trainable leaf: a named node plus Adam moment buffers."""

    def __init__(self, value, name: str):
        self.node = Node(value, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.node.value)
        self.v = np.zeros_like(self.node.value)
        self.t = 0

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def grad(self) -> np.ndarray:
        return self.node.grad

    def zero_grad(self) -> None:
        self.node.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.node.value.shape})"


def adam_step(params: list[Parameter], lr: float = 1e-4,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    Aborts (before touching any parameter) if any gradient is non-finite.
    """
    b1, b2 = betas
    for p in params:
        if not np.all(np.isfinite(p.node.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.t += 1
        g = p.node.grad
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * (g * g)
        mhat = p.m / (1.0 - b1 ** p.t)
        vhat = p.v / (1.0 - b2 ** p.t)
        p.node.value -= lr * mhat / (np.sqrt(vhat) + eps)


def grad_check(f, params: list[Parameter], step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must rebuild its graph from the current parameter values on every
    call and return a scalar Node. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    loss = f()
    if not np.isfinite(loss.value[0, 0]):
        raise NumericError("grad_check: loss is not finite")
    for p in params:
        p.zero_grad()
    loss.backward()
    analytic = [p.node.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        theta = p.node.value
        for index in np.ndindex(theta.shape):
            orig = theta[index]
            theta[index] = orig + step
            fp = f().value[0, 0]
            theta[index] = orig - step
            fm = f().value[0, 0]
            theta[index] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("grad_check: perturbed loss is not finite")
            numeric = (fp - fm) / (2.0 * step)
            err = abs(ana[index] - numeric) / max(1.0, abs(ana[index]))
            worst = max(worst, err)
    return worst
