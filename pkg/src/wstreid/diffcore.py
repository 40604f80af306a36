"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are plain numpy arrays wrapped in graph ``Node`` objects.  Every
operation records a backward closure; ``backward`` runs them in reverse
topological order and accumulates gradients additively, so a node feeding
several consumers receives the sum of all path gradients.

Everything is 64-bit and row-major.  Broadcasting is limited to row-wise
cases (bias addition, row means); all other binary ops require exact shape
agreement.  Softmax and log-softmax are max-shifted for stability.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

Array = np.ndarray


def _as_value(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One value in the computation graph.

    ``grad`` stays ``None`` until a backward pass reaches the node.  A node
    without parents is a leaf (parameter or input).
    """

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, _parents=()):
        self.value = _as_value(value)
        self.grad: Array | None = None
        self._parents: tuple[Node, ...] = tuple(_parents)
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        kind = "leaf" if self.is_leaf() else "op"
        return f"Node({kind}, shape={self.value.shape})"


def as_node(x) -> Node:
    """Lift an array-like to a leaf node; pass nodes through unchanged."""
    return x if isinstance(x, Node) else Node(x)


def _accum(node: Node, g: Array) -> None:
    # g may alias another node's gradient or be a broadcast view: copy on first
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
        if node.grad.shape != node.value.shape:
            node.grad = np.broadcast_to(node.grad, node.value.shape).copy()
    else:
        node.grad += g


def _accum_owned(node: Node, g: Array) -> None:
    # fast path for freshly allocated, correctly shaped gradients
    if node.grad is None:
        node.grad = g
    else:
        node.grad += g


def _topo_order(root: Node) -> list[Node]:
    # Iterative post-order DFS; reversed it is a topological order.
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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


def backward(loss: Node) -> None:
    """Populate ``grad`` on every node reachable from a scalar ``loss``."""
    if loss.value.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.value.shape}"
        )
    order = _topo_order(loss)
    _accum(loss, np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def zero_grads(nodes) -> None:
    for node in nodes:
        node.grad = None


# ---------------------------------------------------------------------------
# Elementwise and arithmetic ops


def _require_same_shape(op: str, a: Node, b: Node) -> None:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _require_same_shape("add", a, b)
    out = Node(a.value + b.value, (a, b))

    def _bw():
        _accum(a, out.grad)
        _accum(b, out.grad)

    out._backward = _bw
    return out


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _require_same_shape("sub", a, b)
    out = Node(a.value - b.value, (a, b))

    def _bw():
        _accum(a, out.grad)
        _accum_owned(b, -out.grad)

    out._backward = _bw
    return out


def mul(a, b) -> Node:
    """Elementwise product."""
    a, b = as_node(a), as_node(b)
    _require_same_shape("mul", a, b)
    out = Node(a.value * b.value, (a, b))

    def _bw():
        _accum_owned(a, out.grad * b.value)
        _accum_owned(b, out.grad * a.value)

    out._backward = _bw
    return out


def scale(a, factor: float) -> Node:
    """Multiply by a python scalar constant."""
    a = as_node(a)
    factor = float(factor)
    out = Node(a.value * factor, (a,))

    def _bw():
        _accum_owned(a, out.grad * factor)

    out._backward = _bw
    return out


def add_bias(x, bias) -> Node:
    """Row-wise addition of a length-d vector to an [n, d] matrix."""
    x, bias = as_node(x), as_node(bias)
    if x.value.ndim != 2 or bias.value.ndim != 1:
        raise DimensionError(
            f"add_bias expects [n,d] and [d], got {x.value.shape} and {bias.value.shape}"
        )
    if x.value.shape[1] != bias.value.shape[0]:
        raise DimensionError(
            f"add_bias: width {x.value.shape[1]} != bias length {bias.value.shape[0]}"
        )
    out = Node(x.value + bias.value[None, :], (x, bias))

    def _bw():
        _accum(x, out.grad)
        _accum_owned(bias, out.grad.sum(axis=0))

    out._backward = _bw
    return out


def log(a) -> Node:
    """Natural log; callers are responsible for keeping inputs positive."""
    a = as_node(a)
    out = Node(np.log(a.value), (a,))

    def _bw():
        _accum_owned(a, out.grad / a.value)

    out._backward = _bw
    return out


def exp(a) -> Node:
    a = as_node(a)
    out = Node(np.exp(a.value), (a,))

    def _bw():
        _accum_owned(a, out.grad * out.value)

    out._backward = _bw
    return out


def relu(a) -> Node:
    a = as_node(a)
    out = Node(np.maximum(a.value, 0.0), (a,))

    def _bw():
        _accum_owned(a, out.grad * (a.value > 0.0))

    out._backward = _bw
    return out


def clip_min(a, floor: float) -> Node:
    """max(x, floor); gradient passes through only where x > floor."""
    a = as_node(a)
    floor = float(floor)
    out = Node(np.maximum(a.value, floor), (a,))

    def _bw():
        _accum_owned(a, out.grad * (a.value > floor))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Matrix and reduction ops


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.value.shape} and {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions {a.value.shape} x {b.value.shape} disagree"
        )
    out = Node(a.value @ b.value, (a, b))

    def _bw():
        _accum_owned(a, out.grad @ b.value.T)
        _accum_owned(b, a.value.T @ out.grad)

    out._backward = _bw
    return out


def affine(x, weight, bias) -> Node:
    """Fused x @ weight + bias for [n, in] inputs."""
    x, weight, bias = as_node(x), as_node(weight), as_node(bias)
    if x.value.ndim != 2 or weight.value.ndim != 2 or bias.value.ndim != 1:
        raise DimensionError(
            f"affine expects [n,in], [in,out], [out]; got {x.value.shape}, "
            f"{weight.value.shape}, {bias.value.shape}"
        )
    if x.value.shape[1] != weight.value.shape[0] or weight.value.shape[1] != bias.value.shape[0]:
        raise DimensionError(
            f"affine: incompatible shapes {x.value.shape} @ {weight.value.shape} "
            f"+ {bias.value.shape}"
        )
    out = Node(x.value @ weight.value + bias.value[None, :], (x, weight, bias))

    def _bw():
        g = out.grad
        _accum_owned(x, g @ weight.value.T)
        _accum_owned(weight, x.value.T @ g)
        _accum_owned(bias, g.sum(axis=0))

    out._backward = _bw
    return out


def mean_rows(x) -> Node:
    """Mean across rows: [n, d] -> [d]."""
    x = as_node(x)
    if x.value.ndim != 2 or x.value.shape[0] == 0:
        raise DimensionError(f"mean_rows expects a non-empty [n,d] input, got {x.value.shape}")
    n = x.value.shape[0]
    out = Node(x.value.mean(axis=0), (x,))

    def _bw():
        _accum(x, np.broadcast_to(out.grad / n, x.value.shape))

    out._backward = _bw
    return out


def rowwise_sum(x) -> Node:
    """Per-row sum over columns: [n, m] -> [n]."""
    x = as_node(x)
    if x.value.ndim != 2:
        raise DimensionError(f"rowwise_sum expects [n,m], got {x.value.shape}")
    out = Node(x.value.sum(axis=1), (x,))

    def _bw():
        _accum(x, np.broadcast_to(out.grad[:, None], x.value.shape))

    out._backward = _bw
    return out


def sum_all(x) -> Node:
    x = as_node(x)
    out = Node(x.value.sum(), (x,))

    def _bw():
        _accum(x, np.broadcast_to(out.grad, x.value.shape))

    out._backward = _bw
    return out


def mean_all(x) -> Node:
    x = as_node(x)
    if x.value.size == 0:
        raise DimensionError("mean_all of an empty tensor")
    size = x.value.size
    out = Node(x.value.mean(), (x,))

    def _bw():
        _accum(x, np.broadcast_to(out.grad / size, x.value.shape))

    out._backward = _bw
    return out


def sqnorm(x) -> Node:
    """Squared L2 norm over all elements."""
    x = as_node(x)
    out = Node(np.sum(x.value * x.value), (x,))

    def _bw():
        _accum_owned(x, 2.0 * x.value * out.grad)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Shape ops


def concat_rows(parts) -> Node:
    """Stack [n_i, d] blocks along rows."""
    nodes = [as_node(p) for p in parts]
    if not nodes:
        raise DimensionError("concat_rows of zero parts")
    width = None
    for p in nodes:
        if p.value.ndim != 2:
            raise DimensionError(f"concat_rows expects 2-D parts, got {p.value.shape}")
        if width is None:
            width = p.value.shape[1]
        elif p.value.shape[1] != width:
            raise DimensionError(
                f"concat_rows: widths differ ({width} vs {p.value.shape[1]})"
            )
    out = Node(np.concatenate([p.value for p in nodes], axis=0), tuple(nodes))

    def _bw():
        offset = 0
        for p in nodes:
            n = p.value.shape[0]
            _accum(p, out.grad[offset : offset + n])
            offset += n

    out._backward = _bw
    return out


def slice_rows(x, start: int, stop: int) -> Node:
    """Contiguous row slice [start, stop) along axis 0 (1-D or 2-D)."""
    x = as_node(x)
    n = x.value.shape[0] if x.value.ndim >= 1 else 0
    if x.value.ndim not in (1, 2):
        raise DimensionError(f"slice_rows expects 1-D or 2-D input, got {x.value.shape}")
    if not (0 <= start <= stop <= n):
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for {n} rows")
    out = Node(x.value[start:stop].copy(), (x,))

    def _bw():
        g = np.zeros_like(x.value)
        g[start:stop] = out.grad
        _accum_owned(x, g)

    out._backward = _bw
    return out


def take_rows(x, indices) -> Node:
    """Gather rows (1-D or 2-D input) by index; repeats are allowed."""
    x = as_node(x)
    if x.value.ndim not in (1, 2):
        raise DimensionError(f"take_rows expects 1-D or 2-D input, got {x.value.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("take_rows indices must be a flat sequence")
    n = x.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"take_rows index out of range for {n} rows")
    out = Node(x.value[idx], (x,))
    unique = len(np.unique(idx)) == idx.size

    def _bw():
        g = np.zeros_like(x.value)
        if unique:
            g[idx] = out.grad
        else:
            np.add.at(g, idx, out.grad)
        _accum_owned(x, g)

    out._backward = _bw
    return out


def pick(x, columns) -> Node:
    """Per-row gather: out[r] = x[r, columns[r]] for an [n, m] input."""
    x = as_node(x)
    if x.value.ndim != 2:
        raise DimensionError(f"pick expects [n,m], got {x.value.shape}")
    cols = np.asarray(columns, dtype=np.intp)
    n, m = x.value.shape
    if cols.shape != (n,):
        raise DimensionError(f"pick needs one column per row, got {cols.shape} for {n} rows")
    if cols.size and (cols.min() < 0 or cols.max() >= m):
        raise DimensionError(f"pick column out of range for width {m}")
    rows = np.arange(n)
    out = Node(x.value[rows, cols], (x,))

    def _bw():
        # one column per distinct row: plain assignment is exact
        g = np.zeros_like(x.value)
        g[rows, cols] = out.grad
        _accum_owned(x, g)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Softmax family


def _check_softmax_input(name: str, x: Node) -> None:
    if x.value.ndim not in (1, 2) or x.value.shape[-1] == 0 or x.value.size == 0:
        raise DimensionError(f"{name} expects a non-empty vector or row matrix, got {x.value.shape}")


def softmax(logits) -> Node:
    """Row-wise softmax via max-shifted exponentials."""
    x = as_node(logits)
    _check_softmax_input("softmax", x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_val = e / e.sum(axis=-1, keepdims=True)
    out = Node(out_val, (x,))

    def _bw():
        g = out.grad
        dot = (g * out.value).sum(axis=-1, keepdims=True)
        _accum_owned(x, (g - dot) * out.value)

    out._backward = _bw
    return out


def log_softmax(logits) -> Node:
    """Row-wise log softmax via max-shifted log-sum-exp."""
    x = as_node(logits)
    _check_softmax_input("log_softmax", x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Node(shifted - lse, (x,))

    def _bw():
        g = out.grad
        _accum_owned(x, g - np.exp(out.value) * g.sum(axis=-1, keepdims=True))

    out._backward = _bw
    return out


def sym_kl_rows(lp_a, lp_b) -> Node:
    """Row-wise symmetrized KL divergence between two log-probability
    matrices: 0.5 * (KL(a||b) + KL(b||a)) per row, computed in log space."""
    lp_a, lp_b = as_node(lp_a), as_node(lp_b)
    if lp_a.value.ndim != 2 or lp_a.value.shape != lp_b.value.shape:
        raise DimensionError(
            f"sym_kl_rows expects matching [n,m] inputs, got {lp_a.value.shape} "
            f"and {lp_b.value.shape}"
        )
    pa = np.exp(lp_a.value)
    pb = np.exp(lp_b.value)
    diff = lp_a.value - lp_b.value
    out = Node(0.5 * ((pa - pb) * diff).sum(axis=1), (lp_a, lp_b))

    def _bw():
        g = out.grad[:, None]
        _accum_owned(lp_a, 0.5 * g * (pa * diff + pa - pb))
        _accum_owned(lp_b, 0.5 * g * (pb * (-diff) + pb - pa))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Batch normalization


class BnState:
    """Learnable scale/shift plus running statistics for one feature width."""

    __slots__ = ("gamma", "beta", "running_mean", "running_var", "momentum", "eps")

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Node(np.ones(dim))
        self.beta = Node(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    @property
    def dim(self) -> int:
        return self.gamma.value.shape[0]


def batchnorm(x, state: BnState, mode: str) -> Node:
    """Normalize [n, d] per dimension; train mode also updates running stats.

    Train mode normalizes with biased batch variance and needs n >= 2; the
    running variance is updated with the unbiased estimate.  Eval mode uses
    the running statistics and is a pure affine map.
    """
    x = as_node(x)
    if x.value.ndim != 2:
        raise DimensionError(f"batchnorm expects [n,d], got {x.value.shape}")
    if x.value.shape[1] != state.dim:
        raise DimensionError(
            f"batchnorm: input width {x.value.shape[1]} != state width {state.dim}"
        )
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    gamma, beta = state.gamma, state.beta

    if mode == "train":
        n = x.value.shape[0]
        if n < 2:
            raise ContractError("batchnorm in train mode needs a batch of at least 2")
        mean = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.value - mean) * inv
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var * n / (n - 1)
        out = Node(gamma.value * xhat + beta.value, (x, gamma, beta))

        def _bw():
            g = out.grad
            _accum_owned(beta, g.sum(axis=0))
            _accum_owned(gamma, (g * xhat).sum(axis=0))
            dxhat = g * gamma.value
            dx = (
                inv
                / n
                * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            )
            _accum_owned(x, dx)

        out._backward = _bw
        return out

    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.value - state.running_mean) * inv
    out = Node(gamma.value * xhat + beta.value, (x, gamma, beta))

    def _bw_eval():
        g = out.grad
        _accum_owned(beta, g.sum(axis=0))
        _accum_owned(gamma, (g * xhat).sum(axis=0))
        _accum_owned(x, g * gamma.value * inv)

    out._backward = _bw_eval
    return out
