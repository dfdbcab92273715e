"""Dense float32 tensors with reverse-mode automatic differentiation.

Storage is float32 everywhere; reductions (matmul inner products, softmax /
log-softmax row sums, full sums, group reductions) accumulate in float64
before casting back. Together with single-threaded graph evaluation this
makes every computation bit-reproducible across runs on the same machine.

Every operation validates that its output is finite and raises
:class:`NumericError` naming the operation otherwise, so a graph that builds
successfully only ever holds finite values.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray


class Tensor:
    """A dense float32 array participating in a dynamic autodiff graph.

    Leaf tensors are constructed directly; interior tensors come from the
    operations in this module and remember how to push gradients to their
    parents. ``backward`` accumulates into ``grad`` (same shape as ``data``),
    summing contributions over all consumers of a node.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor created from non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[Array], Sequence[Array | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant leaf sharing this tensor's values."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    # Operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(op: str, data: Array, parents: tuple[Tensor, ...],
            grad_fn: Callable[[Array], Sequence[Array | None]]) -> Tensor:
    data = np.asarray(data, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _f32(x: Array) -> Array:
    return x.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_f32(g * b.data), _f32(g * a.data)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise NumericError("div: zero divisor")
    return _result("div", a.data / b.data, (a, b),
                   lambda g: (_f32(g / b.data),
                              _f32(-g * a.data / (b.data * b.data))))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return _result("scale", a.data * np.float32(c), (a,),
                   lambda g: (_f32(g * np.float32(c)),))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    out = _result("exp", out_data, (a,), lambda g: (_f32(g * out_data),))
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log: non-positive input")
    return _result("log", np.log(a.data), (a,), lambda g: (_f32(g / a.data),))


def sigmoid(a: Tensor) -> Tensor:
    # Stable both tails: 1/(1+exp(-x)) via expit-style split.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)),
                        np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))
    out_data = _f32(out_data)
    return _result("sigmoid", out_data, (a,),
                   lambda g: (_f32(g * out_data * (1.0 - out_data)),))


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_A = np.float32(0.044715)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximate GELU."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)

    def grad_fn(g: Array):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (_f32(g * dy),)

    return _result("gelu", 0.5 * x * (1.0 + t), (a,), grad_fn)


def ste_round(a: Tensor) -> Tensor:
    """Round half-to-even; gradient passes through unchanged."""
    return _result("ste_round", np.rint(a.data), (a,), lambda g: (g,))


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clamp elementwise; gradient passes where the input was in range."""
    x = a.data
    mask = np.ones_like(x, dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    return _result("clip", np.clip(x, lo, hi), (a,),
                   lambda g: (_f32(np.where(mask, g, 0.0)),))


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with float64 inner accumulation."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)

    def grad_fn(g: Array):
        g64 = g.astype(np.float64)
        return (_f32(g64 @ b64.T), _f32(a64.T @ g64))

    return _result("matmul", _f32(a64 @ b64), (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _result("transpose", a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= j0 < j1 <= a.shape[1]):
        raise ShapeError(f"slice_cols: [{j0}:{j1}] invalid for shape {a.shape}")

    def grad_fn(g: Array):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        return (full,)

    return _result("slice_cols", a.data[:, j0:j1].copy(), (a,), grad_fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: empty input")
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: rows differ across parts")
    widths = [p.shape[1] for p in parts]

    def grad_fn(g: Array):
        out, j = [], 0
        for w in widths:
            out.append(g[:, j:j + w].copy())
            j += w
        return tuple(out)

    return _result("concat_cols", np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), grad_fn)


def repeat_cols(a: Tensor, reps: int) -> Tensor:
    """Group-scale expansion: repeat each column ``reps`` times.

    Gradient sums each group of ``reps`` output columns back into its source
    column (float64 accumulation).
    """
    if a.data.ndim != 2 or reps < 1:
        raise ShapeError(f"repeat_cols: shape {a.shape}, reps {reps}")
    rows, cols = a.shape

    def grad_fn(g: Array):
        return (_f32(g.astype(np.float64).reshape(rows, cols, reps).sum(axis=2)),)

    return _result("repeat_cols", np.repeat(a.data, reps, axis=1), (a,), grad_fn)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ids; gradient scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding_lookup: id out of range [0, {table.shape[0]})")

    def grad_fn(g: Array):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result("embedding_lookup", table.data[ids].copy(), (table,), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements to a scalar, accumulated in float64."""
    total = a.data.astype(np.float64).sum()

    def grad_fn(g: Array):
        return (np.full_like(a.data, np.float32(g.reshape(()))),)

    return _result("sum_all", np.float32(total), (a,), grad_fn)


# ---------------------------------------------------------------------------
# Row-wise softmax family
# ---------------------------------------------------------------------------

def softmax_rows(z: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction; sums taken in float64."""
    if z.data.ndim != 2 or z.shape[1] < 1:
        raise ShapeError(f"softmax_rows: expected 2-D with >=1 column, got {z.shape}")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    s = _f32(e / e.sum(axis=1, keepdims=True))

    def grad_fn(g: Array):
        dot = (g.astype(np.float64) * s).sum(axis=1, keepdims=True)
        return (_f32(s * (g - dot)),)

    return _result("softmax_rows", s, (z,), grad_fn)


def log_softmax_rows(z: Tensor) -> Tensor:
    """Row-wise log-softmax computed in log space (never exp-then-log)."""
    if z.data.ndim != 2 or z.shape[1] < 1:
        raise ShapeError(f"log_softmax_rows: expected 2-D with >=1 column, got {z.shape}")
    shifted = (z.data - z.data.max(axis=1, keepdims=True)).astype(np.float64)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = _f32(shifted - lse)
    sm = _f32(np.exp(shifted - lse))

    def grad_fn(g: Array):
        rowsum = g.astype(np.float64).sum(axis=1, keepdims=True)
        return (_f32(g - sm * rowsum),)

    return _result("log_softmax_rows", out, (z,), grad_fn)


def _xlogy_const(p: Array, q: Tensor) -> Tensor:
    """p * log(q) elementwise with the 0*log(0) = 0 convention; p is constant."""
    if p.shape != q.shape:
        raise ShapeError(f"xlogy: shapes {p.shape} and {q.shape} differ")
    active = p > 0.0
    if np.any(active & (q.data <= 0.0)):
        raise NumericError("cross_entropy: zero probability where target mass is positive")
    safe_q = np.where(active, q.data, 1.0)
    data = np.where(active, p * np.log(safe_q), 0.0)

    def grad_fn(g: Array):
        return (_f32(np.where(active, g * p / safe_q, 0.0)),)

    return _result("xlogy", data, (q,), grad_fn)


# ---------------------------------------------------------------------------
# Losses and normalization
# ---------------------------------------------------------------------------

def _check_rows_are_distributions(name: str, data: Array) -> None:
    if np.any(data < 0.0):
        raise ContractError(f"cross_entropy: {name} has negative entries in probability mode")
    sums = data.astype(np.float64).sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        worst = float(np.abs(sums - 1.0).max())
        raise ContractError(
            f"cross_entropy: {name} rows not normalized in probability mode "
            f"(max |sum-1| = {worst:.3g})")


def cross_entropy(target: Tensor, candidate: Tensor, *,
                  candidate_is_logits: bool, target_is_logits: bool) -> Tensor:
    """Mean-over-rows cross-entropy -(1/L) sum_ij p_ij log q_ij.

    The target side is treated as a constant: gradient flows only into the
    candidate. In logits mode log q comes from log-softmax in log space; in
    probability mode each row must already be a distribution (sum 1 within
    1e-4, nonnegative).
    """
    _same_shape("cross_entropy", target, candidate)
    if target.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected 2-D, got {target.shape}")
    rows = target.shape[0]

    if target_is_logits:
        shifted = (target.data - target.data.max(axis=1, keepdims=True)).astype(np.float64)
        e = np.exp(shifted)
        p = _f32(e / e.sum(axis=1, keepdims=True))
    else:
        _check_rows_are_distributions("target", target.data)
        p = target.data

    if candidate_is_logits:
        logq = log_softmax_rows(candidate)
        plogq = mul(Tensor(p), logq)
    else:
        _check_rows_are_distributions("candidate", candidate.data)
        plogq = _xlogy_const(p, candidate)
    return scale(sum_all(plogq), -1.0 / rows)


def mse_loss(a: Tensor, b: Tensor, reduction: str = "frobenius_sq") -> Tensor:
    """Squared-error loss: full Frobenius sum, or the same divided by rows."""
    _same_shape("mse_loss", a, b)
    d = sub(a, b)
    total = sum_all(mul(d, d))
    if reduction == "frobenius_sq":
        return total
    if reduction == "mean_rows":
        return scale(total, 1.0 / a.shape[0])
    raise ContractError(f"mse_loss: unknown reduction {reduction!r}")


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise RMS normalization followed by an elementwise weight."""
    if x.data.ndim != 2 or weight.data.ndim != 1 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"rmsnorm: x {x.shape} vs weight {weight.shape}")
    d = x.shape[1]
    x64 = x.data.astype(np.float64)
    w64 = weight.data.astype(np.float64)
    r = np.sqrt((x64 * x64).mean(axis=1, keepdims=True) + eps)
    if np.any(r == 0.0):
        raise NumericError("rmsnorm: zero row norm with eps=0")
    xn = x64 / r

    def grad_fn(g: Array):
        g64 = g.astype(np.float64)
        gw_x = (g64 * w64 * x64).sum(axis=1, keepdims=True)
        dx = g64 * w64 / r - x64 * gw_x / (d * r ** 3)
        dw = (g64 * xn).sum(axis=0)
        return (_f32(dx), _f32(dw))

    return _result("rmsnorm", _f32(xn * w64), (x, weight), grad_fn)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every trainable tensor reachable from ``loss``.

    Visits each node exactly once in reverse topological order; a leaf's
    gradient is the sum of contributions over all of its consumers.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._grad_fn is None or node.grad is None:
            continue
        contribs = node._grad_fn(node.grad)
        for parent, contrib in zip(node._parents, contribs):
            if contrib is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float32, copy=True)
            else:
                parent.grad = parent.grad + contrib
