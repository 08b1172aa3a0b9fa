"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the attribution network needs are provided. Every op
builds a node that remembers its parents and a closure mapping the upstream
gradient to per-parent gradients. ``backward`` replays the recorded nodes in
reverse creation order, which is a valid reverse topological order because a
node is always created after its inputs.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
NORM_EPS = 1e-12

_node_ids = itertools.count()
_grad_enabled = True
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Select the float precision used when tensors are created from raw data."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextmanager
def no_grad():
    """Run ops without recording a graph (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A dense array that can take part in a computation graph."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_id = next(_node_ids)
        self.name = name
        self.degenerate = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar used by tests and losses.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


# ---------------------------------------------------------------------------
# Graph traversal


@dataclass
class ComputationTape:
    """Nodes reachable from a loss, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            found.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        found.sort(key=lambda t: t.node_id)
        return cls(found)


def backward(loss: Tensor) -> ComputationTape:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf's ``grad``.

    The graph is released afterwards; calling backward twice on the same loss
    raises.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise RuntimeError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = ComputationTape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in tape.nodes:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._freed = True
    return tape


# ---------------------------------------------------------------------------
# Elementwise and reduction helpers


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if b.data.ndim == 0 or a.data.ndim == 0:
        a_scalar, b_scalar = a.data.ndim == 0, b.data.ndim == 0

        def bw(g):
            return (g.sum() if a_scalar else g, g.sum() if b_scalar else g)

        return _make(a.data + b.data, (a, b), bw)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(_as_tensor(b, a if isinstance(a, Tensor) else None)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.data.ndim == 0 or b.data.ndim == 0:
        a_scalar, b_scalar = a.data.ndim == 0, b.data.ndim == 0

        def bw(g):
            ga = g * b.data
            gb = g * a.data
            return (ga.sum() if a_scalar else ga, gb.sum() if b_scalar else gb)

        return _make(a.data * b.data, (a, b), bw)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, g / n),))


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Dot product along the last axis: [B,E]x[B,E] -> [B] (or [E]x[E] -> scalar)."""
    if a.shape != b.shape:
        raise ValueError(f"rowdot: shape mismatch {a.shape} vs {b.shape}")
    out = (a.data * b.data).sum(axis=-1)

    def bw(g):
        g = np.asarray(g)[..., None]
        return g * b.data, g * a.data

    return _make(np.asarray(out), (a, b), bw)


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors (or along axis 0)."""
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[0] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=0), xs, bw)


def stack(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)

    def bw(g):
        return tuple(g[i] for i in range(len(xs)))

    return _make(np.stack([x.data for x in xs]), xs, bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    rows = x.shape[0]

    def bw(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    if not 0 <= start <= stop <= rows:
        raise IndexError(f"slice [{start}:{stop}] outside {rows} rows")
    return _make(x.data[start:stop], (x,), bw)


def take_row(table: Tensor, i: int) -> Tensor:
    """Row ``i`` of a 2-D tensor as a 1-D tensor."""
    if not 0 <= i < table.shape[0]:
        raise IndexError(f"row {i} outside {table.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(table.data)
        out[i] = g
        return (out,)

    return _make(table.data[i].copy(), (table,), bw)


def scale_columns(x: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply every row of ``x`` by a constant per-column factor vector."""
    factors = np.asarray(factors, dtype=x.dtype)
    if factors.shape != x.shape[-1:]:
        raise ValueError(f"scale_columns: need {x.shape[-1]} factors, got {factors.shape}")
    return _make(x.data * factors, (x,), lambda g: (g * factors,))


# ---------------------------------------------------------------------------
# Network ops


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back into the rows."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    vocab, dim = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise IndexError(f"id {bad} outside table of {vocab} rows")
    if ids.size == 0:
        return _make(np.zeros((0, dim), dtype=table.dtype), (table,), lambda g: (np.zeros_like(table.data),))

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), bw)


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    steps = x.shape[0] - k + 1
    if k == 1:
        return x
    return np.concatenate([x[j:j + steps] for j in range(k)], axis=1)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation over time: [T,E] * [F,K,E] + [F] -> [T-K+1,F]."""
    t_len, e_dim = x.shape
    n_filt, k, ke = kernels.shape
    if ke != e_dim:
        raise ValueError(f"conv1d: kernel depth {ke} != input width {e_dim}")
    if bias.shape != (n_filt,):
        raise ValueError(f"conv1d: bias shape {bias.shape} != ({n_filt},)")
    if t_len < k:
        raise ValueError(f"conv1d: input length {t_len} shorter than kernel {k}")
    steps = t_len - k + 1
    cols = _windows(x.data, k)
    w = kernels.data.reshape(n_filt, k * e_dim)
    out = cols @ w.T + bias.data

    def bw(g):
        gw = (g.T @ cols).reshape(kernels.shape)
        gb = g.sum(axis=0)
        gcols = g @ w
        gx = np.zeros_like(x.data)
        for j in range(k):
            gx[j:j + steps] += gcols[:, j * e_dim:(j + 1) * e_dim]
        return gx, gw, gb

    return _make(out, (x, kernels, bias), bw)


def selu(x: Tensor) -> Tensor:
    d = x.data
    pos = d > 0
    expm = np.exp(np.minimum(d, 0.0))
    out = SELU_LAMBDA * np.where(pos, d, SELU_ALPHA * (expm - 1.0))
    slope = SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * expm)
    return _make(out.astype(d.dtype, copy=False), (x,), lambda g: (g * slope,))


def global_max_pool(x: Tensor) -> Tensor:
    """Max over the time axis. Ties send the gradient to the first index."""
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"global_max_pool needs [T>=1, F], got {x.shape}")
    arg = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])

    def bw(g):
        out = np.zeros_like(x.data)
        out[arg, cols] = g
        return (out,)

    return _make(x.data[arg, cols], (x,), bw)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map W.x + b for x of shape [N] or a batch [B,N]."""
    if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"dense: shapes x{x.shape} W{w.shape} b{b.shape} do not conform")
    out = x.data @ w.data.T + b.data

    def bw(g):
        if x.data.ndim == 1:
            return g @ w.data, np.outer(g, x.data), g
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, w, b), bw)


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale to unit L2 norm along the last axis.

    Rows whose norm is at most ``eps`` pass through unchanged; the returned
    tensor's ``degenerate`` attribute marks them.
    """
    d = x.data
    norm = np.sqrt((d * d).sum(axis=-1, keepdims=True))
    bad = norm <= eps
    safe = np.where(bad, 1.0, norm)
    y = d / safe

    def bw(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        gx = (g - y * proj) / safe
        return (np.where(bad, g, gx),)

    out = _make(y, (x,), bw)
    out.degenerate = bool(bad.any()) if d.ndim == 1 else bad[..., 0]
    return out


def shared_mask_dropout(xs: Sequence[Tensor], rate: float, rng=None, training: bool = True,
                        mask: np.ndarray | None = None) -> list[Tensor]:
    """Drop the same feature columns from every tensor in ``xs``.

    One Bernoulli keep-mask over the last axis is drawn per call; survivors are
    scaled by 1/(1-rate) so the op is the identity in expectation and at
    inference.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    xs = list(xs)
    if not training or (rate == 0.0 and mask is None) or not xs:
        return xs
    width = xs[0].shape[-1]
    if any(x.shape[-1] != width for x in xs):
        raise ValueError("shared_mask_dropout: tensors disagree on feature width")
    if mask is None:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        keep = rng.random(width) >= rate
        mask = keep / (1.0 - rate)
    return [scale_columns(x, mask) for x in xs]


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of the targets, log-sum-exp stabilised."""
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != z.shape[0]:
        raise ValueError("cross_entropy: one target per row required")
    if targets.size and (targets.min() < 0 or targets.max() >= z.shape[1]):
        raise IndexError("cross_entropy: target outside class range")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(z.shape[0])
    loss = -logp[rows, targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        out = g * p / z.shape[0]
        return (out.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked: dict[str, int]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst <= tol


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor], h: float = 1e-5,
               tol: float = 1e-4, max_entries: int | None = None, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` must rebuild the scalar output from ``params`` on every call. The
    relative error of an entry is |a - n| / max(|a|, |n|, floor). With
    ``max_entries`` set, a seeded subset of each parameter is probed.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    out = f()
    if out.requires_grad:
        backward(out)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[name].reshape(-1)[i])
            denom = max(abs(ana), abs(num), floor)
            worst = max(worst, abs(ana - num) / denom)
        errors[name] = worst
        counts[name] = int(idx.size)
        p.zero_grad()
    return GradCheckReport(errors, counts)


def finite_difference(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of a scalar function w.r.t. one array entry."""
    orig = arr[index]
    arr[index] = orig + h
    fp = f()
    arr[index] = orig - h
    fm = f()
    arr[index] = orig
    return (fp - fm) / (2.0 * h)


def isfinite(x: Tensor) -> bool:
    return bool(np.all(np.isfinite(x.data)))


def norm(x: np.ndarray) -> float:
    return math.sqrt(float((np.asarray(x, dtype=np.float64) ** 2).sum()))
