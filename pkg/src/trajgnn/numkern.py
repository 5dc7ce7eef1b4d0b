"""Dense float64 tensors with tape-based reverse-mode gradients.

Every learnable model in the package is written against this module. The
kernel is small on purpose: matrix products, broadcasting arithmetic,
activations, row gathers, sparse message aggregation, per-segment softmax and
the mean squared error loss. Each op records a closure that maps the output
gradient to gradients of its inputs; :meth:`Tensor.backward` replays those
closures in reverse topological order.

All reductions run in index order so identical inputs give bit-identical
results.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array that may take part in gradient computation.

    Parameters
    ----------
    data : array_like
        Values; stored as a C-contiguous float64 array.
    requires_grad : bool
        Whether gradients should flow back to this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.require(np.asarray(data, dtype=DTYPE), requirements="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        Intermediate tensors release their closures afterwards, so a graph
        can only be differentiated once.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        topo = _topological_order(self)
        self.grad = np.asarray(grad, dtype=DTYPE).reshape(self.shape).copy()
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node.grad = None


class Param(Tensor):
    """A learnable leaf tensor; ``grad`` always exists and matches ``data``."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param(shape={self.shape})"


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def _topological_order(root: Tensor) -> list[Tensor]:
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


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per parent. This is the extension point for new ops.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def _bw(g, parents=out._parents):
            for p, pg in zip(parents, backward(g)):
                if pg is not None:
                    _accumulate(p, pg)

        out._backward = _bw
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# dense ops


def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b`` for 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return record(ad @ bd, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return record(ad * bd, (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    scale = np.where(x.data >= 0, 1.0, slope)
    return record(x.data * scale, (x,), lambda g: (g * scale,))


def elementwise_activation(x, kind: str = "relu", slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, cuts, axis=axis)

    return record(np.concatenate([t.data for t in tensors], axis=axis),
                  tensors, backward)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record(np.sum(x.data, axis=axis), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return record(x.data.T, (x,), lambda g: (g.T,))


def take_columns(x, start: int, stop: int) -> Tensor:
    """Columns ``x[:, start:stop]`` of a 2-D tensor."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[:, start:stop] = g
        return (out,)

    return record(x.data[:, start:stop], (x,), backward)


def gather_rows(x, index: np.ndarray) -> Tensor:
    """Rows ``x[index]``; the backward pass scatters back in index order."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    n = x.shape[0]

    def backward(g):
        out = np.zeros((n,) + g.shape[1:], dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return record(x.data[index], (x,), backward)


# ---------------------------------------------------------------------------
# graph ops


class SegmentLayout:
    """Sorted view of segment ids used by the per-segment reductions.

    Values are always visited in ascending segment order and, within a
    segment, in ascending position, which fixes the summation order.
    """

    def __init__(self, segments: np.ndarray, num_segments: int | None = None):
        segments = np.asarray(segments, dtype=np.intp)
        if segments.ndim != 1 or len(segments) == 0:
            raise ValueError("segment list must be a non-empty 1-D sequence")
        if segments.min() < 0:
            raise ValueError("segment ids must be non-negative")
        n = int(segments.max()) + 1 if num_segments is None else num_segments
        self.segments = segments
        self.num_segments = n
        self.order = np.argsort(segments, kind="stable")
        counts = np.bincount(segments, minlength=n)
        self.indptr = np.concatenate([[0], np.cumsum(counts)])
        self.nonempty = np.flatnonzero(counts)

    def reduce(self, values: np.ndarray, ufunc) -> np.ndarray:
        """Reduce ``values`` (aligned with ``segments``) per segment."""
        out = np.zeros((self.num_segments,) + values.shape[1:], dtype=DTYPE)
        if len(self.nonempty):
            sorted_vals = values[self.order]
            starts = self.indptr[self.nonempty]
            out[self.nonempty] = ufunc.reduceat(sorted_vals, starts, axis=0)
        return out


def segment_softmax(logits, segments, num_segments: int | None = None) -> Tensor:
    """Softmax of ``logits`` taken separately within each segment.

    ``logits`` has shape ``(E,)`` or ``(E, H)``; every column is normalised
    independently. The per-segment maximum is subtracted before
    exponentiation.
    """
    logits = as_tensor(logits)
    layout = segments if isinstance(segments, SegmentLayout) else \
        SegmentLayout(segments, num_segments)
    seg = layout.segments
    if len(seg) != logits.shape[0]:
        raise ValueError("one segment id is required per logit")
    z = logits.data
    shifted = z - layout.reduce(z, np.maximum)[seg]
    e = np.exp(shifted)
    alpha = e / layout.reduce(e, np.add)[seg]

    def backward(g):
        dot = layout.reduce(alpha * g, np.add)[seg]
        return (alpha * (g - dot),)

    return record(alpha, (logits,), backward)


class EdgeIndex:
    """Directed edges ``src -> dst`` prepared for sparse aggregation."""

    def __init__(self, src, dst, num_dst: int, num_src: int | None = None):
        self.src = np.asarray(src, dtype=np.intp)
        self.dst = np.asarray(dst, dtype=np.intp)
        if self.src.shape != self.dst.shape:
            raise ValueError("src and dst must have equal length")
        self.num_dst = num_dst
        self.num_src = num_dst if num_src is None else num_src
        self.order = np.lexsort((self.src, self.dst))
        counts = np.bincount(self.dst, minlength=num_dst)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.intp)
        self.sorted_src = self.src[self.order]

    def __len__(self) -> int:
        return len(self.src)

    def matrix(self, values: np.ndarray) -> sp.csr_matrix:
        """``num_dst x num_src`` CSR matrix with ``values[e]`` at (dst, src)."""
        return sp.csr_matrix((values[self.order], self.sorted_src, self.indptr),
                             shape=(self.num_dst, self.num_src))


def edge_aggregate(coef, x, edges: EdgeIndex, heads: int = 1) -> Tensor:
    """Per-head weighted sum of source rows into destination rows.

    ``out[i, k-th block] = sum over edges e=(j->i) of coef[e, k] * x[j, k-th block]``
    where ``x`` has ``heads`` equal column blocks. ``coef`` has shape
    ``(E,)`` or ``(E, heads)``; destinations without in-edges receive zeros.
    """
    coef = as_tensor(coef)
    x = as_tensor(x)
    c = coef.data if coef.data.ndim == 2 else coef.data[:, None]
    if c.shape != (len(edges), heads):
        raise ValueError(f"coef has shape {coef.shape}, expected ({len(edges)}, {heads})")
    if x.shape[0] != edges.num_src or x.shape[1] % heads:
        raise ValueError(f"cannot aggregate features of shape {x.shape}")
    width = x.shape[1] // heads
    xd = x.data
    mats = [edges.matrix(c[:, k]) for k in range(heads)]
    out = np.empty((edges.num_dst, x.shape[1]), dtype=DTYPE)
    for k, m in enumerate(mats):
        out[:, k * width:(k + 1) * width] = m @ xd[:, k * width:(k + 1) * width]

    def backward(g):
        gx = gc = None
        if x.requires_grad:
            gx = np.empty_like(xd)
            for k, m in enumerate(mats):
                blk = slice(k * width, (k + 1) * width)
                gx[:, blk] = m.T @ g[:, blk]
        if coef.requires_grad:
            prod = g[edges.dst].reshape(-1, heads, width) * \
                xd[edges.src].reshape(-1, heads, width)
            gc = prod.sum(axis=2).reshape(coef.shape)
        return gx, gc

    return record(out, (x, coef), backward)


# ---------------------------------------------------------------------------
# loss, initialisation, optimisation


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over every entry."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, DTYPE)
    if pred.shape != t.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return record(np.array(np.sum(diff * diff) / n), (pred,),
                  lambda g: (g * 2.0 * diff / n,))


def glorot_init(fan_in: int, fan_out: int, seed) -> Tensor:
    """Uniform Glorot initialisation in ``±sqrt(6 / (fan_in + fan_out))``.

    ``seed`` is an int or a ``numpy.random.Generator`` (consumed in place).
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fans must be positive, got {fan_in}x{fan_out}")
    rng = np.random.default_rng(seed)
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


@dataclass
class AdamState:
    """Optimizer state. Build with :meth:`for_params` before the first step."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float | None = 5.0
    step_count: int = 0
    first_moment: list[np.ndarray] | None = field(default=None, repr=False)
    second_moment: list[np.ndarray] | None = field(default=None, repr=False)

    @classmethod
    def for_params(cls, params: Sequence[Param], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        return state


def global_grad_norm(params: Sequence[Param]) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def adam_step(params: Sequence[Param], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Gradients are rescaled to global norm ``state.clip_norm`` when larger;
    ``p.grad`` itself is left untouched, so callers must zero it.
    """
    if state.first_moment is None or state.second_moment is None:
        raise RuntimeError("AdamState is not initialised; use AdamState.for_params")
    if len(state.first_moment) != len(params):
        raise ValueError("AdamState was built for a different parameter list")
    scale = 1.0
    if state.clip_norm is not None:
        norm = global_grad_norm(params)
        if norm > state.clip_norm:
            scale = state.clip_norm / norm
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad * scale if scale != 1.0 else p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Param],
                      eps: float = 1e-5) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` re-evaluates a scalar from the current parameter values. The error
    per entry is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    zero_grad(params)
    f().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError("non-finite value during finite differences")
                numeric = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - numeric) / max(1e-8, abs(numeric))
                worst = max(worst, err)
    return worst
