"""Reverse-mode differentiation over an explicit tape.

Only the handful of row-oriented primitives the model needs are provided.
Every primitive computes its forward value eagerly; when at least one input
is watched by a :class:`Tape`, the primitive also appends a record holding
the closure that maps the output gradient to input gradients.

Inputs that are plain arrays (or tensors with no tape) are constants, so the
same model code runs with or without gradient recording.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from kgdiv.errors import ContractError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "gather_rows",
    "scatter_add_rows",
    "elementwise_product",
    "mean_rows",
    "softmax_vector",
    "euclidean_distance",
    "normalize_rows",
    "squared_norm",
    "dot",
    "log_sigmoid",
    "scalar_exp_mean_log",
    "add",
    "sub",
    "scale",
    "scale_rows",
    "sum_all",
    "sum_rows",
    "mean_all",
    "pairwise_sq_dists",
    "check_gradients",
    "ContractError",
    "NumericError",
]


class Tensor:
    __slots__ = ("value", "tape", "grad", "name")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = np.asarray(value)
        self.tape = tape
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        watched = " watched" if self.tape is not None else ""
        return f"<Tensor{tag} shape={self.shape} dtype={self.dtype}{watched}>"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered log of executed primitives.

    ``backward`` walks the log in exact reverse order and *adds* the result
    into each leaf's ``grad``; calling it twice doubles every gradient.
    """

    def __init__(self):
        self._records: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []
        self._leaves: list[Tensor] = []

    def leaf(self, array, name: str | None = None) -> Tensor:
        t = Tensor(array, self, name)
        self._leaves.append(t)
        return t

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves)

    @property
    def op_names(self) -> list[str]:
        return [r[0] for r in self._records]

    def __len__(self):
        return len(self._records)

    def _record(self, op, out, inputs, backward):
        self._records.append((op, out, inputs, backward))

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.tape is self:
            grads[id(loss)] = np.full_like(loss.value, seed)
        for _op, out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or t.tape is not self:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.value)
            if g is not None:
                leaf.grad = leaf.grad + g


def _emit(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(op)
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is not None and t.tape is not tape:
            raise ContractError(f"{op}: inputs recorded on different tapes")
        tape = t.tape
    out = Tensor(value, tape)
    if tape is not None:
        tape._record(op, out, tuple(inputs), backward)
    return out


def _index(index) -> np.ndarray:
    idx = np.asarray(index)
    if idx.ndim != 1 or (idx.size and not np.issubdtype(idx.dtype, np.integer)):
        raise ContractError("index must be a 1-D integer array")
    return idx.astype(np.intp, copy=False)


def _segment_sum(values: np.ndarray, index: np.ndarray, n: int, weights=None) -> np.ndarray:
    # sparse (n x k) @ values: deterministic per-row accumulation
    k = index.shape[0]
    w = np.ones(k, dtype=values.dtype) if weights is None else weights.astype(values.dtype, copy=False)
    s = sp.csr_matrix((w, (index, np.arange(k))), shape=(n, k))
    out = s @ values
    return np.asarray(out, dtype=values.dtype)


def _check_same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- primitives -----------------------------------------------------------


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    idx = _index(index)
    if x.value.ndim != 2:
        raise ContractError("gather_rows: expected a matrix")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"gather_rows: index out of range for {n} rows")
    return _emit("gather_rows", x.value[idx], (x,), lambda g: (_segment_sum(g, idx, n),))


def scatter_add_rows(x, index, n_rows: int, weights=None) -> Tensor:
    """``out[index[k]] += weights[k] * x[k]``; ``weights`` are constants."""
    x = as_tensor(x)
    idx = _index(index)
    if x.shape[0] != idx.shape[0]:
        raise ContractError("scatter_add_rows: one index per input row required")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ContractError(f"scatter_add_rows: index out of range for {n_rows} rows")
    w = None if weights is None else np.asarray(weights)
    if w is not None and w.shape != idx.shape:
        raise ContractError("scatter_add_rows: one weight per row required")
    value = _segment_sum(x.value, idx, n_rows, w)

    def backward(g):
        gx = g[idx]
        if w is not None:
            gx = gx * (w.astype(g.dtype)[:, None] if g.ndim == 2 else w.astype(g.dtype))
        return (gx,)

    return _emit("scatter_add_rows", value, (x,), backward)


def elementwise_product(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("elementwise_product", a, b)
    av, bv = a.value, b.value
    return _emit("elementwise_product", av * bv, (a, b), lambda g: (g * bv, g * av))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    return _emit("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.value.dtype.type(c) if x.value.dtype.kind == "f" else c
    return _emit("scale", x.value * c, (x,), lambda g: (g * c,))


def scale_rows(x, w) -> Tensor:
    """Multiply row k of ``x`` by ``w[k]``; gradient flows into both."""
    x, w = as_tensor(x), as_tensor(w)
    if w.value.ndim != 1 or x.value.ndim != 2 or w.shape[0] != x.shape[0]:
        raise ContractError("scale_rows: need matrix and one weight per row")
    xv, wv = x.value, w.value
    return _emit(
        "scale_rows",
        xv * wv[:, None],
        (x, w),
        lambda g: (g * wv[:, None], np.sum(g * xv, axis=1)),
    )


def mean_rows(x, segments=None, n_segments: int | None = None) -> Tensor:
    """Mean of all rows, or of the rows of each segment when ``segments`` is given."""
    x = as_tensor(x)
    if x.value.ndim != 2:
        raise ContractError("mean_rows: expected a matrix")
    k = x.shape[0]
    if segments is None:
        if k == 0:
            raise ContractError("mean_rows: empty row set")
        # same accumulation as the segmented path, so both agree bitwise
        w = np.full(k, 1.0 / k, dtype=x.dtype)
        value = _segment_sum(x.value, np.zeros(k, dtype=np.intp), 1, w)[0]
        return _emit("mean_rows", value, (x,), lambda g: (np.broadcast_to(g * w[0], x.shape).copy(),))
    seg = _index(segments)
    if seg.shape[0] != k:
        raise ContractError("mean_rows: one segment id per row required")
    n = int(n_segments) if n_segments is not None else int(seg.max()) + 1
    counts = np.bincount(seg, minlength=n)
    if np.any(counts == 0):
        raise ContractError("mean_rows: empty segment")
    w = (1.0 / counts)[seg].astype(x.dtype)
    out = scatter_add_rows(x, seg, n, w)
    return out


def softmax_vector(x, segments=None, n_segments: int | None = None) -> Tensor:
    """Softmax of a vector, or an independent softmax inside each segment."""
    x = as_tensor(x)
    xv = x.value
    if xv.ndim != 1 or xv.shape[0] < 1:
        raise ContractError("softmax_vector: need a nonempty vector")
    if segments is None:
        e = np.exp(xv - xv.max())
        s = e / e.sum()

        def backward(g):
            return (s * (g - np.dot(g, s)),)

        return _emit("softmax_vector", s, (x,), backward)

    seg = _index(segments)
    if seg.shape != xv.shape:
        raise ContractError("softmax_vector: one segment id per entry required")
    n = int(n_segments) if n_segments is not None else int(seg.max()) + 1
    m = np.full(n, -np.inf, dtype=xv.dtype)
    np.maximum.at(m, seg, xv)
    e = np.exp(xv - m[seg])
    z = np.bincount(seg, weights=e, minlength=n).astype(xv.dtype)
    s = e / z[seg]

    def backward_seg(g):
        inner = np.bincount(seg, weights=g * s, minlength=n).astype(g.dtype)
        return (s * (g - inner[seg]),)

    return _emit("softmax_vector", s, (x,), backward_seg)


def euclidean_distance(a, b) -> Tensor:
    """Row-wise L2 distance (scalar for vectors).

    ``b`` may be a single vector broadcast against the rows of ``a``. The
    gradient at distance 0 is taken as 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    broadcast = a.value.ndim == 2 and b.value.ndim == 1
    if broadcast:
        if a.shape[1] != b.shape[0]:
            raise ContractError(f"euclidean_distance: shape mismatch {a.shape} vs {b.shape}")
    else:
        _check_same_shape("euclidean_distance", a, b)
    diff = a.value - b.value
    d = np.sqrt(np.sum(diff * diff, axis=-1))

    def backward(g):
        safe = np.where(d > 0, d, 1)
        coef = np.where(d > 0, g / safe, 0).astype(diff.dtype)
        ga = coef[..., None] * diff
        return ga, (-ga.sum(axis=0) if broadcast else -ga)

    return _emit("euclidean_distance", d, (a, b), backward)


def normalize_rows(x) -> Tensor:
    """Scale each row to unit L2 norm."""
    x = as_tensor(x)
    xv = x.value
    norm = np.sqrt(np.sum(xv * xv, axis=1))
    if np.any(norm == 0):
        raise NumericError("normalize_rows", "zero-norm row")
    y = xv / norm[:, None]

    def backward(g):
        return ((g - y * np.sum(g * y, axis=1)[:, None]) / norm[:, None],)

    return _emit("normalize_rows", y, (x,), backward)


def squared_norm(x, axis: int | None = None) -> Tensor:
    """Sum of squares over everything (``axis=None``) or along ``axis``."""
    x = as_tensor(x)
    xv = x.value
    value = np.sum(xv * xv, axis=axis)

    def backward(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (2.0 * gg * xv,)

    return _emit("squared_norm", value, (x,), backward)


def dot(a, b) -> Tensor:
    """Inner product along the last axis (row-wise for matrices)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("dot", a, b)
    av, bv = a.value, b.value
    return _emit(
        "dot",
        np.sum(av * bv, axis=-1),
        (a, b),
        lambda g: (g[..., None] * bv, g[..., None] * av),
    )


def log_sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    value = -np.logaddexp(0, -xv)
    # d/dx log sigma(x) = sigma(-x)
    return _emit("log_sigmoid", value, (x,), lambda g: (g * np.exp(-np.logaddexp(0, xv)),))


def scalar_exp_mean_log(x) -> Tensor:
    """``log(mean(exp(x)))`` of a vector, computed with a max shift."""
    x = as_tensor(x)
    xv = x.value
    if xv.ndim != 1 or xv.shape[0] < 1:
        raise ContractError("scalar_exp_mean_log: need a nonempty vector")
    m = xv.max()
    e = np.exp(xv - m)
    value = np.asarray(m + np.log(e.mean()), dtype=xv.dtype)
    s = e / e.sum()
    return _emit("scalar_exp_mean_log", value, (x,), lambda g: (g * s,))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _emit(
        "sum_all",
        np.asarray(x.value.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.full_like(x.value, g),),
    )


def sum_rows(x) -> Tensor:
    """Column sums of a matrix."""
    x = as_tensor(x)
    if x.value.ndim != 2:
        raise ContractError("sum_rows: expected a matrix")
    return _emit("sum_rows", x.value.sum(axis=0), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.value.size
    if n == 0:
        raise ContractError("mean_all: empty input")
    return _emit(
        "mean_all",
        np.asarray(x.value.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full_like(x.value, g / n),),
    )


def pairwise_sq_dists(x) -> Tensor:
    """Squared distances of all unordered row pairs i < j, in ``np.triu_indices`` order."""
    x = as_tensor(x)
    xv = x.value
    if xv.ndim != 2 or xv.shape[0] < 2:
        raise ContractError("pairwise_sq_dists: need at least two rows")
    b = xv.shape[0]
    iu = np.triu_indices(b, 1)
    sq = np.sum(xv * xv, axis=1)
    gram = xv @ xv.T
    full = sq[:, None] + sq[None, :] - 2.0 * gram
    # rounding can push coincident rows slightly below zero
    value = np.maximum(full[iu], 0)

    def backward(g):
        gm = np.zeros((b, b), dtype=g.dtype)
        gm[iu] = g
        gm = gm + gm.T
        return (2.0 * (gm.sum(axis=1)[:, None] * xv - gm @ xv),)

    return _emit("pairwise_sq_dists", value, (x,), backward)


# --- verification -----------------------------------------------------------


def check_gradients(
    loss_builder: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    n_samples: int | None = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients with central differences in float64.

    ``loss_builder`` maps a dict of named tensors to a scalar tensor and must
    be a pure function of those tensors. Returns the max over checked
    coordinates of ``|analytic - numeric| / max(1, |numeric|)``; all
    coordinates are checked unless ``n_samples`` caps the count per table.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in base.items()}
    loss = loss_builder(leaves)
    tape.backward(loss)

    def evaluate(name, flat_idx, delta):
        arr = base[name].copy()
        arr.flat[flat_idx] += delta
        feed = {k: Tensor(arr if k == name else v) for k, v in base.items()}
        return float(loss_builder(feed).value)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in base.items():
        coords = np.arange(arr.size)
        if n_samples is not None and n_samples < arr.size:
            coords = rng.choice(arr.size, size=n_samples, replace=False)
        analytic = leaves[name].grad.reshape(-1)
        for c in coords:
            numeric = (evaluate(name, c, epsilon) - evaluate(name, c, -epsilon)) / (2 * epsilon)
            err = abs(analytic[c] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
