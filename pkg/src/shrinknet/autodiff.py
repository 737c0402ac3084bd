"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every primitive operation in creation order; ``backward``
replays the records in reverse and accumulates vector-Jacobian products.
Values are plain numpy arrays, so the forward math of each primitive is
ordinary vectorized numpy and the tape only adds bookkeeping.

Design constraints honoured here:
  * everything is float64; integer inputs are cast on entry,
  * one tape per forward evaluation, never shared across threads,
  * gradients of leaves that do not influence the loss are exactly zero,
  * reductions follow the row order of their input arrays, so callers that
    need order-independent bits must canonicalize rows before reducing.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError


def _as_f64(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Tape:
    """Append-only record of primitive operations, in creation order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


class Node:
    """One recorded value. ``parents`` and ``vjp`` are empty for leaves."""

    __slots__ = ("tape", "value", "parents", "vjp", "index")

    def __init__(self, tape, value, parents, vjp):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape


def leaf(tape, value):
    """Record an input (parameter or constant). Copies nothing."""
    return Node(tape, _as_f64(value), (), None)


# `constant` is the same mechanism; the name marks intent at call sites.
constant = leaf


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b, out, vjp_a, vjp_b):
    def vjp(g):
        return (_unbroadcast(vjp_a(g), a.shape), _unbroadcast(vjp_b(g), b.shape))

    return Node(a.tape, out, (a, b), vjp)


def add(a, b):
    return _binary(a, b, a.value + b.value, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, a.value - b.value, lambda g: g, lambda g: -g)


def mul(a, b):
    return _binary(a, b, a.value * b.value,
                   lambda g: g * b.value, lambda g: g * a.value)


def div(a, b):
    out = a.value / b.value
    return _binary(a, b, out,
                   lambda g: g / b.value,
                   lambda g: -g * a.value / (b.value * b.value))


def scale(a, s: float):
    """Multiply by a python scalar treated as a constant."""
    s = float(s)

    def vjp(g):
        return (g * s,)

    return Node(a.tape, a.value * s, (a,), vjp)


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ConfigError("matmul expects 2-d operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise ConfigError(
            f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def vjp(g):
        return (g @ b.value.T, a.value.T @ g)

    return Node(a.tape, out, (a, b), vjp)


def relu(a):
    out = np.maximum(a.value, 0.0)
    mask = a.value > 0.0

    def vjp(g):
        return (g * mask,)

    return Node(a.tape, out, (a,), vjp)


def sigmoid_values(x):
    """Numerically stable logistic function on a raw array."""
    x = _as_f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[neg])
    out[neg] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = sigmoid_values(a.value)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Node(a.tape, out, (a,), vjp)


def softmax_values(x):
    """Row-wise softmax of a raw array, stabilized by max subtraction."""
    x = _as_f64(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a):
    out = softmax_values(a.value)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return Node(a.tape, out, (a,), vjp)


def log_softmax_values(x):
    x = _as_f64(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_rows(a):
    out = log_softmax_values(a.value)
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return Node(a.tape, out, (a,), vjp)


def sum_all(a):
    out = np.float64(a.value.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return Node(a.tape, np.asarray(out), (a,), vjp)


def mean_rows(a):
    """Mean over rows: (N, C) -> (1, C). Summation follows row order."""
    n = a.value.shape[0]
    out = a.value.sum(axis=0, keepdims=True) / n

    def vjp(g):
        return (np.broadcast_to(g / n, a.value.shape).copy(),)

    return Node(a.tape, out, (a,), vjp)


def pad_cols(a, total: int):
    """Zero-pad (N, C) on the right to (N, total)."""
    n, c = a.value.shape
    if total < c:
        raise ConfigError(f"pad_cols: target width {total} < current {c}")
    out = np.zeros((n, total), dtype=np.float64)
    out[:, :c] = a.value

    def vjp(g):
        return (g[:, :c].copy(),)

    return Node(a.tape, out, (a,), vjp)


def gather_rows(a, idx):
    """Select rows by integer index, duplicates allowed."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.value[idx]

    def vjp(g):
        acc = np.zeros_like(a.value)
        np.add.at(acc, idx, g)
        return (acc,)

    return Node(a.tape, out, (a,), vjp)


def reduceat_rows(a, starts, lengths):
    """Sum contiguous row groups: group g is rows[starts[g]:starts[g]+lengths[g]].

    Groups must tile the input exactly and each must be non-empty.
    """
    starts = np.asarray(starts, dtype=np.intp)
    lengths = np.asarray(lengths, dtype=np.intp)
    out = np.add.reduceat(a.value, starts, axis=0)

    def vjp(g):
        return (np.repeat(g, lengths, axis=0),)

    return Node(a.tape, out, (a,), vjp)


def rows_kernel_matvec(kflat, x, t_dim: int):
    """Apply a per-row generated kernel: row e of `kflat` holds a (t_dim, C)
    matrix flattened row-major, which multiplies row e of `x` (length C)."""
    e, tc = kflat.value.shape
    c = x.value.shape[1]
    if tc != t_dim * c or x.value.shape[0] != e:
        raise ConfigError(
            f"kernel_matvec shape mismatch: kernels {kflat.value.shape}, "
            f"points {x.value.shape}, t_dim {t_dim}")
    k3 = kflat.value.reshape(e, t_dim, c)
    out = np.einsum("etc,ec->et", k3, x.value)

    def vjp(g):
        gk = (g[:, :, None] * x.value[:, None, :]).reshape(e, tc)
        gx = np.einsum("et,etc->ec", g, k3)
        return (gk, gx)

    return Node(kflat.tape, out, (kflat, x), vjp)


def concat_rows(nodes):
    """Stack 2-d nodes vertically. All must share a column count and a tape."""
    if not nodes:
        raise ConfigError("concat_rows: need at least one node")
    tape = nodes[0].tape
    widths = {n.value.shape[1] for n in nodes}
    if len(widths) != 1:
        raise ConfigError(f"concat_rows: mixed column counts {sorted(widths)}")
    out = np.concatenate([n.value for n in nodes], axis=0)
    row_counts = [n.value.shape[0] for n in nodes]
    bounds = np.cumsum([0] + row_counts)

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return Node(tape, out, tuple(nodes), vjp)


def clamp_min_magnitude(a, eps: float):
    """Push values inside (-eps, eps) out to +/-eps, keeping the sign.

    Zero is treated as positive. The local derivative is zero inside the
    clamped band and one outside it.
    """
    v = a.value
    mag_ok = np.abs(v) >= eps
    sign = np.where(v < 0.0, -1.0, 1.0)
    out = np.where(mag_ok, v, sign * eps)

    def vjp(g):
        return (g * mag_ok,)

    return Node(a.tape, out, (a,), vjp)


def gather_pool(a, row_idx):
    """Per-channel row selection: out[k, c] = a[row_idx[k, c], c].

    The index matrix is a forward-pass constant, so gradients route to the
    selected entries only.
    """
    row_idx = np.asarray(row_idx, dtype=np.intp)
    k, t = row_idx.shape
    if t != a.value.shape[1]:
        raise ConfigError("gather_pool: index width must match channel count")
    cols = np.arange(t)
    out = a.value[row_idx, cols[None, :]]

    def vjp(g):
        acc = np.zeros_like(a.value)
        np.add.at(acc, (row_idx, np.broadcast_to(cols, (k, t))), g)
        return (acc,)

    return Node(a.tape, out, (a,), vjp)


def backward(tape, loss, wrt):
    """Gradients of scalar `loss` with respect to the nodes in `wrt`.

    Returns one array per entry of `wrt`, matching its shape. Leaves that
    the loss never touched get exact zeros.
    """
    if loss.tape is not tape:
        raise ConfigError("backward: loss was not recorded on this tape")
    if loss.value.shape != ():
        raise ConfigError(f"backward: loss must be scalar, got {loss.value.shape}")
    for node in wrt:
        if node.tape is not tape:
            raise ConfigError("backward: wrt node from a different tape")

    grads = [None] * len(tape.nodes)
    grads[loss.index] = np.asarray(1.0)
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads[node.index]
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if grads[parent.index] is None:
                grads[parent.index] = pg
            else:
                grads[parent.index] = grads[parent.index] + pg
        grads[node.index] = g  # keep; cheap at our scale

    out = []
    for node in wrt:
        g = grads[node.index]
        out.append(np.zeros_like(node.value) if g is None else _as_f64(g))
    return out


def finite_diff_check(build, params, step=1e-5):
    """Compare backward() against central finite differences.

    `build(tape, nodes)` must construct a scalar loss node from the given
    leaf nodes; `params` is a list of arrays defining the evaluation point.
    Returns (max_rel_err, details) where details lists one record per
    parameter: (index, max rel err, analytic grad, numeric grad).

    The relative error of a coordinate is |a - n| / max(|a|, |n|, 1e-3);
    the floor absorbs finite-difference roundoff where both routes agree
    the gradient is tiny.
    """
    params = [_as_f64(p) for p in params]

    tape = Tape()
    nodes = [leaf(tape, p) for p in params]
    loss = build(tape, nodes)
    if not np.isfinite(loss.value):
        raise NumericError("finite_diff_check: non-finite loss at the base point")
    analytic = backward(tape, loss, nodes)

    def eval_at(point):
        t = Tape()
        ns = [leaf(t, p) for p in point]
        value = build(t, ns).value
        if not np.isfinite(value):
            raise NumericError("finite_diff_check: non-finite loss during probe")
        return float(value)

    details = []
    worst = 0.0
    for i, base in enumerate(params):
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            up = eval_at(params)
            flat[j] = keep - step
            down = eval_at(params)
            flat[j] = keep
            num_flat[j] = (up - down) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic[i]), np.abs(numeric)), 1e-3)
        rel = np.abs(analytic[i] - numeric) / denom
        err = float(rel.max()) if rel.size else 0.0
        worst = max(worst, err)
        details.append((i, err, analytic[i], numeric))
    return worst, details
