"""The shrinking block: four stages that map an (N, C) cloud to a coarser
(K, T) cloud with more channels (T > C).

  1. self-correlation: every point is rescaled by a softmax gate of its own
     channels, added back through a learned scalar residual weight,
  2. clustered graph convolution: K-Means groups points into K regions and
     every point aggregates kernel-weighted neighbours from its region,
  3. gated aggregation: two per-channel gates blend the (zero-padded)
     stage-1 cloud with the convolved cloud,
  4. region max-pool: channel-wise maximum over each region.

Reduction order inside a forward pass is canonical: rows are processed in
lexicographic order of the input points, so permuting the input (together
with its assignment) permutes stage outputs without changing a single bit
and leaves the pooled cloud bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .clustering import ClusterAssignment, cluster_points
from .errors import ConfigError, NumericError
from .nn import Binding, MlpParams, default_hidden, make_mlp, mlp_apply

CLAMP_EPS = 1e-6  # floor on the convolution denominator's magnitude


def kernel_width(in_dim: int, out_dim: int) -> int:
    """Width of a generated kernel, flattened row-major to (out_dim, in_dim).

    Single switch point for the kernel shape: generators emit full matrices
    so that kernel @ point is well defined for any in/out pair.
    """
    return out_dim * in_dim


@dataclass
class UnitParams:
    """Everything one shrinking block learns."""

    in_dim: int
    out_dim: int
    n_regions: int
    channel_mlp: MlpParams          # per-point channel weights (C -> C)
    residual_scale: np.ndarray      # scalar, starts at 0
    edge_kernel_mlp: MlpParams      # difference vector -> kernel (C -> T*C)
    point_kernel_mlp: MlpParams     # point -> kernel (C -> T*C)
    norm_mlp: MlpParams             # neighbourhood sum -> scalar (T -> 1)
    conv_bias: np.ndarray           # (1, T)
    base_blend_mlp: MlpParams       # padded-average -> gate logits (T -> T)
    conv_blend_mlp: MlpParams       # conv-average -> gate logits (T -> T)

    def arrays(self) -> list[np.ndarray]:
        out = self.channel_mlp.arrays()
        out.append(self.residual_scale)
        out += self.edge_kernel_mlp.arrays()
        out += self.point_kernel_mlp.arrays()
        out += self.norm_mlp.arrays()
        out.append(self.conv_bias)
        out += self.base_blend_mlp.arrays()
        out += self.conv_blend_mlp.arrays()
        return out

    def array_names(self) -> list[str]:
        names = []
        for tag, mlp in (("channel", self.channel_mlp),):
            names += _mlp_names(tag, mlp)
        names.append("residual_scale")
        names += _mlp_names("edge_kernel", self.edge_kernel_mlp)
        names += _mlp_names("point_kernel", self.point_kernel_mlp)
        names += _mlp_names("norm", self.norm_mlp)
        names.append("conv_bias")
        names += _mlp_names("base_blend", self.base_blend_mlp)
        names += _mlp_names("conv_blend", self.conv_blend_mlp)
        return names


def _mlp_names(tag, mlp):
    out = []
    for i in range(len(mlp.weights)):
        out.append(f"{tag}.w{i}")
        out.append(f"{tag}.b{i}")
    return out


def make_unit_params(in_dim, out_dim, n_regions, rng, hidden=None) -> UnitParams:
    """Fresh parameters. `hidden=None` applies the stock width rule to every
    internal MLP; otherwise the given widths are used for all of them."""
    if out_dim <= in_dim:
        raise ConfigError(
            f"a shrinking block must grow channels: out_dim {out_dim} <= in_dim {in_dim}")
    if n_regions < 1:
        raise ConfigError(f"n_regions must be >= 1, got {n_regions}")

    def widths(d_in, d_out):
        mid = list(hidden) if hidden is not None else default_hidden(d_in)
        return [d_in] + mid + [d_out]

    kw = kernel_width(in_dim, out_dim)
    return UnitParams(
        in_dim=in_dim,
        out_dim=out_dim,
        n_regions=n_regions,
        channel_mlp=make_mlp(widths(in_dim, in_dim), rng),
        residual_scale=np.zeros(()),
        edge_kernel_mlp=make_mlp(widths(in_dim, kw), rng),
        point_kernel_mlp=make_mlp(widths(in_dim, kw), rng),
        norm_mlp=make_mlp(widths(out_dim, 1), rng),
        conv_bias=np.zeros((1, out_dim)),
        base_blend_mlp=make_mlp(widths(out_dim, out_dim), rng),
        conv_blend_mlp=make_mlp(widths(out_dim, out_dim), rng),
    )


@dataclass
class UnitTrace:
    """Forward intermediates, all in the caller's point order."""

    self_corr: np.ndarray           # P0, (N, C)
    assignment: ClusterAssignment
    conv: np.ndarray                # convolved cloud, (N, T)
    blended: np.ndarray             # gated blend, (N, T)
    pool_src: np.ndarray            # (K, T) winning point index per channel
    gate_base: np.ndarray           # (1, T)
    gate_conv: np.ndarray           # (1, T)


def canonical_order(values: np.ndarray) -> np.ndarray:
    """Row order sorted lexicographically by coordinates. Identical rows may
    order arbitrarily; their payloads are identical so reductions agree."""
    return np.lexsort(values.T[::-1])


def _self_correlation_node(binding, params, x):
    weights = mlp_apply(binding, params.channel_mlp, x)
    gates = ad.softmax_rows(weights)
    bump = ad.mul(binding.param(params.residual_scale), ad.mul(gates, x))
    return ad.add(x, bump)


def _region_edges(labels):
    """Directed intra-region edges (self loops included), grouped by target
    row in ascending order; sources ascend within each group."""
    n = labels.shape[0]
    k = int(labels.max()) + 1 if n else 0
    sizes = np.bincount(labels, minlength=k)
    lengths = sizes[labels]
    starts = np.zeros(n, dtype=np.intp)
    np.cumsum(lengths[:-1], out=starts[1:])
    total = int(lengths.sum())
    src = np.empty(total, dtype=np.intp)
    for region in range(k):
        members = np.flatnonzero(labels == region)
        m = members.size
        if m == 0:
            continue
        slots = (starts[members][:, None] + np.arange(m)[None, :]).ravel()
        src[slots] = np.tile(members, m)
    dst = np.repeat(np.arange(n, dtype=np.intp), lengths)
    return dst, src, starts, lengths


def _kmeans_conv_node(binding, params, p0, labels):
    """Graph convolution in sorted row space; `labels` aligned with rows."""
    t = params.out_dim
    dst, src, starts, lengths = _region_edges(labels)
    neighbours = ad.gather_rows(p0, src)
    centers = ad.gather_rows(p0, dst)
    deltas = ad.sub(neighbours, centers)
    kernels = mlp_apply(binding, params.edge_kernel_mlp, deltas)
    contrib = ad.rows_kernel_matvec(kernels, neighbours, t)
    summed = ad.reduceat_rows(contrib, starts, lengths)

    norm = mlp_apply(binding, params.norm_mlp, summed)
    if not np.isfinite(norm.value).all():
        raise NumericError("kmeans_conv: normalizer output is not finite")
    counts = ad.constant(binding.tape, lengths.astype(np.float64)[:, None])
    denom = ad.clamp_min_magnitude(ad.mul(counts, norm), CLAMP_EPS)
    neighbourhood = ad.div(summed, denom)

    point_kernels = mlp_apply(binding, params.point_kernel_mlp, p0)
    self_term = ad.rows_kernel_matvec(point_kernels, p0, t)

    pre = ad.add(ad.add(neighbourhood, self_term), binding.param(params.conv_bias))
    return ad.sigmoid(pre)


def _aggregate_node(binding, params, p0, conv):
    padded = ad.pad_cols(p0, params.out_dim)
    base_avg = ad.mean_rows(padded)
    conv_avg = ad.mean_rows(conv)
    z_base = mlp_apply(binding, params.base_blend_mlp, base_avg)
    z_conv = mlp_apply(binding, params.conv_blend_mlp, conv_avg)
    # exp(a) / (exp(a) + exp(b)) == sigmoid(a - b), stable at any magnitude
    gate_base = ad.sigmoid(ad.sub(z_base, z_conv))
    gate_conv = ad.sigmoid(ad.sub(z_conv, z_base))
    blended = ad.add(ad.mul(gate_base, padded), ad.mul(gate_conv, conv))
    return blended, gate_base, gate_conv


def _pool_rows(values, labels, original_index):
    """Winning row per (region, channel): the maximum value, ties resolved
    toward the lowest original point index. Returns sorted-space rows and
    the matching original indices."""
    k = int(labels.max()) + 1
    t = values.shape[1]
    rows = np.empty((k, t), dtype=np.intp)
    src = np.empty((k, t), dtype=np.int64)
    for region in range(k):
        members = np.flatnonzero(labels == region)
        block = values[members]
        peak = block.max(axis=0)
        orig = original_index[members]
        tie_key = np.where(block == peak[None, :], orig[:, None], np.iinfo(np.int64).max)
        pick = np.argmin(tie_key, axis=0)
        rows[region] = members[pick]
        src[region] = orig[pick]
    return rows, src


def unit_forward_on_tape(binding, params, x, rng=None,
                         assignment=None, pool_indices=None):
    """Run the block on tape node `x` of shape (N, in_dim).

    `assignment` injects a fixed clustering (original point order);
    otherwise the stage-1 cloud is clustered with `rng`. `pool_indices`
    injects (K, T) original-point argmax winners. Returns the pooled node
    and a UnitTrace in the caller's point order.
    """
    n, c = x.value.shape
    if c != params.in_dim:
        raise ConfigError(f"unit expects {params.in_dim}-channel points, got {c}")
    if n < params.n_regions:
        raise ConfigError(
            f"cannot split {n} points into {params.n_regions} regions")

    order = canonical_order(x.value)
    rank = np.empty_like(order)
    rank[order] = np.arange(n)

    x_sorted = ad.gather_rows(x, order)
    p0 = _self_correlation_node(binding, params, x_sorted)

    if assignment is not None:
        if assignment.labels.shape[0] != n:
            raise ConfigError("injected assignment does not cover the cloud")
        if assignment.n_regions != params.n_regions:
            raise ConfigError("injected assignment has the wrong region count")
        labels_sorted = assignment.labels[order]
        final_assignment = assignment
    else:
        if rng is None:
            raise ConfigError("unit_forward needs an rng when no assignment is given")
        sorted_assignment, _ = cluster_points(p0.value, params.n_regions, rng)
        labels = np.empty(n, dtype=np.int64)
        labels[order] = sorted_assignment.labels
        labels_sorted = sorted_assignment.labels
        final_assignment = ClusterAssignment(
            labels=labels, centroids=sorted_assignment.centroids,
            n_regions=params.n_regions)

    conv = _kmeans_conv_node(binding, params, p0, labels_sorted)
    blended, gate_base, gate_conv = _aggregate_node(binding, params, p0, conv)

    if pool_indices is not None:
        pool_indices = np.asarray(pool_indices, dtype=np.int64)
        rows = rank[pool_indices]
        src = pool_indices
    else:
        rows, src = _pool_rows(blended.value, labels_sorted, order)
    pooled = ad.gather_pool(blended, rows)

    trace = UnitTrace(
        self_corr=p0.value[rank].copy(),
        assignment=final_assignment,
        conv=conv.value[rank].copy(),
        blended=blended.value[rank].copy(),
        pool_src=src,
        gate_base=gate_base.value.copy(),
        gate_conv=gate_conv.value.copy(),
    )
    return pooled, trace


def unit_forward(points, params, rng=None, assignment=None, pool_indices=None):
    """Array-in, array-out form. Returns (pooled (K, T), UnitTrace)."""
    binding = Binding(ad.Tape())
    x = ad.constant(binding.tape, np.asarray(points, dtype=np.float64))
    pooled, trace = unit_forward_on_tape(
        binding, params, x, rng=rng, assignment=assignment,
        pool_indices=pool_indices)
    return pooled.value.copy(), trace


# ---- array-level stage entry points --------------------------------------
# Thin wrappers over the tape builders; handy for tests and inspection.

def self_correlation(points, params):
    binding = Binding(ad.Tape())
    x = ad.constant(binding.tape, np.asarray(points, dtype=np.float64))
    return _self_correlation_node(binding, params, x).value.copy()


def kmeans_conv(points0, params, assignment):
    """Convolve a stage-1 cloud under a fixed assignment."""
    points0 = np.asarray(points0, dtype=np.float64)
    n = points0.shape[0]
    order = canonical_order(points0)
    rank = np.empty_like(order)
    rank[order] = np.arange(n)
    binding = Binding(ad.Tape())
    x = ad.constant(binding.tape, points0[order])
    out = _kmeans_conv_node(binding, params, x, assignment.labels[order])
    return out.value[rank].copy()


def aggregate(points0, conv, params):
    """Blend the padded stage-1 cloud with the convolved cloud.

    Returns (blended (N, T), gate_base (1, T), gate_conv (1, T)).
    """
    points0 = np.asarray(points0, dtype=np.float64)
    conv = np.asarray(conv, dtype=np.float64)
    if points0.shape[0] != conv.shape[0]:
        raise ConfigError("aggregate: row counts differ")
    order = canonical_order(points0)
    rank = np.empty_like(order)
    rank[order] = np.arange(points0.shape[0])
    binding = Binding(ad.Tape())
    p0 = ad.constant(binding.tape, points0[order])
    up = ad.constant(binding.tape, conv[order])
    blended, gate_base, gate_conv = _aggregate_node(binding, params, p0, up)
    return blended.value[rank].copy(), gate_base.value.copy(), gate_conv.value.copy()


def maxpool_regions(points1, assignment):
    """Channel-wise max per region. Returns (pooled (K, T), src (K, T))
    where src holds the winning point index per channel."""
    points1 = np.asarray(points1, dtype=np.float64)
    if points1.shape[0] != assignment.labels.shape[0]:
        raise ConfigError("maxpool: assignment does not cover the cloud")
    identity = np.arange(points1.shape[0])
    rows, src = _pool_rows(points1, assignment.labels, identity)
    cols = np.arange(points1.shape[1])
    return points1[rows, cols[None, :]].copy(), src
