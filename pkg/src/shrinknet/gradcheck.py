"""Dual-route gradient verification for every stage of the shrinking block.

The analytic route is the tape's backward pass; the independent route is
central finite differences over the raw forward evaluation. The two only
meet in the comparison, so a broken vector-Jacobian product cannot hide.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import seeds
from .errors import NumericError
from .nn import Binding, make_mlp, mlp_apply
from .unit import (
    make_unit_params,
    unit_forward,
    unit_forward_on_tape,
    _aggregate_node,
    _kmeans_conv_node,
    _self_correlation_node,
)

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_coords: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


class _SeededBinding(Binding):
    """Binding whose parameter nodes are supplied up front."""

    def __init__(self, tape, arrays, nodes):
        super().__init__(tape)
        for arr, node in zip(arrays, nodes):
            self._nodes[id(arr)] = node


def _weighted_sum(tape, out, rng):
    weights = ad.constant(tape, rng.normal(size=out.value.shape))
    return ad.sum_all(ad.mul(out, weights))


def _check(name, build, arrays, step):
    t0 = time.perf_counter()
    worst, details = ad.finite_diff_check(build, arrays, step=step)
    n = sum(d[2].size for d in details)
    return CheckResult(name=name, max_rel_err=worst, n_coords=n,
                       seconds=time.perf_counter() - t0)


def run_gradient_checks(seed: int = 0, step: float = 1e-5,
                        corrupt: bool = False) -> list[CheckResult]:
    """Check each stage and the composed block at a small scale
    (12 points, 3 -> 6 channels, 3 regions).

    `corrupt=True` appends a probe with a deliberately wrong backward rule;
    it must be reported as a failure, which is how the checker's own
    sensitivity is exercised.
    """
    rng = seeds.stream(seed, seeds.INIT, 77)
    n, c, t, k = 12, 3, 6, 3
    params = make_unit_params(c, t, k, rng, hidden=[4])
    cloud = rng.uniform(-1.0, 1.0, size=(n, c))
    # nudge the residual weight off its zero init so its gradient path is live
    params.residual_scale[...] = 0.3
    # move every bias off its zero initialization: self-edges feed exact-zero
    # deltas into the edge kernel, so zero biases would park whole rows of
    # hidden units on the ReLU kink, where central differences measure the
    # average of the two one-sided slopes
    for mlp in (params.channel_mlp, params.edge_kernel_mlp,
                params.point_kernel_mlp, params.norm_mlp,
                params.base_blend_mlp, params.conv_blend_mlp):
        for b in mlp.biases:
            b[...] = rng.uniform(-0.3, 0.3, size=b.shape)
    params.conv_bias[...] = rng.uniform(-0.3, 0.3, size=params.conv_bias.shape)
    # and hold the conv normalizer well away from its 1/x pole
    params.norm_mlp.biases[-1][...] = 2.0

    base_out, base_trace = unit_forward(cloud, params, rng=seeds.stream(seed, 7))
    assignment = base_trace.assignment
    pool_src = base_trace.pool_src
    loss_rng = seeds.stream(seed, seeds.INIT, 78)
    results = []

    sc_arrays = params.channel_mlp.arrays() + [params.residual_scale]

    def build_self_corr(tape, nodes):
        binding = _SeededBinding(tape, sc_arrays, nodes)
        x = ad.constant(tape, cloud)
        out = _self_correlation_node(binding, params, x)
        return _weighted_sum(tape, out, seeds.stream(seed, 90))

    results.append(_check("self_correlation", build_self_corr, sc_arrays, step))

    conv_arrays = (params.edge_kernel_mlp.arrays()
                   + params.point_kernel_mlp.arrays()
                   + params.norm_mlp.arrays()
                   + [params.conv_bias, cloud])

    def build_conv(tape, nodes):
        binding = _SeededBinding(tape, conv_arrays, nodes)
        out = _kmeans_conv_node(binding, params, nodes[-1], assignment.labels)
        return _weighted_sum(tape, out, seeds.stream(seed, 91))

    results.append(_check("kmeans_conv", build_conv, conv_arrays, step))

    conv_cloud = loss_rng.uniform(0.05, 0.95, size=(n, t))
    agg_arrays = (params.base_blend_mlp.arrays()
                  + params.conv_blend_mlp.arrays()
                  + [cloud, conv_cloud])

    def build_aggregate(tape, nodes):
        binding = _SeededBinding(tape, agg_arrays, nodes)
        blended, _, _ = _aggregate_node(binding, params, nodes[-2], nodes[-1])
        return _weighted_sum(tape, blended, seeds.stream(seed, 92))

    results.append(_check("aggregate", build_aggregate, agg_arrays, step))

    pool_cloud = loss_rng.uniform(-1.0, 1.0, size=(n, t))
    pool_rows = np.empty((k, t), dtype=np.intp)
    for region in range(k):
        members = np.flatnonzero(assignment.labels == region)
        pool_rows[region] = members[np.argmax(pool_cloud[members], axis=0)]

    def build_pool(tape, nodes):
        out = ad.gather_pool(nodes[0], pool_rows)
        return _weighted_sum(tape, out, seeds.stream(seed, 93))

    results.append(_check("maxpool_frozen", build_pool, [pool_cloud], step))

    unit_arrays = params.arrays() + [cloud]

    def build_unit(tape, nodes):
        binding = _SeededBinding(tape, unit_arrays, nodes)
        pooled, _ = unit_forward_on_tape(
            binding, params, nodes[-1],
            assignment=assignment, pool_indices=pool_src)
        return _weighted_sum(tape, pooled, seeds.stream(seed, 94))

    results.append(_check("composed_unit", build_unit, unit_arrays, step))

    head = make_mlp([t, 5, 4], seeds.stream(seed, seeds.INIT, 79))
    for b in head.biases:
        b[...] = loss_rng.uniform(-0.3, 0.3, size=b.shape)
    descriptor = loss_rng.uniform(-1.0, 1.0, size=(1, t))
    head_arrays = head.arrays() + [descriptor]

    def build_classifier(tape, nodes):
        binding = _SeededBinding(tape, head_arrays, nodes)
        logits = mlp_apply(binding, head, nodes[-1])
        log_probs = ad.log_softmax_rows(logits)
        pick = np.zeros_like(log_probs.value)
        pick[0, 1] = -1.0  # negative log-likelihood of class 1
        return ad.sum_all(ad.mul(log_probs, ad.constant(tape, pick)))

    results.append(_check("classifier", build_classifier, head_arrays, step))

    if corrupt:
        probe = loss_rng.uniform(0.5, 1.5, size=(4, 3))

        def build_corrupt(tape, nodes):
            x = nodes[0]
            out = ad.Node(tape, x.value ** 2, (x,),
                          lambda g: (g * 2.0 * x.value * 1.05,))  # wrong on purpose
            return ad.sum_all(out)

        results.append(_check("corrupted_probe", build_corrupt, [probe], step))

    return results


def require_all_pass(results):
    """Raise NumericError on the first failed check."""
    for r in results:
        if not r.passed:
            raise NumericError(
                f"gradient check {r.name!r} failed: max relative error "
                f"{r.max_rel_err:.3e} exceeds {TOLERANCE:.0e}")
