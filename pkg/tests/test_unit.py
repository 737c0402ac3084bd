"""The shrinking block: hand-derived stage oracles, composition, and the
permutation/identity invariances the architecture promises."""

import numpy as np
import pytest

from shrinknet import seeds
from shrinknet.clustering import ClusterAssignment, cluster_points
from shrinknet.errors import ConfigError
from shrinknet.nn import MlpParams
from shrinknet.unit import (aggregate, kernel_width, kmeans_conv,
                            make_unit_params, maxpool_regions,
                            self_correlation, unit_forward)

# ---- frozen oracles (derived by hand, see the inline arithmetic) ----------

# p=[[1,2],[3,4]], channel map = identity, residual weight 0.5:
# softmax of both rows is [0.26894142137, 0.73105857863] (gap of 1), so
# out = p + 0.5 * softmax * p
SELF_CORR_EXPECT = [[1.1344707106849976, 2.731058578630005],
                    [3.4034121320549926, 5.46211715726001]]

# C=1, T=2, one region holding p0=[[1],[2]]; edge kernel F(d)=[d+0.5, 2d-0.5],
# point kernel W(p)=[-p, p], normalizer M(b)=0.5 b1 + 0.25 b2 + 0.1,
# bias [0.2, -0.2]; betas come out [3.5, 2.5] and [0.5, -3.5]
CONV_EXPECT = [[0.4767843815867493, 0.786683747682047],
               [0.013705058023267212, 0.9992025816171715]]

# p0=[[1],[3]] zero-padded to width 2, conv=[[0.2,0.4],[0.6,0.8]];
# column means are [2,0] and [0.4,0.6], blend maps identity and +[0.1,-0.1]
AGG_GATE_BASE = [0.8175744761936437, 0.3775406687981454]
AGG_GATE_CONV = [0.18242552380635635, 0.6224593312018547]
AGG_EXPECT = [[0.854059580954915, 0.2489837324807419],
              [2.5621787428647447, 0.4979674649614838]]


def _identity_mlp(width, bias=None):
    return MlpParams(widths=[width, width], weights=[np.eye(width)],
                     biases=[np.zeros(width) if bias is None else np.asarray(bias, dtype=float)],
                     out_activation="identity")


def _linear_mlp(weight, bias):
    weight = np.asarray(weight, dtype=float)
    return MlpParams(widths=[weight.shape[0], weight.shape[1]],
                     weights=[weight], biases=[np.asarray(bias, dtype=float)],
                     out_activation="identity")


def test_kernel_width_rule():
    assert kernel_width(3, 6) == 18
    assert kernel_width(6, 12) == 72


def test_self_correlation_hand_oracle():
    params = make_unit_params(2, 4, 1, seeds.stream(0, seeds.INIT, 0), hidden=[3])
    params.channel_mlp = _identity_mlp(2)
    params.residual_scale[...] = 0.5
    out = self_correlation(np.array([[1.0, 2.0], [3.0, 4.0]]), params)
    np.testing.assert_allclose(out, SELF_CORR_EXPECT, atol=1e-14)


def test_self_correlation_zero_residual_is_identity():
    # the residual weight initializes to zero, so a fresh block passes
    # its input through this stage untouched
    params = make_unit_params(3, 6, 2, seeds.stream(0, seeds.INIT, 1))
    points = seeds.stream(0, seeds.CLUSTER, 9).standard_normal((10, 3))
    assert np.array_equal(self_correlation(points, params), points)


def test_kmeans_conv_hand_oracle():
    params = make_unit_params(1, 2, 1, seeds.stream(0, seeds.INIT, 2), hidden=[2])
    params.edge_kernel_mlp = _linear_mlp([[1.0, 2.0]], [0.5, -0.5])
    params.point_kernel_mlp = _linear_mlp([[-1.0, 1.0]], [0.0, 0.0])
    params.norm_mlp = _linear_mlp([[0.5], [0.25]], [0.1])
    params.conv_bias[...] = [[0.2, -0.2]]
    assignment = ClusterAssignment(labels=np.array([0, 0]),
                                   centroids=np.array([[1.5]]), n_regions=1)
    out = kmeans_conv(np.array([[1.0], [2.0]]), params, assignment)
    np.testing.assert_allclose(out, CONV_EXPECT, atol=1e-14)


def test_kmeans_conv_output_is_sigmoid_bounded():
    params = make_unit_params(3, 5, 3, seeds.stream(1, seeds.INIT, 3), hidden=[6])
    points = seeds.stream(1, seeds.CLUSTER, 0).standard_normal((14, 3))
    assignment, _ = cluster_points(points, 3, seeds.stream(1, seeds.CLUSTER, 1))
    out = kmeans_conv(points, params, assignment)
    assert out.shape == (14, 5)
    # saturation may hit the bounds exactly, so the interval is closed
    assert (out >= 0.0).all() and (out <= 1.0).all()


def test_aggregate_hand_oracle_and_gate_sum():
    params = make_unit_params(1, 2, 1, seeds.stream(0, seeds.INIT, 4), hidden=[2])
    params.base_blend_mlp = _identity_mlp(2)
    params.conv_blend_mlp = _identity_mlp(2, bias=[0.1, -0.1])
    p0 = np.array([[1.0], [3.0]])
    conv = np.array([[0.2, 0.4], [0.6, 0.8]])
    blended, gate_base, gate_conv = aggregate(p0, conv, params)
    assert gate_base.ravel() == pytest.approx(AGG_GATE_BASE, abs=1e-15)
    assert gate_conv.ravel() == pytest.approx(AGG_GATE_CONV, abs=1e-15)
    np.testing.assert_allclose(blended, AGG_EXPECT, atol=1e-14)
    # the two gates are softmax weights of each other: they sum to one
    assert np.abs(gate_base + gate_conv - 1.0).max() <= 1e-15


def test_gate_sum_holds_for_random_blocks():
    for trial in range(20):
        params = make_unit_params(3, 6, 2, seeds.stream(2, seeds.INIT, trial),
                                  hidden=[5])
        for mlp in (params.base_blend_mlp, params.conv_blend_mlp):
            for b in mlp.biases:
                b[...] = seeds.stream(3, seeds.INIT, trial).uniform(-2, 2, size=b.shape)
        rng = seeds.stream(2, seeds.CLUSTER, trial)
        p0 = rng.standard_normal((9, 3)) * 10.0
        conv = rng.uniform(0, 1, size=(9, 6))
        _, gate_base, gate_conv = aggregate(p0, conv, params)
        assert np.abs(gate_base + gate_conv - 1.0).max() <= 1e-15


def test_maxpool_hand_oracle_tie_goes_to_lowest_index():
    values = np.array([[1.0, 5.0], [3.0, 5.0], [3.0, 2.0]])
    assignment = ClusterAssignment(labels=np.array([0, 0, 1]),
                                   centroids=np.zeros((2, 2)), n_regions=2)
    pooled, src = maxpool_regions(values, assignment)
    assert np.array_equal(pooled, [[3.0, 5.0], [3.0, 2.0]])
    # channel 1 of region 0 ties between points 0 and 1: point 0 wins
    assert np.array_equal(src, [[1, 0], [2, 2]])


def test_unit_forward_equals_the_stage_chain():
    params = make_unit_params(3, 6, 3, seeds.stream(4, seeds.INIT, 5), hidden=[4])
    params.residual_scale[...] = 0.25
    cloud = seeds.stream(4, seeds.CLUSTER, 0).standard_normal((15, 3))

    p0 = self_correlation(cloud, params)
    assignment, _ = cluster_points(p0, 3, seeds.stream(4, seeds.CLUSTER, 1))
    conv = kmeans_conv(p0, params, assignment)
    blended, gate_base, gate_conv = aggregate(p0, conv, params)
    pooled, src = maxpool_regions(blended, assignment)

    out, trace = unit_forward(cloud, params, assignment=assignment)
    assert np.array_equal(out, pooled)
    assert np.array_equal(trace.self_corr, p0)
    assert np.array_equal(trace.conv, conv)
    assert np.array_equal(trace.blended, blended)
    assert np.array_equal(trace.pool_src, src)
    assert np.array_equal(trace.gate_base, gate_base)
    assert np.array_equal(trace.assignment.labels, assignment.labels)


def test_whole_cloud_permutation_is_bit_identical():
    # clustering runs in canonical row order, so even a recomputed
    # assignment cannot see the permutation
    params = make_unit_params(3, 6, 4, seeds.stream(5, seeds.INIT, 6))
    rng = np.random.default_rng(123)
    cloud = rng.standard_normal((24, 3))
    out1, _ = unit_forward(cloud, params, rng=seeds.stream(5, seeds.CLUSTER, 7))
    for trial in range(10):
        perm = rng.permutation(24)
        out2, _ = unit_forward(cloud[perm], params,
                               rng=seeds.stream(5, seeds.CLUSTER, 7))
        assert np.array_equal(out1, out2)


def test_whole_cloud_permutation_with_carried_assignment():
    params = make_unit_params(3, 6, 4, seeds.stream(6, seeds.INIT, 7))
    rng = np.random.default_rng(321)
    cloud = rng.standard_normal((20, 3))
    out1, tr1 = unit_forward(cloud, params, rng=seeds.stream(6, seeds.CLUSTER, 8))
    perm = rng.permutation(20)
    carried = ClusterAssignment(labels=tr1.assignment.labels[perm],
                                centroids=tr1.assignment.centroids,
                                n_regions=tr1.assignment.n_regions)
    out2, _ = unit_forward(cloud[perm], params, assignment=carried)
    assert np.array_equal(out1, out2)


def test_within_region_permutation_tolerance():
    # the documented tolerance is 1e-12; this build delivers exact equality
    params = make_unit_params(3, 6, 3, seeds.stream(7, seeds.INIT, 8))
    rng = np.random.default_rng(55)
    cloud = rng.standard_normal((18, 3))
    out1, tr1 = unit_forward(cloud, params, rng=seeds.stream(7, seeds.CLUSTER, 9))
    labels = tr1.assignment.labels
    perm = np.arange(18)
    for region in range(3):
        members = np.flatnonzero(labels == region)
        perm[members] = rng.permutation(members)
    carried = ClusterAssignment(labels=labels[perm],
                                centroids=tr1.assignment.centroids, n_regions=3)
    out2, _ = unit_forward(cloud[perm], params, assignment=carried)
    assert np.abs(out1 - out2).max() <= 1e-12


def test_duplicate_points_do_not_break_canonical_ordering():
    params = make_unit_params(3, 6, 2, seeds.stream(8, seeds.INIT, 9))
    rng = np.random.default_rng(77)
    base = rng.standard_normal((6, 3))
    cloud = np.concatenate([base, base[:3]])      # three exact duplicates
    out1, _ = unit_forward(cloud, params, rng=seeds.stream(8, seeds.CLUSTER, 1))
    perm = rng.permutation(9)
    out2, _ = unit_forward(cloud[perm], params,
                           rng=seeds.stream(8, seeds.CLUSTER, 1))
    assert np.array_equal(out1, out2)


def test_full_scale_shapes():
    # the stock first block: 1200 points, 3 -> 6 channels, 240 regions
    params = make_unit_params(3, 6, 240, seeds.stream(9, seeds.INIT, 10))
    cloud = np.random.default_rng(9).standard_normal((1200, 3))
    out, trace = unit_forward(cloud, params, rng=seeds.stream(9, seeds.CLUSTER, 2))
    assert out.shape == (240, 6)
    assert trace.assignment.labels.shape == (1200,)
    assert trace.conv.shape == (1200, 6)
    assert trace.blended.shape == (1200, 6)
    assert trace.pool_src.shape == (240, 6)


def test_pooled_values_match_region_maxima():
    params = make_unit_params(3, 6, 4, seeds.stream(10, seeds.INIT, 11))
    cloud = np.random.default_rng(31).standard_normal((25, 3))
    out, trace = unit_forward(cloud, params, rng=seeds.stream(10, seeds.CLUSTER, 3))
    labels = trace.assignment.labels
    for region in range(4):
        members = np.flatnonzero(labels == region)
        assert out[region] == pytest.approx(trace.blended[members].max(axis=0),
                                            abs=0.0)
        # the recorded winners really are members that attain the maximum
        for c in range(6):
            winner = trace.pool_src[region, c]
            assert labels[winner] == region
            assert trace.blended[winner, c] == out[region, c]


def test_default_hidden_widths_follow_the_input_rule():
    params = make_unit_params(3, 6, 4, seeds.stream(11, seeds.INIT, 12))
    assert list(params.channel_mlp.widths) == [3, 13, 18, 23, 18, 13, 3]
    assert list(params.edge_kernel_mlp.widths) == [3, 13, 18, 23, 18, 13, 18]
    assert list(params.norm_mlp.widths) == [6, 16, 21, 26, 21, 16, 1]
    assert list(params.base_blend_mlp.widths) == [6, 16, 21, 26, 21, 16, 6]
    assert list(params.conv_blend_mlp.widths) == [6, 16, 21, 26, 21, 16, 6]


def test_width_and_region_validation():
    rng = seeds.stream(12, seeds.INIT, 13)
    with pytest.raises(ConfigError):
        make_unit_params(6, 6, 2, rng)        # output must widen the channels
    params = make_unit_params(3, 6, 5, seeds.stream(12, seeds.INIT, 14))
    with pytest.raises(ConfigError):
        unit_forward(np.zeros((4, 3)), params,
                     rng=seeds.stream(12, seeds.CLUSTER, 0))  # N < regions
    with pytest.raises(ConfigError):
        unit_forward(np.zeros((8, 2)), params,
                     rng=seeds.stream(12, seeds.CLUSTER, 0))  # wrong width
