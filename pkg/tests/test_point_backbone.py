import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxafford.errors import InputError
from voxafford.geometry import knn, normalize
from voxafford.numcore import Tensor, grad_check, tsum
from voxafford.point_backbone import PointBackbone

import oracles


def cloud(seed, n=40):
    return normalize(np.random.default_rng(seed).normal(size=(n, 3))).points


class TestExtract:
    def test_single_block_matches_scripted_forward(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, -1.0]])
        net = PointBackbone(4, k=2).init(0)
        nbrs = knn(pts, 2)
        got = net.block(0, Tensor(pts), nbrs).data
        w, b = net.blocks[0].weight.data, net.blocks[0].bias.data
        h = oracles.gelu(oracles.linear(pts, w, b))
        pooled = np.array([[max(h[j, c] for j in nbrs[i]) for c in range(4)] for i in range(4)])
        np.testing.assert_allclose(got, np.concatenate([h, pooled], axis=1), atol=1e-12)

    def test_shape_and_determinism(self):
        pts = cloud(0)
        net = PointBackbone(8, k=6, pos_width=12).init(1)
        a = net.extract(pts).features.data
        assert a.shape == (40, 8)
        np.testing.assert_array_equal(a, net.extract(pts.copy()).features.data)

    def test_permutation_covariance(self):
        pts = cloud(1)
        perm = np.random.default_rng(0).permutation(len(pts))
        net = PointBackbone(8, k=6, pos_width=6).init(2)
        np.testing.assert_allclose(net.extract(pts[perm]).features.data, net.extract(pts).features.data[perm],
                                   atol=1e-12)

    def test_too_few_points(self):
        with pytest.raises(InputError):
            PointBackbone(8, k=16).init(0).extract(np.zeros((5, 3)))

    def test_input_width_includes_encoding(self):
        net = PointBackbone(8, k=4, pos_width=24)
        assert net.blocks[0].weight.shape == (27, 8)
        assert net.blocks[1].weight.shape == (16, 8)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_finite_output(self, seed):
        rng = np.random.default_rng(seed)
        pts = normalize(rng.uniform(-1, 1, (20, 3)) * rng.uniform(0, 1, 3)).points
        net = PointBackbone(8, k=4, pos_width=6).init(seed % 97)
        assert np.all(np.isfinite(net.extract(pts).features.data))

    def test_gradient(self):
        pts = cloud(2, 12)
        net = PointBackbone(4, k=3, pos_width=6).init(3)
        weight = Tensor(np.random.default_rng(1).normal(size=(12, 4)))
        nbrs = knn(pts, 3)
        assert grad_check(lambda: tsum(net.extract(pts, nbrs).features * weight), net.parameters()) < 1e-4
