import math

import numpy as np
import pytest

from fullpoint import tensor as T
from fullpoint.cloud import knn
from fullpoint.encoding import (
    PositionEncoding,
    global_correlation,
    hierarchical_features,
    local_correlation,
    relation,
    sinusoidal,
)
from fullpoint.errors import ContractError, ParameterError
from fullpoint.rng import Rng


class TestRelation:
    def test_identity_is_one(self):
        assert relation([1, 2, 3], [1, 2, 3], 0.5) == 1.0

    def test_boundary_is_exactly_zero(self):
        assert relation([0, 0, 0], [1.2, 0, 0], 1.2) == 0.0

    def test_beyond_sigma_is_zero(self):
        rng = Rng(0)
        for _ in range(100):
            sigma = float(rng.uniform(0.1, 2.0))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            q = direction * sigma * float(rng.uniform(1.0, 3.0))
            assert relation([0, 0, 0], q, sigma) == 0.0 or np.linalg.norm(q) < sigma

    def test_half_way(self):
        assert relation([0, 0, 0], [0.6, 0, 0], 1.2) == 0.5

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_sigma_must_be_positive(self, sigma):
        with pytest.raises(ParameterError):
            relation([0, 0, 0], [1, 0, 0], sigma)


class TestGlobalCorrelation:
    def test_single_point(self):
        assert global_correlation(np.zeros((1, 3)), 1.0).flat.tolist() == [1.0]

    def test_coincident_pair(self):
        assert global_correlation(np.ones((2, 3)), 1.0).flat.tolist() == [2.0, 2.0]

    def test_matches_double_loop(self):
        pts = Rng(1).uniform(size=(16, 3))
        expected = [sum(relation(p, q, 0.5) for q in pts) for p in pts]
        np.testing.assert_allclose(global_correlation(pts, 0.5).flat, expected, rtol=1e-12)

    def test_subsampled_sum_is_rescaled(self):
        pts = np.zeros((10, 3))
        assert global_correlation(pts, 1.0, max_global_points=4).flat.tolist() == [10.0] * 10


class TestLocalCorrelation:
    def test_hand_concatenation(self):
        pos = np.array([[0, 0, 0], [1, 0, 0.0]])
        out = local_correlation(pos, np.array([[1]]), np.array([2.0, 1.5]), centers=[0])
        assert out[0, 0].tolist() == [1, 0, 0, 1, 0, 0, 1.0, 0.5]

    def test_self_neighbor(self):
        pos = Rng(2).normal(size=(5, 3))
        out = local_correlation(pos, np.arange(5)[:, None], global_correlation(pos, 1.0))
        np.testing.assert_array_equal(out[:, 0, :3], pos)
        np.testing.assert_array_equal(out[:, 0, 3:], 0.0)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            local_correlation(np.zeros((2, 3)), np.array([[2], [0]]), np.ones(2))


class TestSinusoidal:
    def test_layout(self):
        out = sinusoidal(np.array([[0.25, 0.0, 0.5]]), 6)
        expected = [math.sin(math.pi / 4), math.cos(math.pi / 4), 0.0, 1.0, 1.0, math.cos(math.pi / 2)]
        np.testing.assert_allclose(out[0], expected, atol=1e-15)

    def test_width(self):
        assert sinusoidal(np.zeros((2, 4, 3)), 13).shape == (2, 4, 13)


class TestPositionEncoding:
    def setup_method(self):
        self.pos = Rng(3).normal(size=(20, 3))
        self.nbr = knn(self.pos, self.pos, 4, query_indices=np.arange(20)).indices

    @pytest.mark.parametrize("variant", ["FPE", "LPE", "GPE"])
    @pytest.mark.parametrize("encoder", ["learnable-mlp", "sinusoidal"])
    def test_shapes(self, variant, encoder):
        enc = PositionEncoding(8, Rng(0), variant=variant, encoder=encoder)
        assert enc(self.pos, self.nbr).shape == (20, 4, 8)

    def test_zero_init_gives_zero(self):
        enc = PositionEncoding(8, Rng(0))
        enc.zero_()
        assert np.all(enc(self.pos, self.nbr).data == 0.0)

    def test_self_neighbor_sees_zero_difference(self):
        enc = PositionEncoding(8, Rng(0))
        centers = np.array([3, 7])
        out = hierarchical_features(self.pos, centers[:, None], enc, centers)
        expected = enc.phi_local(T.as_tensor(np.zeros((1, 11)))).data
        np.testing.assert_allclose(out.data[:, 0], np.repeat(expected, 2, axis=0), rtol=1e-15)

    def test_fpe_matches_step_by_step(self):
        enc = PositionEncoding(8, Rng(4))
        g = np.concatenate([enc.phi_global(T.as_tensor(self.pos)).data, self.pos], axis=1)
        diff = g[:, None, :] - g[self.nbr]
        expected = enc.phi_local(T.as_tensor(diff)).data
        np.testing.assert_allclose(enc(self.pos, self.nbr).data, expected, rtol=1e-12)

    def test_fpe_is_translation_sensitive_lpe_is_not(self):
        lpe = PositionEncoding(8, Rng(5), variant="LPE")
        shifted = self.pos + 0.3
        np.testing.assert_allclose(lpe(shifted, self.nbr).data, lpe(self.pos, self.nbr).data, atol=1e-12)

    def test_unknown_variant(self):
        with pytest.raises(ParameterError):
            PositionEncoding(8, Rng(0), variant="XPE")

    def test_hierarchical_requires_fpe(self):
        with pytest.raises(ContractError):
            hierarchical_features(self.pos, self.nbr, PositionEncoding(8, Rng(0), variant="GPE"), np.arange(20))
