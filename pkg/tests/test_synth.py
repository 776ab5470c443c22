import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from butterfly_hessian import SyntheticSpec, haar_rotation, sample_hypercube, sample_unit_sphere, synthetic_hessian


class TestHaar:
    def test_n1(self):
        np.testing.assert_array_equal(haar_rotation(1, 0), [[1.0]])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2**32 - 1))
    def test_rotation(self, n, seed):
        R = haar_rotation(n, seed)
        assert np.abs(R.T @ R - np.eye(n)).max() < 1e-12
        assert abs(np.linalg.det(R) - 1.0) < 1e-10

    def test_first_moment_zero(self):
        rng = np.random.default_rng(0)
        r00 = np.array([haar_rotation(3, rng)[0, 0] for _ in range(10_000)])
        # R00 has variance 1/3 in dimension 3
        assert abs(r00.mean()) < 3 * np.sqrt(1 / 3) / np.sqrt(10_000)

    def test_seeded(self):
        np.testing.assert_array_equal(haar_rotation(5, 7), haar_rotation(5, 7))


class TestSyntheticHessian:
    def test_zero_limit(self):
        H, _, lam = synthetic_hessian(SyntheticSpec(8, n_mu=0, bulk_scale=0.0))
        np.testing.assert_array_equal(lam, 0.0)
        assert np.abs(H).max() == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_spectrum_and_symmetry(self, seed):
        H, R, lam = synthetic_hessian(SyntheticSpec(32, n_mu=4, seed=seed))
        np.testing.assert_allclose(np.linalg.eigvalsh(H), np.sort(lam), atol=1e-9)
        assert np.abs(H - H.T).max() < 1e-12
        assert np.linalg.eigvalsh(H).min() >= -1e-10
        np.testing.assert_allclose((R * lam) @ R.T, H, atol=1e-12)

    def test_dominant_count(self):
        # at least 4 of every 5 dominant draws exceed 0.3, pooled over 20 seeds
        # (bulk entries exceed 0.3 with probability about 0.3%, so they barely move the count)
        above = sum(np.count_nonzero(synthetic_hessian(SyntheticSpec(64, n_mu=5, seed=s))[2] > 0.3) for s in range(20))
        assert above >= 0.8 * 5 * 20

    def test_seeded(self):
        a = synthetic_hessian(SyntheticSpec(16, seed=3))[0]
        b = synthetic_hessian(SyntheticSpec(16, seed=3))[0]
        np.testing.assert_array_equal(a, b)

    def test_invalid(self):
        with pytest.raises(ValueError):
            SyntheticSpec(4, n_mu=5)
        with pytest.raises(ValueError):
            SyntheticSpec(4, bulk_scale=-1)


class TestSamplers:
    def test_sphere_norms(self):
        X = sample_unit_sphere(7, 500, 0)
        np.testing.assert_allclose(np.linalg.norm(X, axis=1), 1.0, atol=1e-12)

    def test_hypercube_bounds(self):
        X = sample_hypercube(5, 1000, 0, half_width=0.5)
        assert np.abs(X).max() <= 0.5

    def test_sphere_uniform_angles(self):
        from scipy.stats import chisquare

        X = sample_unit_sphere(2, 100_000, 1)
        theta = np.mod(np.arctan2(X[:, 1], X[:, 0]), 2 * np.pi)
        counts, _ = np.histogram(theta, bins=36, range=(0, 2 * np.pi))
        assert chisquare(counts).pvalue > 0.01

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            sample_unit_sphere(3, 0)
        with pytest.raises(ValueError):
            sample_hypercube(3, 0)
