import numpy as np
import pytest

from collabdiff.noise_schedule import NoiseSchedule
from collabdiff.toy_scores import (
    GaussianToyWorld,
    JointDenoiser,
    PairDenoiser,
    covariance_error,
    exact_joint_noise,
    exact_pair_noise,
    flatten_videos,
    gaussian_log_density,
    noisy_covariance,
    sample_reference,
    unflatten_videos,
)

S = NoiseSchedule.create()


def fd_noise(x, t, cov, h=1e-5):
    """eps = -sqrt(1 - a) * grad log N(0, C_t), gradient by central differences."""
    C = noisy_covariance(cov, t, S)
    g = np.empty_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (gaussian_log_density(x + e, C)[0] - gaussian_log_density(x - e, C)[0]) / (2 * h)
    return -np.sqrt(1 - S[t]) * g


class TestWorld:
    def test_block_structure(self):
        w = GaussianToyWorld(3, 2, 0.4)
        np.testing.assert_array_equal(w.sigma[0:2, 2:4], 0.4 * np.eye(2))
        np.testing.assert_array_equal(w.sigma[4:6, 4:6], np.eye(2))
        np.testing.assert_allclose(w.chol @ w.chol.T, w.sigma, atol=1e-14)

    @pytest.mark.parametrize("rho", [-0.5, 1.5, -0.34])
    def test_rho_range(self, rho):
        with pytest.raises(ValueError):
            GaussianToyWorld(4, 2, rho)

    def test_rho_one_is_psd(self):
        w = GaussianToyWorld(2, 2, 1.0)
        np.testing.assert_allclose(w.chol @ w.chol.T, w.sigma, atol=1e-12)

    def test_save_load(self, tmp_path):
        w = GaussianToyWorld(4, 2, 0.25, seed=7)
        w.save(tmp_path / "w.json")
        v = GaussianToyWorld.load(tmp_path / "w.json")
        assert v == w
        np.testing.assert_array_equal(v.sigma, w.sigma)

    def test_flatten_round_trip(self, rng):
        v = rng.normal(size=(3, 5, 2))
        x = flatten_videos(v)
        np.testing.assert_array_equal(x[:, 2:4], v[1])
        np.testing.assert_array_equal(unflatten_videos(x, 3), v)

    def test_pair_marginal_is_joint_block(self):
        # the 2d-marginal of the noisy joint equals the noisy pair covariance
        w = GaussianToyWorld(4, 2, 0.3)
        for t in (1, 400, 1000):
            Cj = noisy_covariance(w.sigma, t, S)
            idx = w.block_indices((1, 3))
            np.testing.assert_array_equal(Cj[np.ix_(idx, idx)], noisy_covariance(w.marginal((1, 3)), t, S))


class TestSampling:
    def test_independent(self):
        w = GaussianToyWorld(2, 3, 0.0)
        n = 40_000
        x = flatten_videos(sample_reference(w, n, np.random.default_rng(0)))
        cross = np.cov(x, rowvar=False)[:3, 3:]
        assert np.abs(cross).max() < 3 / np.sqrt(n)

    def test_correlated(self):
        w = GaussianToyWorld(2, 2, 0.5)
        n = 100_000
        x = flatten_videos(sample_reference(w, n, np.random.default_rng(1)))
        cov = np.cov(x, rowvar=False)
        # se of a covariance entry with unit variances: sqrt((1 + rho^2) / n)
        se = np.sqrt((1 + w.sigma**2) / n)
        assert np.all(np.abs(cov - w.sigma) < 4 * se)

    def test_seeded(self):
        w = GaussianToyWorld(3, 2, 0.2)
        a = sample_reference(w, 10, np.random.default_rng(5))
        b = sample_reference(w, 10, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (3, 10, 2)


class TestExactNoise:
    def test_independent_pair(self, rng):
        w = GaussianToyWorld(3, 2, 0.0)
        v = rng.normal(size=4)
        np.testing.assert_allclose(exact_pair_noise(w, (0, 2), v, 300, S), np.sqrt(1 - S[300]) * v, rtol=1e-12)

    def test_zero_input(self):
        w = GaussianToyWorld(3, 2, 0.7)
        np.testing.assert_array_equal(exact_pair_noise(w, (0, 1), np.zeros(4), 10, S), np.zeros(4))

    def test_rejects_diagonal_pair(self):
        with pytest.raises(ValueError):
            exact_pair_noise(GaussianToyWorld(3, 2, 0.1), (1, 1), np.zeros(4), 10, S)

    @pytest.mark.parametrize("rho,t", [(0.6, 1), (0.6, 500), (-0.3, 900), (0.95, 40)])
    def test_pair_finite_difference(self, rho, t):
        w = GaussianToyWorld(4, 2, rho)
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(20):
            x = rng.normal(size=4) * 2
            e = exact_pair_noise(w, (1, 2), x, t, S)
            worst = max(worst, np.abs(e - fd_noise(x, t, w.marginal((1, 2)))).max() / np.abs(e).max())
        assert worst < 1e-5

    @pytest.mark.parametrize("rho,t", [(0.4, 200), (-0.2, 960)])
    def test_joint_finite_difference(self, rho, t):
        w = GaussianToyWorld(3, 2, rho)
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(20):
            x = rng.normal(size=6)
            e = exact_joint_noise(w, x, t, S)
            worst = max(worst, np.abs(e - fd_noise(x, t, w.sigma)).max() / np.abs(e).max())
        assert worst < 1e-5

    def test_joint_equals_pair_for_two_videos(self, rng):
        w = GaussianToyWorld(2, 3, 0.6)
        x = rng.normal(size=(5, 6))
        for t in (1, 333, 1000):
            np.testing.assert_array_equal(exact_joint_noise(w, x, t, S), exact_pair_noise(w, (0, 1), x, t, S))

    def test_joint_separable_when_independent(self, rng):
        w = GaussianToyWorld(4, 2, 0.0)
        x = rng.normal(size=(3, 8))
        np.testing.assert_allclose(exact_joint_noise(w, x, 700, S), np.sqrt(1 - S[700]) * x, rtol=1e-12)

    def test_denoiser_wrappers(self, rng):
        w = GaussianToyWorld(3, 2, 0.5)
        v = rng.normal(size=(3, 4, 2))
        ei, ej = PairDenoiser(w, S)(v[0], v[2], 250, (0, 2))
        ref = exact_pair_noise(w, (0, 2), np.concatenate([v[0], v[2]], axis=1), 250, S)
        np.testing.assert_array_equal(ei, ref[:, :2])
        np.testing.assert_array_equal(ej, ref[:, 2:])
        joint = JointDenoiser(w, S)(v, 250)
        np.testing.assert_allclose(flatten_videos(joint), exact_joint_noise(w, flatten_videos(v), 250, S), rtol=1e-14)


class TestCovarianceError:
    def test_exact_samples_floor(self):
        for M, d, rho in ((2, 4, 0.6), (4, 3, 0.0), (6, 2, 0.3)):
            w = GaussianToyWorld(M, d, rho)
            x = sample_reference(w, 50_000, np.random.default_rng(M))
            assert covariance_error(x, w.sigma) < 0.03

    def test_zero_samples(self):
        assert covariance_error(np.zeros((10, 4)), np.eye(4)) == 1.0

    def test_permutation(self, rng):
        x = rng.normal(size=(200, 3))
        a = covariance_error(x, np.eye(3))
        b = covariance_error(x[rng.permutation(200)], np.eye(3))
        assert a == pytest.approx(b, rel=1e-12)

    def test_duplication(self, rng):
        # stacking the same data twice scales the unbiased covariance by (2n - 2) / (2n - 1)
        n = 100
        x = rng.normal(size=(n, 3))
        c1 = np.cov(x, rowvar=False)
        c2 = np.cov(np.vstack([x, x]), rowvar=False)
        np.testing.assert_allclose(c2, c1 * (2 * n - 2) / (2 * n - 1), rtol=1e-12)
        # with matched n (compare each to its own rescaled target) the errors agree
        target = np.eye(3)
        a = covariance_error(x, target)
        b = covariance_error(np.vstack([x, x]), target * (2 * n - 2) / (2 * n - 1))
        assert a == pytest.approx(b, rel=1e-10)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            covariance_error(np.zeros((1, 2)), np.eye(2))
