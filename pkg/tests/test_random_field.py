import math

import numpy as np
import pytest

from kunzel_uq.coefficients import PARAM_NAMES, PRIOR_TABLE
from kunzel_uq.fem.mesh import build_mesh
from kunzel_uq.random_field import (
    ExponentialKernel,
    KLEBasis,
    LogNormalSpec,
    build_basis,
    covariance_matrix,
    gaussian_moments,
    kle_decompose,
    prior_specs,
    realize_fields,
)


@pytest.fixture(scope="module")
def centroids():
    return build_mesh(16, 5, 0.6, 0.15).centroids()


@pytest.fixture(scope="module")
def full_basis(centroids):
    return build_basis(centroids, ExponentialKernel(0.1, 0.04), len(centroids))


class TestGaussianMoments:
    def test_table_value(self):
        mu_g, sigma_g = gaussian_moments(100.0, 20.0)
        assert sigma_g**2 == pytest.approx(math.log(1.04), rel=1e-14)
        assert sigma_g**2 == pytest.approx(0.0392207, abs=1e-7)
        assert mu_g == pytest.approx(4.585560, abs=1e-6)

    def test_round_trip(self):
        for mean, std in PRIOR_TABLE.values():
            mu_g, sigma_g = gaussian_moments(mean, std)
            assert math.exp(mu_g + sigma_g**2 / 2) == pytest.approx(mean, rel=1e-12)

    def test_degenerate_limit(self):
        mu_g, sigma_g = gaussian_moments(7.0, 0.0)
        assert sigma_g == 0.0 and mu_g == pytest.approx(math.log(7.0))

    def test_invalid(self):
        with pytest.raises(ValueError):
            gaussian_moments(0.0, 1.0)
        with pytest.raises(ValueError):
            gaussian_moments(1.0, -1.0)

    def test_monte_carlo_mean(self):
        spec = LogNormalSpec(100.0, 20.0)
        rng = np.random.default_rng(1)
        q = np.exp(spec.mu_g + spec.sigma_g * rng.standard_normal(100_000))
        assert abs(q.mean() - 100.0) < 3 * q.std() / math.sqrt(q.size)


class TestCovariance:
    def test_entries(self):
        pts = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.04]])
        C = covariance_matrix(pts, ExponentialKernel(0.1, 0.04))
        assert C[0, 0] == 1.0
        assert C[0, 1] == pytest.approx(math.exp(-1))
        assert C[1, 2] == pytest.approx(math.exp(-2))
        assert np.array_equal(C, C.T)

    def test_positive_semidefinite(self, centroids):
        C = covariance_matrix(centroids, ExponentialKernel())
        assert np.linalg.eigvalsh(C).min() >= -1e-10 * len(C)

    def test_kernel_validation(self):
        with pytest.raises(ValueError):
            ExponentialKernel(0.0, 1.0)


class TestDecomposition:
    def test_two_by_two(self):
        c = 0.3
        basis = kle_decompose(np.array([[1, c], [c, 1]]), 2)
        np.testing.assert_allclose(basis.eigenvalues, [1 + c, 1 - c], rtol=1e-14)

    def test_orthonormal_and_sorted(self, full_basis):
        psi = full_basis.modes
        assert np.abs(psi.T @ psi - np.eye(psi.shape[1])).max() <= 1e-10
        assert np.all(np.diff(full_basis.eigenvalues) <= 0)
        assert full_basis.eigenvalues.min() >= 0

    def test_trace(self, full_basis):
        assert full_basis.eigenvalues.sum() == pytest.approx(120.0, rel=1e-8)

    def test_full_reconstruction(self, full_basis, centroids):
        C = covariance_matrix(centroids, full_basis.kernel)
        rec = (full_basis.modes * full_basis.eigenvalues) @ full_basis.modes.T
        assert np.linalg.norm(rec - C) <= 1e-8 * np.linalg.norm(C)

    def test_captured_variance_strictly_increasing(self, full_basis):
        cv = [full_basis.captured_variance(m) for m in range(1, 121)]
        assert np.all(np.diff(cv) > 0)
        assert cv[-1] == pytest.approx(1.0)
        # regression anchor on the default 120-centroid mesh
        assert cv[6] == pytest.approx(0.45200, abs=5e-5)
        assert cv[6] > cv[5]

    def test_json_round_trip_is_bit_exact(self, full_basis):
        b = full_basis.truncate(7)
        back = KLEBasis.from_json(b.to_json())
        assert np.array_equal(back.modes, b.modes)
        assert np.array_equal(back.eigenvalues, b.eigenvalues)
        assert back.digest() == b.digest()

    def test_invalid_mode_count(self):
        with pytest.raises(ValueError):
            kle_decompose(np.eye(3), 4)

    def test_gaussian_reconstruction(self, centroids):
        pts = centroids[:20]
        basis = build_basis(pts, ExponentialKernel(), 20)
        rng = np.random.default_rng(3)
        g = basis.gaussian_field(rng.standard_normal((100_000, 20)))
        emp = g.T @ g / len(g)
        assert np.abs(emp - covariance_matrix(pts, basis.kernel)).max() < 5e-2


class TestRealize:
    def test_zero_xi_gives_median(self, full_basis):
        b = full_basis.truncate(7)
        specs = prior_specs()
        fields = realize_fields(b, specs, np.zeros(7))
        for name in PARAM_NAMES:
            np.testing.assert_allclose(getattr(fields, name), math.exp(specs[name].mu_g), rtol=1e-14)

    def test_shared_fluctuation(self, full_basis):
        b = full_basis.truncate(7)
        specs = prior_specs()
        xi = np.random.default_rng(0).standard_normal(7)
        fields = realize_fields(b, specs, xi)
        patterns = [(np.log(getattr(fields, n)) - specs[n].mu_g) / specs[n].sigma_g for n in PARAM_NAMES]
        for p in patterns[1:]:
            np.testing.assert_allclose(p, patterns[0], rtol=1e-9, atol=1e-12)

    def test_zero_spread_is_constant(self, full_basis):
        b = full_basis.truncate(7)
        fields = realize_fields(b, prior_specs(0.0), np.ones(7))
        for name in PARAM_NAMES:
            v = getattr(fields, name)
            assert np.all(v == v[0]) and v[0] == pytest.approx(PRIOR_TABLE[name][0])

    def test_batched_shape_and_positivity(self, full_basis):
        b = full_basis.truncate(3)
        fields = realize_fields(b, prior_specs(), 5 * np.random.default_rng(0).standard_normal((4, 3)))
        assert fields.mu.shape == (4, 120)
        fields.validate()

    def test_monte_carlo_element_means(self, full_basis):
        spec = LogNormalSpec(100.0, 20.0)
        rng = np.random.default_rng(7)
        xi = rng.standard_normal((100_000, 120))
        q = np.exp(spec.mu_g + spec.sigma_g * full_basis.gaussian_field(xi))
        se = q.std(axis=0) / math.sqrt(len(q))
        # fraction of elements within 3 standard errors, allowing for multiplicity
        inside = np.abs(q.mean(axis=0) - 100.0) < 3 * se
        assert inside.mean() >= 0.97

    def test_wrong_xi_length(self, full_basis):
        with pytest.raises(ValueError):
            realize_fields(full_basis.truncate(3), prior_specs(), np.zeros(4))
