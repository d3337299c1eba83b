import numpy as np
import pytest

from pcp_transfer.hmc import (
    DualAveraging,
    HmcConfig,
    adaptation_windows,
    effective_sample_size,
    mc_standard_error,
    run_hmc,
)

SD = np.linspace(0.5, 3.0, 10)


def gaussian(q):
    return -0.5 * np.sum((q / SD) ** 2), -q / SD**2


@pytest.fixture(scope="module")
def gaussian_run():
    cfg = HmcConfig(n_burnin=1000, n_keep=10_000, thin=1)
    return run_hmc(gaussian, np.ones(SD.size), cfg, np.random.default_rng(0))


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"n_leapfrog": 0}, {"target_accept": 1.0}, {"thin": 0}, {"step_jitter": 1.0}, {"term_buffer": 0.9}],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            HmcConfig(**kwargs)

    def test_defaults(self):
        cfg = HmcConfig()
        assert (cfg.n_leapfrog, cfg.target_accept, cfg.n_burnin, cfg.n_keep, cfg.thin) == (50, 0.65, 5000, 2000, 4)

    def test_windows_double_and_fit_inside_buffers(self):
        w = adaptation_windows(HmcConfig(n_burnin=1000))
        assert w[0][0] == 150 and w[-1][1] == 700
        assert all(a[1] == b[0] for a, b in zip(w, w[1:]))
        assert (w[1][1] - w[1][0]) == pytest.approx(2 * (w[0][1] - w[0][0]), abs=1)
        assert adaptation_windows(HmcConfig(n_burnin=20)) == []


class TestDualAveraging:
    def test_converges_on_known_acceptance_curve(self):
        # acceptance exp(-step) hits 0.65 at step = -log(0.65)
        da = DualAveraging(1.0, 0.65)
        step = 1.0
        for _ in range(3000):
            step = da.update(np.exp(-step))
        assert da.final_step == pytest.approx(-np.log(0.65), rel=0.02)


class TestGaussianTarget:
    def test_moments(self, gaussian_run):
        draws = gaussian_run.draws
        assert np.all(np.abs(draws.mean(axis=0)) < 3 * mc_standard_error(draws))
        np.testing.assert_allclose(draws.var(axis=0), SD**2, rtol=0.05)

    def test_acceptance_near_target(self, gaussian_run):
        assert 0.55 <= gaussian_run.accept_prob <= 0.75
        assert gaussian_run.n_divergent == 0

    def test_mass_matrix_learns_scales(self, gaussian_run):
        np.testing.assert_allclose(gaussian_run.inv_mass, SD**2, rtol=0.35)

    def test_mcse_shrinks_like_inverse_root_n(self, gaussian_run):
        draws = gaussian_run.draws
        ratio = mc_standard_error(draws[:2500]) / mc_standard_error(draws)
        # a fourfold longer run should halve the error, within a factor of 2
        assert np.all((ratio > 1.0) & (ratio < 4.0))

    def test_deterministic(self):
        cfg = HmcConfig(n_burnin=100, n_keep=50, thin=2)
        a = run_hmc(gaussian, np.ones(SD.size), cfg, np.random.default_rng(5))
        b = run_hmc(gaussian, np.ones(SD.size), cfg, np.random.default_rng(5))
        assert np.array_equal(a.draws, b.draws)
        assert a.step_size == b.step_size

    def test_rejects_bad_start(self):
        with pytest.raises(ValueError):
            run_hmc(lambda q: (-np.inf, q), np.zeros(2), HmcConfig(), np.random.default_rng(0))

    def test_mixing_failure_warning(self):
        cfg = HmcConfig(n_burnin=0, n_keep=20, thin=1, step_jitter=0.0)
        res = run_hmc(gaussian, np.ones(SD.size), cfg, np.random.default_rng(0), step_size=50.0)
        assert res.accept_prob < 0.05
        assert any("mixing failure" in w for w in res.warnings)


class TestEffectiveSampleSize:
    def test_iid(self):
        x = np.random.default_rng(0).standard_normal((20_000, 2))
        np.testing.assert_allclose(effective_sample_size(x), 20_000, rtol=0.1)

    def test_ar1(self):
        rng = np.random.default_rng(1)
        rho, n = 0.8, 50_000
        x = np.empty(n)
        x[0] = rng.standard_normal()
        for i in range(1, n):
            x[i] = rho * x[i - 1] + np.sqrt(1 - rho**2) * rng.standard_normal()
        assert effective_sample_size(x)[0] == pytest.approx(n * (1 - rho) / (1 + rho), rel=0.15)
