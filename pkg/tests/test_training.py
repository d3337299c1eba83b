import numpy as np
import pytest

from pcp_transfer.network import Architecture, forward
from pcp_transfer.training import (
    BATCH_GRID,
    Adam,
    EarlyStopping,
    OptimizerConfig,
    PlateauDecay,
    SourceFit,
    TrainingDivergedError,
    select_batch_size,
    train_head,
    train_mean_field_vi,
    train_point_estimate,
)

SIM_ARCH = Architecture((30, 24, 16, 12, 8, 1))


def ar1_covariates(n, p, rho, rng):
    X = np.empty((n, p))
    X[:, 0] = rng.standard_normal(n)
    for j in range(1, p):
        X[:, j] = rho * X[:, j - 1] + np.sqrt(1 - rho**2) * rng.standard_normal(n)
    return X


def cos_mean(X, k=15):
    return np.cos(2 * X[:, :k].sum(axis=1) / k)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs", [{"lr": 0.0}, {"decay": 1.0}, {"decay": 0.0}, {"patience": 0}, {"val_fraction": 1.0}]
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            OptimizerConfig(**kwargs)

    def test_defaults(self):
        cfg = OptimizerConfig()
        assert (cfg.lr, cfg.decay, cfg.patience, cfg.batch_size) == (1e-3, 0.7, 6, 32)
        assert cfg.batch_size in BATCH_GRID

    def test_source_fit_rejects_nonpositive_variance(self):
        from pcp_transfer.network import NetworkParams

        p = NetworkParams.zeros(Architecture((2, 1)))
        with pytest.raises(ValueError):
            SourceFit(p, np.array([1.0, 0.0, 1.0]))


class TestSchedules:
    def test_adam_first_step_is_lr_sized(self):
        opt = Adam(3, lr=0.01)
        step = opt.step(np.array([5.0, -0.2, 1e-3]))
        np.testing.assert_allclose(step, [-0.01, 0.01, -0.01], rtol=1e-3)

    def test_adam_minimizes_quadratic(self):
        opt = Adam(2, lr=0.05)
        x = np.array([3.0, -2.0])
        for _ in range(2000):
            x += opt.step(2 * (x - 1.0))
        np.testing.assert_allclose(x, 1.0, atol=1e-3)

    def test_early_stopping_halts_patience_epochs_after_plateau(self):
        losses = [5.0, 4.0, 3.0] + [3.0] * 20
        stopper = EarlyStopping(6)
        stop_epoch = next(e for e, loss in enumerate(losses, 1) if stopper.update(loss))
        assert stop_epoch == 3 + 6

    def test_plateau_decay(self):
        sched = PlateauDecay(0.7, 3, 1e-6)
        lr = 1.0
        lrs = []
        for loss in [1.0, 0.5, 0.5 - 1e-7, 0.5, 0.5, 0.4, 0.4]:
            lr = sched.update(loss, lr)
            lrs.append(lr)
        # improvements under min_delta count as stalls
        assert lrs == [1.0, 1.0, 1.0, 1.0, 0.7, 0.7, 0.7]


class TestPointEstimate:
    def test_linear_data_recovered(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((1000, 1))
        y = 2 * X[:, 0]
        fit = train_point_estimate(X, y, Architecture((1, 1)), OptimizerConfig(max_epochs=1000), rng)
        assert fit.metadata["val_loss"] < 1e-4
        w, _ = fit.params.layer(0)
        assert w[0, 0] == pytest.approx(2.0, abs=1e-2)
        assert fit.sigma_diag is None

    @pytest.fixture(scope="class")
    @staticmethod
    def noisy_fit():
        rng = np.random.default_rng(3)
        X = rng.standard_normal((120, 4))
        y = np.sin(X[:, 0]) + X[:, 1] ** 2 + 0.5 * rng.standard_normal(120)
        cfg = OptimizerConfig(lr=0.01, batch_size=16)
        return X, y, train_point_estimate(X, y, Architecture((4, 32, 1)), cfg, rng)

    def test_best_snapshot_not_worse_than_final(self, noisy_fit):
        *_, fit = noisy_fit
        assert fit.metadata["val_loss"] <= fit.trace[-1]["val_loss"]
        assert fit.metadata["val_loss"] == min(row["val_loss"] for row in fit.trace)

    def test_stops_patience_epochs_after_best(self, noisy_fit):
        *_, fit = noisy_fit
        vals = [row["val_loss"] for row in fit.trace]
        assert fit.metadata["epochs"] < OptimizerConfig().max_epochs
        assert fit.metadata["epochs"] == int(np.argmin(vals)) + 1 + 6

    def test_trace_columns(self, noisy_fit):
        *_, fit = noisy_fit
        assert set(fit.trace[0]) == {"epoch", "train_loss", "val_loss", "lr"}
        lrs = [row["lr"] for row in fit.trace]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_bit_reproducible(self):
        data_rng = np.random.default_rng(1)
        X = data_rng.standard_normal((100, 3))
        y = X @ [1.0, -1.0, 0.5] + data_rng.standard_normal(100)
        arch = Architecture((3, 5, 1))
        a = train_point_estimate(X, y, arch, OptimizerConfig(), np.random.default_rng(9))
        b = train_point_estimate(X, y, arch, OptimizerConfig(), np.random.default_rng(9))
        assert np.array_equal(a.params.flat, b.params.flat)

    def test_divergence_names_epoch(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((40, 2))
        y = np.full(40, 1e300)
        with pytest.raises(TrainingDivergedError, match="epoch 1"):
            train_point_estimate(X, y, Architecture((2, 1)), OptimizerConfig(), rng)

    def test_rejects_wrong_width(self):
        with pytest.raises(ValueError):
            train_point_estimate(np.zeros((5, 3)), np.zeros(5), Architecture((2, 1)), OptimizerConfig(), None)

    def test_head_only_keeps_body_bit_identical(self, noisy_fit):
        X, y, fit = noisy_fit
        new = train_head(fit.params, X, -y, OptimizerConfig(), np.random.default_rng(2))
        assert np.array_equal(new.body, fit.params.body)
        assert not np.array_equal(new.head, fit.params.head)

    def test_source_function_fit(self):
        rng = np.random.default_rng(100)
        ref = ar1_covariates(100_000, 30, 0.5, rng)
        c = 2.0 / np.std(cos_mean(ref))
        X = ar1_covariates(1000, 30, 0.5, rng)
        y = c * cos_mean(X) + rng.standard_normal(1000)
        cfg = OptimizerConfig(l2=0.03, batch_size=16)
        fit = train_point_estimate(X, y, SIM_ARCH, cfg, rng)
        assert fit.metadata["val_loss"] < 1.5
        # predicting the mean would cost about Var(c mu) + sigma^2 = 5
        Xt = ar1_covariates(2000, 30, 0.5, rng)
        assert np.mean((forward(fit.params, Xt) - c * cos_mean(Xt)) ** 2) < 1.0

    def test_batch_cv_picks_from_grid(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((90, 2))
        y = X[:, 0] - X[:, 1] + 0.1 * rng.standard_normal(90)
        bs = select_batch_size(X, y, Architecture((2, 3, 1)), OptimizerConfig(max_epochs=20), rng)
        assert bs in BATCH_GRID


class TestMeanFieldVI:
    CFG = OptimizerConfig(lr=0.01, val_fraction=0.0, batch_size=50, max_epochs=20_000, patience=20)

    @pytest.mark.parametrize("seed", range(3))
    def test_conjugate_normal_mean(self, seed):
        rng = np.random.default_rng(seed)
        n = 50
        y = 0.7 + rng.standard_normal(n)
        X = np.zeros((n, 1))  # only the bias sees data: y = theta + eps
        post_var = 1.0 / (1.0 + n)
        post_mean = post_var * y.sum()
        fit = train_mean_field_vi(X, y, Architecture((1, 1)), self.CFG, rng, noise_sd=1.0)
        assert fit.params.flat[1] == pytest.approx(post_mean, rel=0.05)
        assert fit.sigma_diag[1] == pytest.approx(post_var, rel=0.05)
        # the weight multiplies x = 0 and must stay at its prior
        assert fit.sigma_diag[0] == pytest.approx(1.0, rel=0.05)

    def test_zero_data_returns_prior(self):
        arch = Architecture((3, 2, 1))
        fit = train_mean_field_vi(np.zeros((0, 3)), np.zeros(0), arch, OptimizerConfig(), np.random.default_rng(0))
        assert np.all(fit.params.flat == 0.0)
        assert np.all(fit.sigma_diag == 1.0)

    def test_elbo_moving_average_increases(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((200, 3))
        y = X[:, 0] - 0.5 * X[:, 2] + 0.3 * rng.standard_normal(200)
        fit = train_mean_field_vi(X, y, Architecture((3, 4, 1)), OptimizerConfig(lr=0.01), rng)
        trace = np.asarray(fit.metadata["elbo_trace"])
        blocks = trace[: len(trace) // 50 * 50].reshape(-1, 50)
        means = blocks.mean(axis=1)
        se = blocks.std(axis=1, ddof=1) / np.sqrt(50)
        assert len(means) >= 10
        # every 50-step average is at least the previous one up to sampling noise
        drops = means[:-1] - means[1:]
        assert np.all(drops <= 3 * np.hypot(se[:-1], se[1:]))
        assert means[-1] > means[0]

    def test_variances_positive_and_clamped(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((64, 2))
        y = X[:, 0] + rng.standard_normal(64)
        cfg = OptimizerConfig(max_epochs=3)
        fit = train_mean_field_vi(X, y, Architecture((2, 3, 1)), cfg, rng, init_std=1e-9)
        assert fit.metadata["var_clamped"] > 0
        assert np.all(fit.sigma_diag >= 1e-12)

    def test_learns_noise_scale(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((400, 1))
        y = 1.5 * X[:, 0] + 2.0 * rng.standard_normal(400)
        fit = train_mean_field_vi(X, y, Architecture((1, 1)), self.CFG, rng)
        assert fit.metadata["noise_sd"] == pytest.approx(2.0, rel=0.1)
        assert fit.params.flat[0] == pytest.approx(1.5, abs=0.25)
