"""Source-model fitting: Adam point estimates and mean-field variational Bayes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .network import Architecture, NetworkParams, forward_flat, glorot_init, value_and_vjp

logger = logging.getLogger(__name__)

BATCH_GRID = (16, 32, 64, 128)
VAR_FLOOR = 1e-12
MONITOR_STEPS = 50


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    decay: float = 0.7
    batch_size: int = 32
    patience: int = 6
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-6
    l2: float = 1e-4
    l1: float = 0.0
    max_epochs: int = 300
    val_fraction: float = 0.2

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch size and max epochs must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class SourceFit:
    """Source estimate ``theta_hat`` (with its own head) and optional variances."""

    params: NetworkParams
    sigma_diag: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.sigma_diag is not None:
            self.sigma_diag = np.asarray(self.sigma_diag, dtype=float)
            if self.sigma_diag.shape != self.params.flat.shape:
                raise ValueError("sigma_diag must match the parameter vector")
            if not np.all(self.sigma_diag > 0):
                raise ValueError("variational variances must be strictly positive")

    @property
    def arch(self) -> Architecture:
        return self.params.arch

    @property
    def is_variational(self) -> bool:
        return self.sigma_diag is not None


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Update to add to the parameters for a loss gradient."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class EarlyStopping:
    """Stop after ``patience`` successive epochs without a decrease."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.wait = 0

    def update(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


class PlateauDecay:
    """Multiply the learning rate by ``factor`` when the loss stalls."""

    def __init__(self, factor: float, patience: int, min_delta: float):
        self.factor, self.patience, self.min_delta = factor, patience, min_delta
        self.best = np.inf
        self.wait = 0

    def update(self, loss: float, lr: float) -> float:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.wait = 0
            return lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            return lr * self.factor
        return lr


def _split(n: int, val_fraction: float, rng: np.random.Generator):
    idx = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    if n_val == 0 or n_val == n:
        return idx, idx[:0]
    return idx[n_val:], idx[:n_val]


def _weight_mask(arch: Architecture) -> np.ndarray:
    mask = np.zeros(arch.n_params, dtype=bool)
    for i, (d, k) in enumerate(zip(arch.widths[:-1], arch.widths[1:])):
        mask[arch.offsets[i] : arch.offsets[i] + k * d] = True
    return mask


def _trainable_mask(arch: Architecture, trainable) -> np.ndarray:
    if trainable is None or trainable == "all":
        return np.ones(arch.n_params, dtype=bool)
    if trainable == "head":
        mask = np.zeros(arch.n_params, dtype=bool)
        mask[arch.head_offset :] = True
        return mask
    return np.asarray(trainable, dtype=bool)


def _mse(flat, arch, X, y) -> float:
    return float(np.mean((forward_flat(flat, arch, X) - y) ** 2))


def train_point_estimate(
    X,
    y,
    arch: Architecture,
    cfg: OptimizerConfig,
    rng: np.random.Generator,
    *,
    init: NetworkParams | None = None,
    trainable="all",
    lr: float | None = None,
) -> SourceFit:
    """Minibatch Adam on penalized MSE with plateau decay and early stopping.

    Returns the snapshot with the lowest validation MSE seen.  ``trainable``
    is ``"all"``, ``"head"`` or a boolean mask over the flat parameters;
    frozen coordinates are returned bit-identical to ``init``.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if X.ndim != 2 or X.shape[1] != arch.input_dim or len(y) != len(X):
        raise ValueError(f"data of shape {X.shape} does not match input width {arch.input_dim}")
    params = init.copy() if init is not None else glorot_init(arch, rng)
    flat = params.flat
    mask = _trainable_mask(arch, trainable)
    reg_mask = _weight_mask(arch) & mask
    tr, va = _split(len(X), cfg.val_fraction, rng)
    if va.size == 0:
        va = tr
    lr = cfg.lr if lr is None else lr
    opt = Adam(int(mask.sum()), lr)
    stopper = EarlyStopping(cfg.patience)
    plateau = PlateauDecay(cfg.decay, cfg.plateau_patience, cfg.plateau_min_delta)
    best_flat, best_val = flat.copy(), np.inf
    trace = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(tr)
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            yb = y[b]
            _, grad = value_and_vjp(flat, arch, X[b], lambda f: 2.0 * (f - yb) / len(b))
            grad += 2.0 * cfg.l2 * flat * reg_mask
            if cfg.l1:
                grad += cfg.l1 * np.sign(flat) * reg_mask
            flat[mask] += opt.step(grad[mask])
        train_loss = _mse(flat, arch, X[tr], y[tr])
        val_loss = _mse(flat, arch, X[va], y[va])
        trace.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr})
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDivergedError(epoch)
        if val_loss < best_val:
            best_val, best_flat = val_loss, flat.copy()
        opt.lr = plateau.update(val_loss, opt.lr)
        if stopper.update(val_loss):
            break
    meta = {"epochs": epoch, "val_loss": best_val, "final_val_loss": trace[-1]["val_loss"]}
    return SourceFit(NetworkParams(arch, best_flat), None, meta, trace)


def train_head(params: NetworkParams, X, y, cfg: OptimizerConfig, rng: np.random.Generator) -> NetworkParams:
    """Fit only the output layer on top of a frozen body."""
    return train_point_estimate(X, y, params.arch, cfg, rng, init=params, trainable="head").params


def select_batch_size(
    X, y, arch: Architecture, cfg: OptimizerConfig, rng: np.random.Generator, grid=BATCH_GRID, folds: int = 3
) -> int:
    """Batch size with the lowest mean held-out MSE over ``folds`` splits."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    fold_of = rng.permutation(len(X)) % folds
    scores = {}
    for bs in grid:
        losses = []
        for k in range(folds):
            tr, te = fold_of != k, fold_of == k
            fit = train_point_estimate(X[tr], y[tr], arch, replace(cfg, batch_size=bs), rng)
            losses.append(_mse(fit.params.flat, arch, X[te], y[te]))
        scores[bs] = float(np.mean(losses))
    return min(scores, key=scores.get)


def train_mean_field_vi(
    X,
    y,
    arch: Architecture,
    cfg: OptimizerConfig,
    rng: np.random.Generator,
    *,
    noise_sd: float | None = None,
    init_std: float = 0.05,
    prior_sd: float = 1.0,
) -> SourceFit:
    """Fully factorized Gaussian posterior by stochastic ELBO ascent.

    One reparameterized draw per minibatch step; the variational family is
    parameterized by (mean, log-std) and the prior is ``N(0, prior_sd^2)``
    per parameter.  The likelihood noise sd is learned as a point estimate
    unless ``noise_sd`` is given.  The ELBO, averaged over blocks of at least
    ``MONITOR_STEPS`` steps, drives plateau decay and early stopping; the
    returned moments are iterate averages over the trailing ``patience``
    blocks.
    """
    X = np.asarray(X, float).reshape(-1, arch.input_dim)
    y = np.asarray(y, float)
    P = arch.n_params
    if len(X) == 0:
        # without a likelihood term the ELBO is maximized by the prior itself
        meta = {"epochs": 0, "val_loss": float("nan"), "noise_sd": noise_sd, "var_clamped": 0}
        return SourceFit(NetworkParams(arch, np.zeros(P)), np.full(P, prior_sd**2), meta, [])

    tr, va = _split(len(X), cfg.val_fraction, rng)
    n = len(tr)
    mu = glorot_init(arch, rng).flat
    rho = np.full(P, np.log(init_std))
    learn_noise = noise_sd is None
    log_s = np.log(np.std(y[tr]) if learn_noise else noise_sd)
    prior_var = prior_sd**2
    opt = Adam(2 * P + 1, cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    plateau = PlateauDecay(cfg.decay, cfg.plateau_patience, cfg.plateau_min_delta)
    rho_floor = 0.5 * np.log(VAR_FLOOR)
    clamped = 0
    elbo_steps = []
    block = []
    mu_sum, rho_sum = np.zeros(P), np.zeros(P)
    recent = []
    trace = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(tr)
        for start in range(0, n, cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            scale = n / len(b)
            sd_q = np.exp(rho)
            eps = rng.standard_normal(P)
            theta = mu + sd_q * eps
            s2 = np.exp(2 * log_s)
            yb = y[b]
            f, g = value_and_vjp(theta, arch, X[b], lambda f: scale * (yb - f) / s2)
            sq = np.sum((yb - f) ** 2)
            loglik = scale * (-0.5 * len(b) * np.log(2 * np.pi * s2) - 0.5 * sq / s2)
            kl = 0.5 * np.sum((sd_q**2 + mu**2) / prior_var - 1.0 - 2.0 * rho + np.log(prior_var))
            elbo = loglik - kl
            if not np.isfinite(elbo):
                raise TrainingDivergedError(epoch)
            grad_mu = g - mu / prior_var
            grad_rho = g * eps * sd_q - (sd_q**2 / prior_var - 1.0)
            grad_s = scale * (-len(b) + sq / s2) if learn_noise else 0.0
            step = opt.step(-np.concatenate([grad_mu, grad_rho, [grad_s]]) / n)
            mu += step[:P]
            rho += step[P : 2 * P]
            if learn_noise:
                log_s += step[-1]
            low = rho < rho_floor
            if low.any():
                clamped += int(low.sum())
                rho[low] = rho_floor
            elbo_steps.append(float(elbo))
            block.append(float(elbo))
            mu_sum += mu
            rho_sum += rho
        # single-draw ELBOs are noisy, so schedule decisions wait for a full block
        if len(block) < MONITOR_STEPS:
            continue
        neg_elbo = -float(np.mean(block))
        recent.append((mu_sum / len(block), rho_sum / len(block)))
        del recent[: -cfg.patience]
        block = []
        mu_sum, rho_sum = np.zeros(P), np.zeros(P)
        val_loss = _mse(mu, arch, X[va], y[va]) if va.size else float("nan")
        trace.append({"epoch": epoch, "train_loss": neg_elbo / n, "val_loss": val_loss, "lr": opt.lr})
        opt.lr = plateau.update(neg_elbo, opt.lr)
        if stopper.update(neg_elbo):
            break
    if clamped:
        logger.warning("clamped %d variational variances at %.0e", clamped, VAR_FLOOR)
    if recent:
        # the ELBO is nearly flat in the log-stds near the optimum, so average
        # the iterates over the trailing plateau to damp single-draw noise
        mu = np.mean([m for m, _ in recent], axis=0)
        rho = np.mean([r for _, r in recent], axis=0)
    meta = {
        "epochs": epoch,
        "val_loss": _mse(mu, arch, X[va], y[va]) if va.size else float("nan"),
        "noise_sd": float(np.exp(log_s)),
        "var_clamped": clamped,
        "elbo_trace": elbo_steps,
    }
    return SourceFit(NetworkParams(arch, mu), np.exp(2 * rho), meta, trace)
