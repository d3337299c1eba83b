"""Monte Carlo check of the Taylor-based distance for point-estimate sources.

For random networks and data sets, flexibility draws ``(c, tau_tilde)`` are
taken from the PCP prior, network parameters are sampled around the anchor,
and the KL divergence between the resulting predictive distribution and the
base model is estimated by Monte Carlo.  If the Taylor approximation holds,
the rescaled estimates ``d_hat = sqrt(2 KL)`` are Exp(lambda) distributed and
their cumulative hazard is the line ``lambda * d``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .network import Architecture, NetworkParams, forward_many, glorot_init, layer_grad_sq_norms
from .prior import POINT_ESTIMATE, invert_distance, sample_dirichlet
from .simulation import gen_covariates

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-300
_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class KlCheckConfig:
    """Sizes of the check.

    ``widths`` excludes the input dimension; ``activations`` defaults to ReLU
    hidden layers with an identity output.
    """

    widths: tuple[int, ...] = (64, 32, 1)
    activations: tuple[str, ...] = ()
    input_dim: int = 30
    rho: float = 0.5
    n_rows: int = 30
    n_datasets: int = 50
    n_tau: int = 2000
    n_params: int = 1000
    n_outputs: int = 25
    lambdas: tuple[float, ...] = (1.0, 5.0)
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        counts = ("input_dim", "n_rows", "n_datasets", "n_tau", "n_params", "n_outputs")
        if any(getattr(self, name) < 1 for name in counts):
            raise ValueError("all counts must be positive")
        if self.n_outputs > self.n_params:
            raise ValueError("n_outputs cannot exceed n_params")
        if not self.lambdas or min(self.lambdas) <= 0 or self.sigma <= 0:
            raise ValueError("rates and sigma must be positive")

    @property
    def arch(self) -> Architecture:
        return Architecture((self.input_dim,) + tuple(self.widths), tuple(self.activations))


@dataclass
class KlEstimate:
    value: float
    se: float
    n_floored: int = 0


def mixture_kl(F: np.ndarray, f_base: np.ndarray, sigma: float, eps: np.ndarray) -> KlEstimate:
    """KL from the output mixture to the base model, averaged over inputs.

    ``F`` holds outputs ``(M, N)`` of ``M`` parameter draws.  At each input the
    flexible density is the equal-weight mixture of ``N(F_j, sigma^2)`` and the
    base density is ``N(f_base, sigma^2)``.  Outputs ``Y = F_j + sigma * eps``
    come from the first ``R = len(eps)`` components.  ``E[log q(Y)]`` is exact
    under the mixture, and ``log p(Y)`` is corrected with control variates
    ``u = Y - f_base`` and ``u^2`` whose mixture means are known, so the
    estimate is exact when the mixture collapses onto the base model.
    """
    F = np.atleast_2d(np.asarray(F, float))
    M, N = F.shape
    R = eps.shape[0]
    Y = F[:R] + sigma * eps
    diff = (Y[:, None, :] - F[None, :, :]) / sigma  # (R, M, N)
    e = -0.5 * diff**2
    top = e.max(axis=1)
    log_p = top + np.log(np.exp(e - top[:, None, :]).mean(axis=1)) - 0.5 * _LOG_2PI - np.log(sigma)
    floored = log_p < np.log(DENSITY_FLOOR)
    log_p = np.where(floored, np.log(DENSITY_FLOOR), log_p)

    dev = F - f_base
    mean_u = dev.mean(axis=0)
    mean_u2 = sigma**2 + np.mean(dev**2, axis=0)
    u = Y - f_base
    # least squares of log p on (1, u, u^2) per input, centered for conditioning
    cu = u - u.mean(axis=0)
    cu2 = u**2 - (u**2).mean(axis=0)
    G = np.stack([cu, cu2], axis=-1).transpose(1, 0, 2)  # (N, R, 2)
    gram = G.transpose(0, 2, 1) @ G + 1e-300 * np.eye(2)
    rhs = G.transpose(0, 2, 1) @ (log_p - log_p.mean(axis=0)).T[:, :, None]
    try:
        coef = np.linalg.solve(gram, rhs)[:, :, 0]
    except np.linalg.LinAlgError:
        coef = np.linalg.lstsq(gram.reshape(-1, 2), rhs.reshape(-1), rcond=None)[0].reshape(N, 2)
    resid = (log_p - log_p.mean(axis=0)).T - (G @ coef[:, :, None])[:, :, 0]
    e_log_p = log_p.mean(axis=0) - coef[:, 0] * (u.mean(axis=0) - mean_u) - coef[:, 1] * ((u**2).mean(axis=0) - mean_u2)
    e_log_q = -0.5 * _LOG_2PI - np.log(sigma) - mean_u2 / (2 * sigma**2)
    kl = e_log_p - e_log_q
    se = np.sqrt(np.sum(resid.var(axis=1, ddof=min(3, R - 1)) / R)) / N if R > 3 else np.nan
    if floored.any():
        logger.warning("%d mixture density values floored at %g", int(floored.sum()), DENSITY_FLOOR)
    return KlEstimate(float(kl.mean()), float(se), int(floored.sum()))


def empirical_kl(
    theta_hat: NetworkParams, tau: np.ndarray, X, cfg: KlCheckConfig, rng: np.random.Generator
) -> KlEstimate:
    """KL between the network with ``theta_i ~ N(theta_hat_i, tau_i I)`` and the base model.

    ``tau`` has one entry per layer; every layer, the output layer included,
    is perturbed.  Both predictive distributions carry output noise ``cfg.sigma``.
    """
    arch = theta_hat.arch
    tau = np.asarray(tau, float)
    if tau.shape != (arch.n_layers,) or np.any(tau < 0):
        raise ValueError("tau needs one non-negative entry per layer")
    X = np.asarray(X, float)
    scale = np.sqrt(tau[arch.layer_index])
    thetas = theta_hat.flat + scale * rng.standard_normal((cfg.n_params, arch.n_params))
    F = forward_many(thetas, arch, X)
    f_base = forward_many(theta_hat.flat, arch, X)[0]
    eps = rng.standard_normal((cfg.n_outputs, X.shape[0]))
    return mixture_kl(F, f_base, cfg.sigma, eps)


class _PerturbedNetwork:
    """Outputs of a fixed set of ``M`` noise directions at any per-layer scale.

    The first layer's noise contribution is linear in the noise, so it is
    computed once; later layers are rebuilt for each scale vector.  Work is
    done in single precision, which is ample for output spreads the mixture
    estimator can resolve and halves the memory traffic.
    """

    def __init__(self, params: NetworkParams, X: np.ndarray, M: int, rng: np.random.Generator):
        arch = params.arch
        self.arch = arch
        self.layers = []
        for i, (d, k) in enumerate(zip(arch.widths[:-1], arch.widths[1:])):
            block = params.flat[arch.layer_slice(i)]
            W, b = block[: k * d].reshape(k, d), block[k * d :]
            Z = rng.standard_normal((M, k, d + 1))
            # transposed so the batched product reads contiguous blocks
            Zt = np.ascontiguousarray(Z[:, :, :d].transpose(0, 2, 1), dtype=np.float32)
            self.layers.append((W.T.astype(np.float32), b.astype(np.float32), Zt, Z[:, :, d].astype(np.float32)))
        Wt0, b0, Zt0, Zb0 = self.layers[0]
        X = X.astype(np.float32)
        self.base0 = X @ Wt0 + b0
        self.noise0 = (X @ Zt0) + Zb0[:, None, :]
        self._h0 = np.empty_like(self.noise0)
        self._w = [np.empty_like(Zt) for _, _, Zt, _ in self.layers]

    def outputs(self, tau: np.ndarray) -> np.ndarray:
        s = np.sqrt(tau).astype(np.float32)
        h = np.multiply(self.noise0, s[0], out=self._h0)
        h += self.base0
        last = len(self.layers) - 1
        for i, (Wt, b, Zt, Zb) in enumerate(self.layers[1:], start=1):
            if self.arch.activations[i - 1] == "relu":
                np.maximum(h, 0.0, out=h)
            Wj = np.multiply(Zt, s[i], out=self._w[i])
            Wj += Wt
            bias = b + s[i] * Zb
            if i == last and Wj.shape[2] == 1:
                h = np.einsum("mnd,md->mn", h, Wj[:, :, 0]) + bias
                return h.astype(float)
            h = h @ Wj
            h += bias[:, None, :]
        return h[:, :, 0].astype(float)


def hazard_curve(d_samples) -> np.ndarray:
    """Empirical cumulative hazard ``-log(1 - F)`` at the sorted samples.

    Uses the plotting positions ``F_i = i / (n + 1)`` and drops points with
    ``F > 0.99``.  Returns an ``(m, 2)`` array of ``(d, hazard)`` rows.
    """
    d = np.sort(np.asarray(d_samples, float).ravel())
    if d.size == 0:
        raise ValueError("need at least one sample")
    prob = np.arange(1, d.size + 1) / (d.size + 1)
    keep = prob <= 0.99
    return np.column_stack([d[keep], -np.log1p(-prob[keep])])


def hazard_slope(curve: np.ndarray, max_hazard: float = np.inf) -> float:
    """Least-squares slope through the origin of hazard on ``d``."""
    pts = curve[curve[:, 1] <= max_hazard]
    denom = float(np.sum(pts[:, 0] ** 2))
    return float(np.sum(pts[:, 0] * pts[:, 1]) / denom) if denom > 0 else np.nan


FIRST_DECILE_HAZARD = -np.log(0.9)


@dataclass
class KlCheckResult:
    """Prior and estimated distances per rate, one row per data set."""

    cfg: KlCheckConfig
    d_prior: dict[float, np.ndarray] = field(default_factory=dict)
    d_hat: dict[float, np.ndarray] = field(default_factory=dict)
    kl_se: dict[float, np.ndarray] = field(default_factory=dict)

    def curve(self, lam: float, dataset: int | None = None) -> np.ndarray:
        d = self.d_hat[lam] if dataset is None else self.d_hat[lam][dataset]
        return hazard_curve(d)

    def decile_slope(self, lam: float, dataset: int | None = None) -> float:
        return hazard_slope(self.curve(lam, dataset), FIRST_DECILE_HAZARD)

    def decile_slopes(self, lam: float) -> np.ndarray:
        return np.array([self.decile_slope(lam, k) for k in range(self.cfg.n_datasets)])


def run_kl_check(cfg: KlCheckConfig, rng: np.random.Generator | None = None) -> KlCheckResult:
    """Estimate ``d_hat`` for ``n_tau`` prior draws per data set and rate.

    Each data set gets a Glorot network and its own gradient ratios
    ``alpha_n / sigma^2``; the base model is ``N(f(x; theta_hat), sigma^2)``.
    Within a data set the same Dirichlet weights, Exp(1) draws, parameter
    noise and output noise are reused across flexibility draws and rates.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    arch = cfg.arch
    out = KlCheckResult(cfg)
    for lam in cfg.lambdas:
        out.d_prior[lam] = np.empty((cfg.n_datasets, cfg.n_tau))
        out.d_hat[lam] = np.empty((cfg.n_datasets, cfg.n_tau))
        out.kl_se[lam] = np.empty((cfg.n_datasets, cfg.n_tau))
    conc = np.ones(arch.n_layers)
    for k in range(cfg.n_datasets):
        X = gen_covariates(cfg.n_rows, cfg.input_dim, cfg.rho, rng)
        params = glorot_init(arch, rng)
        alpha = layer_grad_sq_norms(params, X) / cfg.sigma**2
        c = sample_dirichlet(conc, cfg.n_tau, rng)
        e = rng.exponential(size=cfg.n_tau)
        net = _PerturbedNetwork(params, X, cfg.n_params, rng)
        f_base = forward_many(params.flat, arch, X)[0]
        eps = rng.standard_normal((cfg.n_outputs, cfg.n_rows))
        for lam in cfg.lambdas:
            d = e / lam
            tau_tilde = invert_distance(d, c, alpha, POINT_ESTIMATE)
            out.d_prior[lam][k] = d
            for s in range(cfg.n_tau):
                est = mixture_kl(net.outputs(tau_tilde[s] * c[s]), f_base, cfg.sigma, eps)
                out.d_hat[lam][k, s] = np.sqrt(2 * max(est.value, 0.0))
                out.kl_se[lam][k, s] = est.se
        logger.info("kl check: data set %d of %d done", k + 1, cfg.n_datasets)
    return out
