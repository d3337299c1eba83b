"""Target-task posterior: joint density, unconstrained transforms and sampling.

Network parameters are sampled in non-centered form, ``flat = m + s(tau) * z``
with ``z ~ N(0, I)``, where the center ``m`` and scale ``s`` depend on the
prior kind.  Positive quantities live on the log scale and the layer weights
``c`` use stick-breaking logits, so the sampler sees an unconstrained vector.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, log_expit

from .hmc import HmcConfig, run_hmc
from .network import Architecture, NetworkParams, forward_many, glorot_init, value_and_vjp
from .prior import (
    POINT_ESTIMATE,
    VI,
    PcpPriorSpec,
    body_scales,
    invert_distance,
    log_density_and_grad,
)
from .training import SourceFit

BNN = "bnn"
PCP_VI = "pcp_vi"
PCP_PE = "pcp_pe"
GAUSSIAN = "gaussian"
KINDS = (BNN, PCP_VI, PCP_PE, GAUSSIAN)
MIN_PREDICTIVE_SAMPLES = 100

_LOG_2PI = np.log(2 * np.pi)


# ---------------------------------------------------------------- transforms


def _stick_offsets(K: int) -> np.ndarray:
    # logits of zero map to the uniform point of the simplex
    return np.log(K - 1 - np.arange(K - 1))


def stick_breaking(y: np.ndarray):
    """Simplex point and log-Jacobian from ``K - 1`` logits (leading axes batch)."""
    y = np.asarray(y, dtype=float)
    K = y.shape[-1] + 1
    x = y - _stick_offsets(K)
    z = expit(x)
    log_rem = np.concatenate([np.zeros(y.shape[:-1] + (1,)), np.cumsum(log_expit(-x), axis=-1)], axis=-1)
    rem = np.exp(log_rem)
    c = np.concatenate([rem[..., :-1] * z, rem[..., -1:]], axis=-1)
    log_jac = np.sum(log_expit(x) + log_expit(-x) + log_rem[..., :-1], axis=-1)
    return c, log_jac


def inverse_stick_breaking(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    K = c.shape[-1]
    rem = np.cumsum(c[..., ::-1], axis=-1)[..., ::-1]  # sum_{j >= k} c_j
    z = c[..., :-1] / rem[..., :-1]
    return np.log(z) - np.log1p(-z) + _stick_offsets(K)


def stick_breaking_grad(y: np.ndarray, grad_c: np.ndarray) -> np.ndarray:
    """Gradient in the logits of ``f(c) + log_jac`` given ``df/dc``."""
    y = np.asarray(y, dtype=float)
    K = y.size + 1
    c, _ = stick_breaking(y)
    z = expit(y - _stick_offsets(K))
    gc = grad_c * c
    later = np.cumsum(gc[::-1])[::-1][1:]  # sum_{k > j} g_k c_k
    j = np.arange(1, K)
    return gc[:-1] * (1 - z) - z * later + 1 - 2 * z - z * (K - 1 - j)


# ---------------------------------------------------------------- model spec


@dataclass
class TargetModelSpec:
    """Prior structure of the target model.

    ``kind`` is one of ``bnn`` (zero-centered layers with InvGamma scales),
    ``pcp_vi`` / ``pcp_pe`` (layers centered at the source fit with a PCP on
    the flexibility) or ``gaussian`` (fixed independent normal prior, used for
    conjugate checks).  ``noise_sd`` fixes the likelihood scale; otherwise
    ``sigma^2 ~ InvGamma(sigma_shape, sigma_scale)``.
    """

    arch: Architecture
    kind: str
    source: SourceFit | None = None
    prior: PcpPriorSpec | None = None
    noise_sd: float | None = None
    sigma_shape: float = 2.0
    sigma_scale: float = 1.0
    tau_shape: float = 2.0
    tau_scale: float = 1.0
    prior_mean: np.ndarray | None = None
    prior_sd: np.ndarray | float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}; expected one of {KINDS}")
        pcp = self.kind in (PCP_VI, PCP_PE)
        if pcp and (self.source is None or self.prior is None):
            raise ValueError(f"prior kind {self.kind} needs a source fit and a PCP prior spec")
        if not pcp and (self.source is not None or self.prior is not None):
            raise ValueError(f"prior kind {self.kind} takes no source anchor")
        if self.kind == PCP_VI:
            if self.prior.case != VI or self.source.sigma_diag is None:
                raise ValueError("pcp_vi needs a variational source fit and a VI-case prior")
        if self.kind == PCP_PE and self.prior.case != POINT_ESTIMATE:
            raise ValueError("pcp_pe needs a point-estimate-case prior")
        if pcp:
            if self.source.arch != self.arch:
                raise ValueError("source fit architecture differs from the target model")
            if self.prior.n_layers != self.arch.n_body_layers:
                raise ValueError("PCP prior must have one weight per body layer")
        if self.noise_sd is not None and not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        if self.kind == GAUSSIAN:
            P = self.arch.n_params
            self.prior_mean = np.zeros(P) if self.prior_mean is None else np.asarray(self.prior_mean, float)
            self.prior_sd = np.broadcast_to(np.asarray(self.prior_sd, float), (P,)).copy()
            if np.any(self.prior_sd <= 0):
                raise ValueError("prior_sd must be positive")

    @property
    def is_pcp(self) -> bool:
        return self.kind in (PCP_VI, PCP_PE)

    @property
    def beta_hat(self) -> np.ndarray:
        if self.prior.beta_hat is not None:
            return self.prior.beta_hat
        return self.source.params.head


# ---------------------------------------------------------------- samples


@dataclass
class PosteriorSample:
    params: NetworkParams
    sigma: float
    tau: np.ndarray | None
    tau_tilde: float | None
    c: np.ndarray | None
    log_post: float

    @property
    def theta(self) -> np.ndarray:
        return self.params.body

    @property
    def beta(self) -> np.ndarray:
        return self.params.head


@dataclass
class Chain:
    """Constrained draws stored column-wise, one row per kept iteration."""

    arch: Architecture
    kind: str
    flats: np.ndarray
    sigma: np.ndarray
    tau: np.ndarray | None = None
    tau_tilde: np.ndarray | None = None
    c: np.ndarray | None = None
    log_post: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.flats.shape[0]

    def __getitem__(self, i: int) -> PosteriorSample:
        return PosteriorSample(
            NetworkParams(self.arch, self.flats[i]),
            float(self.sigma[i]),
            None if self.tau is None else self.tau[i],
            None if self.tau_tilde is None else float(self.tau_tilde[i]),
            None if self.c is None else self.c[i],
            float("nan") if self.log_post is None else float(self.log_post[i]),
        )

    @property
    def samples(self) -> list[PosteriorSample]:
        return [self[i] for i in range(len(self))]


# ---------------------------------------------------------------- the joint


def _gaussian_loglik(flat, arch, X, y, log_sigma):
    """``(log-likelihood, gradient in flat, residual sum of squares)``."""
    if len(y) == 0:
        return 0.0, np.zeros(flat.size), 0.0
    sigma2 = np.exp(2 * log_sigma)
    out, grad = value_and_vjp(flat, arch, X, lambda f: (y - f) / sigma2)
    ss = float(np.sum((y - out) ** 2))
    return -0.5 * len(y) * _LOG_2PI - len(y) * log_sigma - 0.5 * ss / sigma2, grad, ss


class TargetPosterior:
    """Log joint of the target model on the unconstrained state vector.

    State layout: ``[z (n_params), log sigma (unless fixed), hyper]`` where
    ``hyper`` is ``[log tau_tilde, stick logits]`` for the PCP kinds and one
    ``log tau_i`` per layer for ``bnn``.
    """

    def __init__(self, spec: TargetModelSpec, X, y):
        self.spec = spec
        arch = spec.arch
        self.X = np.asarray(X, dtype=float).reshape(-1, arch.input_dim)
        self.y = np.asarray(y, dtype=float)
        if len(self.y) != len(self.X):
            raise ValueError("X and y have different row counts")
        self.P = arch.n_params
        self.learn_sigma = spec.noise_sd is None
        self.i_sigma = self.P
        self.i_hyper = self.P + int(self.learn_sigma)
        if spec.is_pcp:
            self.L = arch.n_body_layers
            self.n_hyper = self.L
            self._layer_idx = arch.layer_index
            self._center = np.concatenate([spec.source.params.body, spec.beta_hat])
            self._head_sd = np.sqrt(spec.prior.tau0)
            conc = spec.prior.dirichlet_conc
            self._dir_const = gammaln(conc.sum()) - gammaln(conc).sum()
        elif spec.kind == BNN:
            self.n_hyper = arch.n_layers
            self._layer_idx = arch.layer_index
        else:
            self.n_hyper = 0
        self.dim = self.i_hyper + self.n_hyper

    # -- decoding --------------------------------------------------------

    def _hyper(self, state):
        """``(scale, center, tau_layers, tau_tilde, c, stick log-Jacobian)``."""
        spec, arch = self.spec, self.spec.arch
        h = state[self.i_hyper :]
        if spec.kind == GAUSSIAN:
            return spec.prior_sd, spec.prior_mean, None, None, None, 0.0
        if spec.kind == BNN:
            tau = np.exp(h)
            return np.sqrt(tau[self._layer_idx]), 0.0, tau, None, None, 0.0
        tau_tilde = np.exp(h[0])
        c, log_jac = stick_breaking(h[1:])
        tau = tau_tilde * c
        body = body_scales(tau, arch, spec.prior.case, spec.source.sigma_diag)
        scale = np.concatenate([body, np.full(arch.widths[-2] + 1, self._head_sd)])
        return scale, self._center, tau, tau_tilde, c, log_jac

    def sigma(self, state) -> float:
        return float(np.exp(state[self.i_sigma])) if self.learn_sigma else float(self.spec.noise_sd)

    def flat_params(self, state) -> np.ndarray:
        scale, center, *_ = self._hyper(state)
        return center + scale * state[: self.P]

    def decode(self, state) -> PosteriorSample:
        state = np.asarray(state, dtype=float)
        scale, center, tau, tau_tilde, c, _ = self._hyper(state)
        flat = center + scale * state[: self.P]
        return PosteriorSample(
            NetworkParams(self.spec.arch, flat),
            self.sigma(state),
            tau,
            None if tau_tilde is None else float(tau_tilde),
            c,
            self.log_prob(state),
        )

    def encode(self, flat, sigma=None, tau=None, tau_tilde=None, c=None) -> np.ndarray:
        """Unconstrained state for constrained values (inverse of :meth:`decode`)."""
        spec = self.spec
        state = np.empty(self.dim)
        if self.learn_sigma:
            state[self.i_sigma] = np.log(sigma)
        if spec.kind == BNN:
            state[self.i_hyper :] = np.log(tau)
        elif spec.is_pcp:
            state[self.i_hyper] = np.log(tau_tilde)
            state[self.i_hyper + 1 :] = inverse_stick_breaking(c)
        scale, center, *_ = self._hyper(state)
        state[: self.P] = (np.asarray(flat, float) - center) / scale
        return state

    # -- density ---------------------------------------------------------

    def log_likelihood(self, flat, sigma: float) -> float:
        """Gaussian log-likelihood of the data at constrained parameters."""
        return _gaussian_loglik(np.asarray(flat, float), self.spec.arch, self.X, self.y, np.log(sigma))[0]

    def log_prob_parts(self, state) -> dict:
        """Named additive blocks of the log joint (no gradient)."""
        return self._evaluate(np.asarray(state, dtype=float), with_grad=False)[2]

    def log_prob(self, state) -> float:
        return self._evaluate(np.asarray(state, dtype=float), with_grad=False)[0]

    def log_prob_and_grad(self, state):
        lp, grad, _ = self._evaluate(np.asarray(state, dtype=float), with_grad=True)
        return lp, grad

    __call__ = log_prob_and_grad

    def _evaluate(self, state, with_grad):
        spec, P = self.spec, self.P
        grad = np.zeros(self.dim) if with_grad else None
        parts = {}
        scale, center, tau, tau_tilde, c, stick_jac = self._hyper(state)
        z = state[:P]
        flat = center + scale * z

        n = len(self.y)
        s = state[self.i_sigma] if self.learn_sigma else np.log(spec.noise_sd)
        sigma2 = np.exp(2 * s)
        parts["loglik"], g_flat, ss = _gaussian_loglik(flat, spec.arch, self.X, self.y, s)

        # standard normal prior on z; the scale Jacobian cancels the Gaussian normalizer
        parts["z_prior"] = -0.5 * P * _LOG_2PI - 0.5 * float(z @ z)

        if self.learn_sigma:
            a, b = spec.sigma_shape, spec.sigma_scale
            # sigma^2 ~ InvGamma(a, b) plus the log-Jacobian log 2 + 2s
            parts["sigma_prior"] = a * np.log(b) - gammaln(a) + np.log(2.0) - 2 * a * s - b * np.exp(-2 * s)

        h = state[self.i_hyper :]
        if spec.kind == BNN:
            a, b = spec.tau_shape, spec.tau_scale
            parts["hyper_prior"] = float(np.sum(a * np.log(b) - gammaln(a) - a * h - b * np.exp(-h)))
        elif spec.is_pcp:
            logp_tau, d_tau, d_c = log_density_and_grad(
                tau_tilde, c, spec.prior.lam, spec.prior.context, spec.prior.case
            )
            conc = spec.prior.dirichlet_conc
            with np.errstate(divide="ignore"):
                log_dir = self._dir_const + float(np.sum((conc - 1) * np.log(c)))
            parts["hyper_prior"] = logp_tau + log_dir
            parts["jacobian"] = h[0] + stick_jac

        lp = float(sum(parts.values()))
        if not np.isfinite(lp):
            return -np.inf, grad, parts
        if not with_grad:
            return lp, None, parts

        g_scaled = g_flat * scale
        grad[:P] = g_scaled - z
        if self.learn_sigma:
            a, b = spec.sigma_shape, spec.sigma_scale
            grad[self.i_sigma] = -n + ss / sigma2 - 2 * a + 2 * b * np.exp(-2 * s)
        if spec.kind == BNN:
            G = np.bincount(self._layer_idx, weights=g_scaled * z, minlength=self.n_hyper)
            a, b = spec.tau_shape, spec.tau_scale
            grad[self.i_hyper :] = 0.5 * G - a + b * np.exp(-h)
        elif spec.is_pcp:
            G = np.bincount(self._layer_idx, weights=g_scaled * z, minlength=self.L + 1)[: self.L]
            # d loglik / d tau_l from the body scale of layer l
            if spec.prior.case == POINT_ESTIMATE:
                with np.errstate(divide="ignore", invalid="ignore"):
                    dtau = np.where(tau > 0, 0.5 * G / tau, 0.0)
            else:
                dtau = 0.5 * G / (1.0 + tau)
            grad[self.i_hyper] = float(dtau @ tau) + d_tau * tau_tilde + 1.0
            grad_c = dtau * tau_tilde + d_c + (conc - 1) / c
            grad[self.i_hyper + 1 :] = stick_breaking_grad(h[1:], grad_c)
        return lp, grad, parts

    # -- initialization --------------------------------------------------

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        spec, arch = self.spec, self.spec.arch
        state = np.zeros(self.dim)
        if spec.kind == BNN:
            fans = np.array([d + k for d, k in zip(arch.widths[:-1], arch.widths[1:])], float)
            tau = 2.0 / fans
            # start at a Glorot draw with layer variances matching its scale
            state[self.i_hyper :] = np.log(tau)
            state[: self.P] = glorot_init(arch, rng).flat / np.sqrt(tau[self._layer_idx])
        elif spec.is_pcp:
            prior = spec.prior
            c = np.full(self.L, 1.0 / self.L)
            tau_tilde = invert_distance(np.log(2.0) / prior.lam, c, prior.context, prior.case)
            state[self.i_hyper] = np.log(max(tau_tilde, 1e-8))
        if self.learn_sigma:
            resid = self.y - forward_many(self.flat_params(state), arch, self.X)[0] if len(self.y) else np.ones(1)
            state[self.i_sigma] = np.log(max(float(np.std(resid)), 1e-3))
        return state

    # -- chains ----------------------------------------------------------

    def to_chain(self, draws: np.ndarray, log_post=None, diagnostics=None) -> Chain:
        """Map unconstrained draws ``(S, dim)`` to a :class:`Chain`."""
        spec, P = self.spec, self.P
        draws = np.atleast_2d(draws)
        S = draws.shape[0]
        sigma = np.exp(draws[:, self.i_sigma]) if self.learn_sigma else np.full(S, float(spec.noise_sd))
        h = draws[:, self.i_hyper :]
        tau = tau_tilde = c = None
        if spec.kind == GAUSSIAN:
            flats = spec.prior_mean + spec.prior_sd * draws[:, :P]
        elif spec.kind == BNN:
            tau = np.exp(h)
            flats = np.sqrt(tau[:, self._layer_idx]) * draws[:, :P]
        else:
            tau_tilde = np.exp(h[:, 0])
            c, _ = stick_breaking(h[:, 1:])
            tau = tau_tilde[:, None] * c
            body = body_scales(tau, spec.arch, spec.prior.case, spec.source.sigma_diag)
            scale = np.concatenate([body, np.full((S, P - spec.arch.head_offset), self._head_sd)], axis=1)
            flats = self._center + scale * draws[:, :P]
        return Chain(spec.arch, spec.kind, flats, sigma, tau, tau_tilde, c, log_post, diagnostics or {})


def run_chain(spec: TargetModelSpec, cfg: HmcConfig, X, y, rng: np.random.Generator, init=None) -> Chain:
    """Adapt and run one HMC chain on the target posterior."""
    model = TargetPosterior(spec, X, y)
    q0 = model.initial_state(rng) if init is None else np.asarray(init, float)
    start = time.perf_counter()
    res = run_hmc(model, q0, cfg, rng)
    diagnostics = {
        "accept_prob": res.accept_prob,
        "accept_rate": res.accept_rate,
        "step_size": res.step_size,
        "step_trace": res.step_trace,
        "n_divergent": res.n_divergent,
        "warnings": res.warnings,
        "runtime": time.perf_counter() - start,
    }
    return model.to_chain(res.draws, res.log_density, diagnostics)


# ---------------------------------------------------------------- prediction


@dataclass
class PredictiveSummary:
    mean: np.ndarray
    mu_lower: np.ndarray
    mu_upper: np.ndarray
    y_lower: np.ndarray
    y_upper: np.ndarray
    level: float


def predict_intervals(chain: Chain, X_test, level: float = 0.95, rng=None) -> PredictiveSummary:
    """Posterior mean of ``f`` and central intervals for ``mu`` and for ``y``.

    ``mu`` intervals are empirical quantiles of ``f(x; theta, beta)`` over the
    draws; ``y`` intervals add one ``N(0, sigma^2)`` draw per sample first.
    """
    if len(chain) < MIN_PREDICTIVE_SAMPLES:
        raise ValueError(f"need at least {MIN_PREDICTIVE_SAMPLES} posterior samples, got {len(chain)}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(0) if rng is None else rng
    X_test = np.asarray(X_test, dtype=float).reshape(-1, chain.arch.input_dim)
    F = forward_many(chain.flats, chain.arch, X_test)
    Y = F + chain.sigma[:, None] * rng.standard_normal(F.shape)
    q = [(1 - level) / 2, (1 + level) / 2]
    mu_lo, mu_hi = np.quantile(F, q, axis=0)
    y_lo, y_hi = np.quantile(Y, q, axis=0)
    mean = F.mean(axis=0)
    # guard the invariant against rounding when every draw agrees
    mu_lo, mu_hi = np.minimum(mu_lo, mean), np.maximum(mu_hi, mean)
    return PredictiveSummary(mean, mu_lo, mu_hi, y_lo, y_hi, level)
