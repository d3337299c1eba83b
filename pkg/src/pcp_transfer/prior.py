"""Penalized-complexity priors on the flexibility of a transferred network.

The target body parameters deviate from the source estimate layer by layer
with scales ``tau_i = tau_tilde * c_i`` where ``c`` lives on the simplex.  An
Exp(lambda) prior on the scaled distance ``d = sqrt(2 KL)`` from the base
model induces a prior on ``tau_tilde`` given ``c``.

Both constructions share one mapping,

    D(tau_tilde) = sum_k w_k * phi(tau_tilde * a_k),   d = sqrt(D),

with ``(w, a) = (v_i, c_i)`` over layers when the source fit carries
variances, and ``(w, a) = (1/N, <c, alpha_n>)`` over target inputs when it
is a point estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .network import Architecture, NetworkParams, forward_many, layer_grad_sq_norms

logger = logging.getLogger(__name__)

VI = "vi"
POINT_ESTIMATE = "point_estimate"
CASES = (VI, POINT_ESTIMATE)

SINGULAR_EPS = 1e-12
_SERIES_CUTOFF = 1e-3
_MAX_BRACKET_DOUBLINGS = 60


class PriorDomainError(ValueError):
    pass


class DegenerateMappingError(ValueError):
    """The distance mapping is identically zero for the given weights."""


class InversionOverflowError(OverflowError):
    """No bracket up to 2**60 reaches the requested distance."""


class SingularBaseModelError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


def phi(x):
    """``x - log(1 + x)`` for ``x >= 0``, accurate near zero."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise PriorDomainError("phi is defined for x >= 0")
    small = x < _SERIES_CUTOFF
    xs = np.where(small, x, 0.0)
    series = xs**2 * (0.5 - xs * (1 / 3 - xs * (0.25 - xs * (0.2 - xs * (1 / 6 - xs / 7)))))
    xl = np.where(small, 1.0, x)
    out = np.where(small, series, xl - np.log1p(xl))
    return out if out.ndim else float(out)


def _dphi(x):
    return x / (1.0 + x)


def _weights(c, context, case):
    """``(w, a)`` for the mapping; ``c`` may carry a leading batch axis."""
    c = np.asarray(c, dtype=float)
    context = np.asarray(context, dtype=float)
    if case == VI:
        return context, c
    if case == POINT_ESTIMATE:
        return np.full(context.shape[0], 1.0 / context.shape[0]), c @ context.T
    raise ValueError(f"unknown prior case {case!r}; expected one of {CASES}")


def _D(tau_tilde, w, a):
    tau_tilde = np.asarray(tau_tilde, dtype=float)
    return np.sum(w * phi(tau_tilde[..., None] * a), axis=-1)


def kl_vi(tau_tilde, c, v):
    """KL from the source-posterior base model to its inflated version."""
    return 0.5 * float(_D(tau_tilde, np.asarray(v, float), np.asarray(c, float)))


def _check_nondegenerate(w, a):
    if not np.all(np.sum(w * a, axis=-1) > 0):
        raise DegenerateMappingError("every layer weight in the distance mapping is zero")


def distance_vi(tau_tilde, c, v):
    """Scaled distance ``sqrt(sum_i v_i phi(c_i tau_tilde))``."""
    w, a = _weights(c, v, VI)
    _check_nondegenerate(w, a)
    return float(np.sqrt(_D(tau_tilde, w, a)))


def distance_pe(tau_tilde, c, alpha):
    """Scaled distance ``sqrt(mean_n phi(tau_tilde <c, alpha_n>))``."""
    w, a = _weights(c, alpha, POINT_ESTIMATE)
    _check_nondegenerate(w, a)
    return float(np.sqrt(_D(tau_tilde, w, a)))


def distance(tau_tilde, c, context, case):
    w, a = _weights(c, context, case)
    return np.sqrt(_D(tau_tilde, w, a))


def alpha_tilde(source, beta_hat, X) -> np.ndarray:
    """Per-input, per-body-layer gradient ratios at the source anchor.

    Entry ``(n, i)`` is ``||grad_{theta_i} f(x_n)||^2 / ||grad_beta f(x_n)||^2``
    evaluated at the source body with head ``beta_hat``.  ``source`` is a
    fit with a ``params`` attribute or a :class:`NetworkParams`.
    """
    params = getattr(source, "params", source)
    anchor = params.with_head(np.asarray(beta_hat, float)) if beta_hat is not None else params
    norms = layer_grad_sq_norms(anchor, X)
    head = norms[:, -1]
    bad = np.flatnonzero(head <= SINGULAR_EPS)
    if bad.size:
        raise SingularBaseModelError(
            f"head gradient vanishes at row {bad[0]} (||grad_beta f||^2 = {head[bad[0]]:.3g})"
        )
    return norms[:, :-1] / head[:, None]


def invert_distance(d_target, c, context, case, rtol: float = 1e-10):
    """``tau_tilde`` whose distance equals ``d_target``.

    Brackets by doubling from ``[0, 1]`` and then bisects down to adjacent
    floating point values.  Accepts a scalar or a batch of targets with a
    matching batch of ``c`` rows.
    """
    d = np.asarray(d_target, dtype=float)
    scalar = d.ndim == 0
    c = np.asarray(c, dtype=float)
    d = np.atleast_1d(d)
    if c.ndim == 1:
        c = np.broadcast_to(c, (d.size, c.size))
    if np.any(d < 0):
        raise PriorDomainError("distance targets must be non-negative")
    w, a = _weights(c, context, case)
    target = d**2

    pos = d > 0
    if np.any(pos):
        _check_nondegenerate(w, a[pos])
    lo = np.zeros_like(d)
    hi = np.where(pos, 1.0, 0.0)
    grow = pos & (_D(hi, w, a) < target)
    doublings = 0
    while grow.any():
        doublings += 1
        if doublings > _MAX_BRACKET_DOUBLINGS:
            raise InversionOverflowError(f"distance {d[grow].max():.6g} unattainable below 2**60")
        lo[grow] = hi[grow]
        hi[grow] *= 2.0
        grow[grow] = _D(hi[grow], w, a[grow]) < target[grow]

    active = np.flatnonzero(pos)
    for _ in range(2200):
        if active.size == 0:
            break
        mid = 0.5 * (lo[active] + hi[active])
        moving = (mid > lo[active]) & (mid < hi[active])
        active, mid = active[moving], mid[moving]
        below = _D(mid, w, a[active]) < target[active]
        lo[active[below]] = mid[below]
        hi[active[~below]] = mid[~below]

    # pick the closer endpoint of the final bracket
    err_lo = np.abs(np.sqrt(_D(lo, w, a)) - d)
    err_hi = np.abs(np.sqrt(_D(hi, w, a)) - d)
    tau = np.where(err_lo <= err_hi, lo, hi)
    err = np.minimum(err_lo, err_hi)
    if np.any(err > rtol * np.maximum(1.0, d)):
        logger.warning("distance inversion residual %.3g above tolerance", err.max())
    return float(tau[0]) if scalar else tau


def _log_density_parts(tau_tilde, w, a, lam):
    tau = np.asarray(tau_tilde, dtype=float)
    if np.any(tau <= 0):
        raise PriorDomainError("the flexibility density is defined for tau_tilde > 0")
    x = tau[..., None] * a
    D = np.sum(w * phi(x), axis=-1)
    D1 = np.sum(w * a * _dphi(x), axis=-1)
    # D ~ tau^2 sum(w a^2)/2 underflows long before the Jacobian term does
    limit = np.sqrt(0.5 * np.sum(w * a**2, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        jac = np.where(D > 0, D1 / (2.0 * np.sqrt(D)), limit)
    return np.log(lam) - lam * np.sqrt(D) + np.log(jac)


def _density(tau_tilde, c, lam, context, case):
    if lam <= 0:
        raise PriorDomainError("lambda must be positive")
    w, a = _weights(c, context, case)
    _check_nondegenerate(w, a)
    out = np.exp(_log_density_parts(tau_tilde, w, a, lam))
    return out if out.ndim else float(out)


def density_vi(tau_tilde, c, lam, v):
    """Prior density of ``tau_tilde`` given ``c`` when the source fit has variances."""
    return _density(tau_tilde, c, lam, v, VI)


def density_pe(tau_tilde, c, lam, alpha):
    """Prior density of ``tau_tilde`` given ``c`` for a point-estimate source.

    This is the exact change of variables ``lam exp(-lam d) |dd/dtau|`` of the
    mapping ``d = sqrt(mean_n phi(tau <c, alpha_n>))``.
    """
    return _density(tau_tilde, c, lam, alpha, POINT_ESTIMATE)


def log_density_and_grad(tau_tilde: float, c: np.ndarray, lam: float, context, case):
    """Log prior density of ``tau_tilde | c`` and its partials in ``tau_tilde`` and ``c``."""
    w, a = _weights(c, context, case)
    t = float(tau_tilde)
    x = t * a
    one = 1.0 + x
    D = float(np.sum(w * phi(x)))
    D1 = float(np.sum(w * a * x / one))
    if not (D > 0 and D1 > 0):
        return -np.inf, np.nan, np.full_like(np.asarray(c, float), np.nan)
    sqD = np.sqrt(D)
    logp = np.log(lam) - lam * sqD + np.log(D1) - np.log(2.0) - 0.5 * np.log(D)

    dD_dt = D1
    dD1_dt = float(np.sum(w * a**2 / one**2))
    dD_da = w * t * x / one
    dD1_da = w * x * (2.0 + x) / one**2
    coef_D = -lam / (2.0 * sqD) - 1.0 / (2.0 * D)
    d_tau = coef_D * dD_dt + dD1_dt / D1
    d_a = coef_D * dD_da + dD1_da / D1
    d_c = d_a if case == VI else d_a @ np.asarray(context, float)
    return float(logp), float(d_tau), d_c


@dataclass
class PcpPriorSpec:
    """Hyperparameters and cached context of a PCP prior.

    ``context`` holds the per-layer counts ``v`` for the VI case or the
    ``N x L`` gradient-ratio matrix for the point-estimate case.
    """

    lam: float
    case: str
    context: np.ndarray
    dirichlet_conc: np.ndarray | None = None
    tau0: float = 100.0
    beta_hat: np.ndarray | None = None

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown prior case {self.case!r}")
        if not self.lam > 0:
            raise PriorDomainError("lambda must be positive")
        self.context = np.asarray(self.context, dtype=float)
        if not np.all(np.isfinite(self.context)) or np.any(self.context < 0):
            raise PriorDomainError("prior context must be finite and non-negative")
        if self.dirichlet_conc is None:
            self.dirichlet_conc = np.ones(self.n_layers)
        self.dirichlet_conc = np.asarray(self.dirichlet_conc, dtype=float)
        if self.dirichlet_conc.shape != (self.n_layers,) or np.any(self.dirichlet_conc <= 0):
            raise PriorDomainError("Dirichlet concentration must be positive, one entry per layer")
        if self.beta_hat is not None:
            self.beta_hat = np.asarray(self.beta_hat, dtype=float)

    @property
    def n_layers(self) -> int:
        return self.context.shape[-1] if self.case == POINT_ESTIMATE else self.context.size

    def with_lambda(self, lam: float) -> PcpPriorSpec:
        return PcpPriorSpec(lam, self.case, self.context, self.dirichlet_conc, self.tau0, self.beta_hat)


@dataclass
class PriorDraw:
    d: float
    tau_tilde: float
    c: np.ndarray = field(repr=False)

    @property
    def tau(self) -> np.ndarray:
        return self.tau_tilde * self.c


def sample_dirichlet(conc: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet rows as normalized Gamma draws."""
    g = rng.gamma(conc, 1.0, size=(size, conc.size))
    return g / g.sum(axis=1, keepdims=True)


def sample_prior_batch(spec: PcpPriorSpec, size: int, rng: np.random.Generator):
    """``size`` prior draws as arrays ``(d, tau_tilde, c)``."""
    c = sample_dirichlet(spec.dirichlet_conc, size, rng)
    d = rng.exponential(1.0 / spec.lam, size=size)
    tau = invert_distance(d, c, spec.context, spec.case)
    return d, tau, c


def sample_prior(spec: PcpPriorSpec, rng: np.random.Generator) -> PriorDraw:
    d, tau, c = sample_prior_batch(spec, 1, rng)
    return PriorDraw(float(d[0]), float(tau[0]), c[0])


def body_scales(tau_layers: np.ndarray, arch: Architecture, case: str, sigma_diag=None) -> np.ndarray:
    """Per-coordinate prior sd of the body around the source estimate.

    ``sqrt(tau_i)`` for a point-estimate source and ``sqrt((1 + tau_i) Sigma)``
    when the source fit carries variances.  Accepts a batch of ``tau`` rows.
    """
    tau_layers = np.asarray(tau_layers, dtype=float)
    idx = arch.layer_index[: arch.head_offset]
    if case == POINT_ESTIMATE:
        return np.sqrt(tau_layers[..., idx])
    var = np.asarray(sigma_diag, dtype=float)[: arch.head_offset]
    return np.sqrt((1.0 + tau_layers[..., idx]) * var)


def _row_corr(F: np.ndarray, y: np.ndarray) -> np.ndarray:
    Fc = F - F.mean(axis=1, keepdims=True)
    yc = y - y.mean()
    denom = np.sqrt(np.sum(Fc**2, axis=1) * np.sum(yc**2))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = Fc @ yc / denom
    return np.where(np.isfinite(r), r, 0.0)


def calibrate_lambda(
    source,
    X,
    y,
    rho_target: float,
    rng: np.random.Generator,
    *,
    spec: PcpPriorSpec,
    n_draws: int = 200,
    log_bounds: tuple[float, float] = (-10.0, 10.0),
    tol: float = 0.01,
    log_width: float = 0.01,
    max_iter: int = 60,
    noise_slack: float = 0.05,
    saturate: bool = False,
) -> float:
    """Rate at which the prior-predictive correlation with ``y`` equals ``rho_target``.

    The correlation between ``f(x_i; theta)`` and ``y_i`` is averaged over
    ``n_draws`` prior draws of ``(c, tau_tilde, theta)`` with the head fixed at
    the anchor.  The draws use common random numbers across rates, so the
    curve is smooth in ``lambda`` and bisection on ``log lambda`` is stable;
    the distance draws are stratified to cut seed-to-seed variation.
    Bisection stops once the correlation is within ``tol`` of the target and
    the ``log lambda`` bracket is narrower than ``log_width``.

    A target outside the attainable range raises :class:`CalibrationError`
    unless ``saturate`` is set, in which case the bracket end whose
    correlation is closest to the target is returned.
    """
    if not 0 < rho_target < 1:
        raise ValueError("rho_target must lie in (0, 1)")
    params = getattr(source, "params", source)
    sigma_diag = getattr(source, "sigma_diag", None)
    arch = params.arch
    anchor = params.flat.copy()
    if spec.beta_hat is not None:
        anchor[arch.head_offset :] = spec.beta_hat
    X = np.asarray(X, float)
    y = np.asarray(y, float)

    c = sample_dirichlet(spec.dirichlet_conc, n_draws, rng)
    # one Exp(1) draw per probability stratum
    u = (rng.permutation(n_draws) + rng.uniform(size=n_draws)) / n_draws
    e = -np.log1p(-u)
    z = rng.standard_normal((n_draws, arch.head_offset))

    def mean_corr(log_lam):
        tau = invert_distance(e / np.exp(log_lam), c, spec.context, spec.case)
        scales = body_scales(tau[:, None] * c, arch, spec.case, sigma_diag)
        thetas = np.tile(anchor, (n_draws, 1))
        thetas[:, : arch.head_offset] += scales * z
        with np.errstate(over="ignore", invalid="ignore"):
            F = forward_many(thetas, arch, X)
        F = np.where(np.isfinite(F), F, 0.0)
        return float(np.mean(_row_corr(F, y)))

    lo, hi = log_bounds
    r_lo, r_hi = mean_corr(lo), mean_corr(hi)
    if not (r_lo <= rho_target <= r_hi):
        if saturate:
            return float(np.exp(hi if rho_target > r_hi else lo))
        raise CalibrationError(
            f"target correlation {rho_target} outside attainable range [{r_lo:.3f}, {r_hi:.3f}]"
        )
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r = mean_corr(mid)
        if r < r_lo - noise_slack or r > r_hi + noise_slack:
            raise CalibrationError(
                f"prior-predictive correlation is not monotone in lambda: {r:.3f} outside "
                f"[{r_lo:.3f}, {r_hi:.3f}] at log lambda {mid:.3f}"
            )
        if abs(r - rho_target) < tol and hi - lo < log_width:
            return float(np.exp(mid))
        if r < rho_target:
            lo, r_lo = mid, r
        else:
            hi, r_hi = mid, r
    return float(np.exp(0.5 * (lo + hi)))
