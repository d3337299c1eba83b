"""Hamiltonian Monte Carlo with a fixed number of leapfrog steps.

Step size is tuned by dual averaging toward a target acceptance
probability; a diagonal mass matrix is estimated from burn-in draws.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

MIXING_FAILURE_RATE = 0.05
_MAX_ENERGY_ERROR = 1000.0
REFINE_CHUNK = 25

LogDensity = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass(frozen=True)
class HmcConfig:
    n_leapfrog: int = 50
    target_accept: float = 0.65
    n_burnin: int = 5000
    n_keep: int = 2000
    thin: int = 4
    init_buffer: float = 0.15
    term_buffer: float = 0.3
    n_mass_windows: int = 2
    refine_fraction: float = 0.5
    step_jitter: float = 0.1
    seed: int | None = None

    def __post_init__(self):
        for name in ("n_leapfrog", "n_keep", "thin"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.n_burnin < 0 or self.n_mass_windows < 0:
            raise ValueError("burn-in and window counts must be non-negative")
        if not 0 < self.target_accept < 1:
            raise ValueError("target acceptance must lie in (0, 1)")
        if not 0 <= self.refine_fraction < 1:
            raise ValueError("refine_fraction must lie in [0, 1)")
        if not 0 <= self.step_jitter < 1:
            raise ValueError("step jitter must lie in [0, 1)")
        if self.init_buffer < 0 or self.term_buffer < 0 or self.init_buffer + self.term_buffer >= 1:
            raise ValueError("adaptation buffers must leave room for mass windows")


@dataclass
class HmcResult:
    """Kept unconstrained draws and sampler diagnostics."""

    draws: np.ndarray
    log_density: np.ndarray
    step_size: float
    inv_mass: np.ndarray
    accept_prob: float
    accept_rate: float
    n_divergent: int
    step_trace: np.ndarray = field(repr=False)
    warnings: list[str] = field(default_factory=list)


class DualAveraging:
    """Nesterov dual-averaging step-size adaptation toward a target acceptance rate."""

    def __init__(self, step0: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * step0)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.h_bar = 0.0
        self.log_step_bar = 0.0
        self.m = 0

    def update(self, accept_prob: float) -> float:
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.h_bar = (1 - w) * self.h_bar + w * (self.target - accept_prob)
        log_step = self.mu - np.sqrt(m) / self.gamma * self.h_bar
        eta = m ** (-self.kappa)
        self.log_step_bar = eta * log_step + (1 - eta) * self.log_step_bar
        return float(np.exp(log_step))

    @property
    def final_step(self) -> float:
        return float(np.exp(self.log_step_bar))


def _leapfrog(logp_grad: LogDensity, q, p, grad, step, n_steps, inv_mass):
    p = p + 0.5 * step * grad
    for i in range(n_steps):
        q = q + step * inv_mass * p
        lp, grad = logp_grad(q)
        if not np.isfinite(lp):
            return q, p, -np.inf, grad
        if i < n_steps - 1:
            p = p + step * grad
    p = p + 0.5 * step * grad
    return q, p, lp, grad


def _transition(logp_grad, q, lp, grad, step, n_steps, inv_mass, rng):
    p0 = rng.standard_normal(q.size) / np.sqrt(inv_mass)
    h0 = -lp + 0.5 * np.sum(inv_mass * p0**2)
    with np.errstate(over="ignore", invalid="ignore"):
        q1, p1, lp1, grad1 = _leapfrog(logp_grad, q, p0, grad, step, n_steps, inv_mass)
        h1 = -lp1 + 0.5 * np.sum(inv_mass * p1**2)
    energy_error = h1 - h0
    if not np.isfinite(energy_error) or energy_error > _MAX_ENERGY_ERROR:
        return q, lp, grad, 0.0, True
    accept_prob = float(np.exp(min(0.0, -energy_error)))
    if rng.uniform() < accept_prob:
        return q1, lp1, grad1, accept_prob, False
    return q, lp, grad, accept_prob, False


def _initial_step(logp_grad, q, lp, grad, inv_mass, rng) -> float:
    """Double or halve a one-step trajectory until acceptance crosses 1/2."""
    step = 0.1
    p = rng.standard_normal(q.size) / np.sqrt(inv_mass)
    h0 = -lp + 0.5 * np.sum(inv_mass * p**2)

    def log_ratio(eps):
        with np.errstate(over="ignore", invalid="ignore"):
            _, p1, lp1, _ = _leapfrog(logp_grad, q, p, grad, eps, 1, inv_mass)
            val = h0 - (-lp1 + 0.5 * np.sum(inv_mass * p1**2))
        return val if np.isfinite(val) else -np.inf

    direction = 1.0 if log_ratio(step) > np.log(0.5) else -1.0
    for _ in range(50):
        if direction * log_ratio(step) <= direction * np.log(0.5):
            break
        step *= 2.0**direction
    return step


def adaptation_windows(cfg: HmcConfig) -> list[tuple[int, int]]:
    """Burn-in iteration ranges over which mass-matrix draws are collected.

    The middle of burn-in is split into doubling windows; the last window
    absorbs any remainder so the terminal buffer keeps its size.
    """
    n = cfg.n_burnin
    start = int(cfg.init_buffer * n)
    end = n - int(cfg.term_buffer * n)
    k = cfg.n_mass_windows
    if k == 0 or end - start < 10 * k:
        return []
    unit = (end - start) / (2**k - 1)
    bounds = [start + int(round(unit * (2**j - 1))) for j in range(k + 1)]
    bounds[-1] = end
    return list(zip(bounds[:-1], bounds[1:]))


def run_hmc(
    logp_grad: LogDensity,
    q0: np.ndarray,
    cfg: HmcConfig,
    rng: np.random.Generator,
    *,
    inv_mass: np.ndarray | None = None,
    step_size: float | None = None,
) -> HmcResult:
    """Sample from ``exp(logp)`` on an unconstrained space.

    Burn-in tunes the step size by dual averaging, re-estimating a diagonal
    mass matrix at the end of each adaptation window; kept iterations run with
    the adapted values frozen.

    The dual-averaging step is an average of log step sizes that fluctuate
    during adaptation, and because acceptance is concave in the step near the
    target that average accepts more often than targeted.  The last
    ``refine_fraction`` of the terminal buffer therefore holds the step fixed
    over chunks of ``REFINE_CHUNK`` iterations and moves its log by a
    decreasing gain times the chunk's acceptance error.
    """
    q = np.array(q0, dtype=float)
    lp, grad = logp_grad(q)
    if not np.isfinite(lp):
        raise ValueError("initial state has non-finite log density")
    inv_mass = np.ones(q.size) if inv_mass is None else np.asarray(inv_mass, float).copy()
    step = step_size or _initial_step(logp_grad, q, lp, grad, inv_mass, rng)
    adapter = DualAveraging(step, cfg.target_accept)
    windows = adaptation_windows(cfg)
    window_ends = {end: start for start, end in windows}
    window_draws: list[np.ndarray] = []
    step_trace = np.empty(cfg.n_burnin)
    n_refine = int(cfg.refine_fraction * int(cfg.term_buffer * cfg.n_burnin)) // REFINE_CHUNK * REFINE_CHUNK
    refine_start = cfg.n_burnin - n_refine
    chunk: list[float] = []
    for it in range(cfg.n_burnin):
        if it == refine_start:
            step = adapter.final_step
        eps = step * (1 + cfg.step_jitter * rng.uniform(-1, 1))
        q, lp, grad, a, _ = _transition(logp_grad, q, lp, grad, eps, cfg.n_leapfrog, inv_mass, rng)
        if it < refine_start:
            step = adapter.update(a)
        else:
            chunk.append(a)
            if len(chunk) == REFINE_CHUNK:
                k = (it + 1 - refine_start) // REFINE_CHUNK
                step *= np.exp(1.5 * k**-0.6 * (np.mean(chunk) - cfg.target_accept))
                chunk = []
        step_trace[it] = step
        if any(s <= it < e for s, e in windows):
            window_draws.append(q)
        if it + 1 in window_ends:
            draws = np.asarray(window_draws)
            n = len(draws)
            # shrink toward a small constant as in Stan's regularized estimator
            inv_mass = (n / (n + 5.0)) * draws.var(axis=0) + 1e-3 * (5.0 / (n + 5.0))
            window_draws = []
            step = _initial_step(logp_grad, q, lp, grad, inv_mass, rng)
            adapter = DualAveraging(step, cfg.target_accept)
    if cfg.n_burnin and n_refine == 0:
        step = adapter.final_step
    kept = np.empty((cfg.n_keep, q.size))
    kept_lp = np.empty(cfg.n_keep)
    probs, moved, divergent = [], 0, 0
    for it in range(cfg.n_keep * cfg.thin):
        eps = step * (1 + cfg.step_jitter * rng.uniform(-1, 1))
        q_new, lp, grad, a, div = _transition(logp_grad, q, lp, grad, eps, cfg.n_leapfrog, inv_mass, rng)
        moved += q_new is not q
        q = q_new
        probs.append(a)
        divergent += div
        if (it + 1) % cfg.thin == 0:
            kept[it // cfg.thin] = q
            kept_lp[it // cfg.thin] = lp
    n_iter = cfg.n_keep * cfg.thin
    accept_prob = float(np.mean(probs))
    warnings = []
    if accept_prob < MIXING_FAILURE_RATE:
        msg = f"mixing failure: acceptance rate {accept_prob:.3f} after adaptation"
        logger.warning(msg)
        warnings.append(msg)
    return HmcResult(
        draws=kept,
        log_density=kept_lp,
        step_size=float(step),
        inv_mass=inv_mass,
        accept_prob=accept_prob,
        accept_rate=moved / n_iter,
        n_divergent=divergent,
        step_trace=step_trace,
        warnings=warnings,
    )


def effective_sample_size(x: np.ndarray) -> np.ndarray:
    """Per-column ESS using Geyer's initial monotone sequence estimator."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=0)[:n] / n
    out = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        if acov[0, j] <= 0:
            out[j] = n
            continue
        rho = acov[:, j] / acov[0, j]
        pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
        k = np.argmax(pairs <= 0) if np.any(pairs <= 0) else len(pairs)
        pairs = np.minimum.accumulate(pairs[:k])
        tau = -1.0 + 2.0 * pairs.sum()
        out[j] = n / max(tau, 1.0 / np.log10(max(n, 10)))
    return out


def mc_standard_error(x: np.ndarray) -> np.ndarray:
    """Monte Carlo standard error of the column means."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x.std(axis=0, ddof=1) / np.sqrt(effective_sample_size(x))
