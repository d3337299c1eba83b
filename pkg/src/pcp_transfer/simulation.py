"""Synthetic source and target tasks and the five-method comparison.

Covariates follow an AR(1) recursion across columns.  Source responses use
the mean ``c cos(2 sum_{j<=k1} x_j / k1)`` and target responses the same form
over the first ``k1 + k`` covariates, so ``k`` controls how far the tasks
drift apart.  Each replicate fits two non-Bayesian transfer baselines and
three Bayesian models and scores them on a shared test split.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .hmc import HmcConfig
from .network import Architecture, NetworkParams, forward
from .posterior import BNN, PCP_PE, PCP_VI, TargetModelSpec, predict_intervals, run_chain
from .prior import POINT_ESTIMATE, VI, PcpPriorSpec, alpha_tilde, calibrate_lambda
from .rng import stream
from .training import (
    OptimizerConfig,
    SourceFit,
    select_batch_size,
    train_head,
    train_mean_field_vi,
    train_point_estimate,
)

logger = logging.getLogger(__name__)

TL1, TL2 = "TL1", "TL2"
BAYES_BNN, BTL_PE, BTL_VI = "BNN", "BTL-PCP-PE", "BTL-PCP-VI"
METHODS = (TL1, TL2, BAYES_BNN, BTL_PE, BTL_VI)
BAYESIAN = (BAYES_BNN, BTL_PE, BTL_VI)
FINE_TUNE_FACTOR = 0.1
RESULT_COLUMNS = ("k", "n", "method", "mean_mspe", "se_mspe", "mean_coverage")


class ScenarioError(RuntimeError):
    """Too many replicates failed for the scenario summary to be meaningful."""

    def __init__(self, message: str, results: list | None = None):
        super().__init__(message)
        self.results = results


# ---------------------------------------------------------------- data


def gen_covariates(n: int, p: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """AR(1) covariates across columns with unit marginal variance."""
    if not abs(rho) < 1:
        raise ValueError("rho must lie in (-1, 1)")
    X = np.empty((n, p))
    X[:, 0] = rng.standard_normal(n)
    innov = np.sqrt(1 - rho**2)
    for j in range(1, p):
        X[:, j] = rho * X[:, j - 1] + innov * rng.standard_normal(n)
    return X


def cos_mean(X: np.ndarray, k_active: int) -> np.ndarray:
    """``cos(2 sum_{j<=k} x_j / k)`` per row."""
    if not 1 <= k_active <= X.shape[1]:
        raise ValueError(f"k_active must lie in [1, {X.shape[1]}]")
    return np.cos(2.0 * X[:, :k_active].sum(axis=1) / k_active)


def snr_scale(
    k_active: int, p: int, rho: float, rng: np.random.Generator, *, snr: float = 4.0, n_ref: int = 100_000
) -> float:
    """Constant ``c`` with ``Var(c mu(x)) = snr`` on a reference draw (unit noise variance)."""
    sd = float(np.std(cos_mean(gen_covariates(n_ref, p, rho, rng), k_active)))
    if not sd > 0:
        raise ValueError("the mean function has zero variance on the reference draw")
    return float(np.sqrt(snr) / sd)


def gen_response(
    X: np.ndarray,
    k_active: int,
    sigma: float,
    rng: np.random.Generator,
    *,
    c_scale: float | None = None,
    rho: float = 0.5,
    snr: float = 4.0,
    n_ref: int = 100_000,
) -> tuple[np.ndarray, float]:
    """Responses ``c mu(x) + sigma * noise`` and the scale ``c``.

    Without ``c_scale`` the scale is estimated from an ``n_ref``-row
    reference draw with the same covariate law.
    """
    if c_scale is None:
        c_scale = snr_scale(k_active, X.shape[1], rho, rng, snr=snr, n_ref=n_ref)
    mu = c_scale * cos_mean(X, k_active)
    return mu + sigma * rng.standard_normal(len(X)), c_scale


# ---------------------------------------------------------------- baselines


def fit_tl1(X, y, arch: Architecture, cfg: OptimizerConfig, rng: np.random.Generator) -> NetworkParams:
    """Target-only network from a fresh Glorot start."""
    return train_point_estimate(X, y, arch, cfg, rng).params


def fit_tl2(
    source: SourceFit, X, y, cfg: OptimizerConfig, rng: np.random.Generator, *, head: NetworkParams | None = None
) -> NetworkParams:
    """Head-only training on the frozen source body, then fine-tuning of every layer.

    The second stage runs at ``FINE_TUNE_FACTOR`` times the first stage's
    learning rate.  A precomputed first stage can be passed as ``head``.
    """
    stage1 = train_head(source.params, X, y, cfg, rng) if head is None else head
    fit = train_point_estimate(X, y, source.params.arch, cfg, rng, init=stage1, lr=cfg.lr * FINE_TUNE_FACTOR)
    return fit.params


# ---------------------------------------------------------------- scenario


@dataclass(frozen=True)
class ScenarioConfig:
    p: int = 30
    rho: float = 0.5
    sigma: float = 1.0
    k1: int = 15
    k: int = 0
    n_target: int = 70
    n_source: int = 1000
    n_test: int = 200
    replicates: int = 50
    hidden: tuple[int, ...] = (24, 16, 12, 8)
    seed: int = 0
    snr: float = 4.0
    n_ref: int = 100_000
    rho_target: float = 0.5
    level: float = 0.95
    hmc: HmcConfig = HmcConfig(n_burnin=3000, n_keep=1000, thin=2)
    source_cfg: OptimizerConfig = OptimizerConfig(l2=0.03, batch_size=16)
    vi_cfg: OptimizerConfig = OptimizerConfig(lr=0.01, batch_size=32)
    target_cfg: OptimizerConfig = OptimizerConfig()
    select_batch: bool = False
    methods: tuple[str, ...] = METHODS
    max_failure_rate: float = 0.2

    def __post_init__(self):
        counts = (self.p, self.k1, self.n_target, self.n_source, self.n_test, self.replicates)
        if min(counts) < 1 or self.k < 0:
            raise ValueError("counts must be positive and k non-negative")
        if self.k1 + self.k > self.p:
            raise ValueError(f"k1 + k = {self.k1 + self.k} exceeds p = {self.p}")
        if not abs(self.rho) < 1 or self.sigma < 0:
            raise ValueError("need |rho| < 1 and sigma >= 0")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")

    @property
    def arch(self) -> Architecture:
        return Architecture((self.p,) + tuple(self.hidden) + (1,))

    @property
    def k2(self) -> int:
        return self.k1 + self.k


@dataclass
class MethodResult:
    """Per-replicate scores of one method; failed replicates hold NaN."""

    method: str
    mspe: list[float] = field(default_factory=list)
    coverage: list[float] | None = None
    runtime: list[float] = field(default_factory=list)
    failures: list[tuple[int, str]] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def is_bayesian(self) -> bool:
        return self.method in BAYESIAN

    @property
    def mean_mspe(self) -> float:
        vals = np.asarray(self.mspe, float)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    @property
    def se_mspe(self) -> float | None:
        """Standard error of the mean MSPE, absent below two successful replicates."""
        vals = np.asarray(self.mspe, float)
        vals = vals[np.isfinite(vals)]
        return float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else None

    @property
    def mean_coverage(self) -> float | None:
        if self.coverage is None:
            return None
        vals = np.asarray(self.coverage, float)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")


@dataclass
class ReplicateData:
    X_source: np.ndarray
    y_source: np.ndarray
    X_target: np.ndarray
    y_target: np.ndarray
    X_test: np.ndarray
    mu_test: np.ndarray


def make_replicate(cfg: ScenarioConfig, c_scale: float, rng: np.random.Generator) -> ReplicateData:
    Xs = gen_covariates(cfg.n_source, cfg.p, cfg.rho, rng)
    ys, _ = gen_response(Xs, cfg.k1, cfg.sigma, rng, c_scale=c_scale)
    Xt = gen_covariates(cfg.n_target, cfg.p, cfg.rho, rng)
    yt, _ = gen_response(Xt, cfg.k2, cfg.sigma, rng, c_scale=c_scale)
    Xe = gen_covariates(cfg.n_test, cfg.p, cfg.rho, rng)
    return ReplicateData(Xs, ys, Xt, yt, Xe, c_scale * cos_mean(Xe, cfg.k2))


def _tuned(cfg: ScenarioConfig, base: OptimizerConfig, X, y, rng) -> OptimizerConfig:
    if not cfg.select_batch:
        return base
    return replace(base, batch_size=select_batch_size(X, y, cfg.arch, base, rng))


def _bayes_fit(cfg, kind, source, head, data, seed, r):
    """Calibrate the PCP rate if needed and run one chain."""
    arch = cfg.arch
    diag = {}
    if kind == BNN:
        spec = TargetModelSpec(arch, BNN)
    else:
        if kind == PCP_PE:
            case, context = POINT_ESTIMATE, alpha_tilde(source, head.head, data.X_target)
        else:
            case, context = VI, np.array(arch.param_counts[:-1], float)
        prior = PcpPriorSpec(1.0, case, context, beta_hat=head.head)
        # a target task far from the source can cap the attainable correlation below rho_target
        lam = calibrate_lambda(
            source,
            data.X_target,
            data.y_target,
            cfg.rho_target,
            stream(seed, "replicate", r, kind, "lambda"),
            spec=prior,
            saturate=True,
        )
        diag["lambda"] = lam
        diag["lambda_saturated"] = lam in (np.exp(-10.0), np.exp(10.0))
        spec = TargetModelSpec(arch, kind, source, prior.with_lambda(lam))
    chain = run_chain(spec, cfg.hmc, data.X_target, data.y_target, stream(seed, "replicate", r, kind, "hmc"))
    summary = predict_intervals(chain, data.X_test, cfg.level, stream(seed, "replicate", r, kind, "predict"))
    mspe = float(np.mean((summary.mean - data.mu_test) ** 2))
    cover = float(np.mean((summary.mu_lower <= data.mu_test) & (data.mu_test <= summary.mu_upper)))
    d = chain.diagnostics
    diag.update(accept_prob=d["accept_prob"], n_divergent=d["n_divergent"], step_size=d["step_size"])
    return mspe, cover, diag


def run_replicate(cfg: ScenarioConfig, r: int, c_scale: float) -> dict[str, tuple]:
    """Scores of every method on replicate ``r``: ``method -> (mspe, coverage, runtime, error, diag)``."""
    seed = cfg.seed
    data = make_replicate(cfg, c_scale, stream(seed, "replicate", r, "data"))
    arch = cfg.arch
    out = {}
    cache = {}

    def source_pe():
        if "pe" not in cache:
            rng = stream(seed, "replicate", r, "source_pe")
            cache["pe"] = train_point_estimate(data.X_source, data.y_source, arch, cfg.source_cfg, rng)
        return cache["pe"]

    def source_vi():
        if "vi" not in cache:
            rng = stream(seed, "replicate", r, "source_vi")
            cache["vi"] = train_mean_field_vi(data.X_source, data.y_source, arch, cfg.vi_cfg, rng)
        return cache["vi"]

    def target_cfg():
        if "cfg" not in cache:
            rng = stream(seed, "replicate", r, "batch_cv")
            cache["cfg"] = _tuned(cfg, cfg.target_cfg, data.X_target, data.y_target, rng)
        return cache["cfg"]

    def head_on(name, source):
        # head-only fit on the frozen source body; TL2's first stage and the PCP head anchor
        if name not in cache:
            rng = stream(seed, "replicate", r, name)
            cache[name] = train_head(source.params, data.X_target, data.y_target, target_cfg(), rng)
        return cache[name]

    def tl1():
        net = fit_tl1(data.X_target, data.y_target, arch, target_cfg(), stream(seed, "replicate", r, TL1))
        return float(np.mean((forward(net, data.X_test) - data.mu_test) ** 2)), None, {}

    def tl2():
        src = source_pe()
        rng = stream(seed, "replicate", r, TL2)
        net = fit_tl2(src, data.X_target, data.y_target, target_cfg(), rng, head=head_on("head_pe", src))
        return float(np.mean((forward(net, data.X_test) - data.mu_test) ** 2)), None, {}

    def bnn():
        return _bayes_fit(cfg, BNN, None, None, data, seed, r)

    def pcp_pe():
        src = source_pe()
        return _bayes_fit(cfg, PCP_PE, src, head_on("head_pe", src), data, seed, r)

    def pcp_vi():
        src = source_vi()
        return _bayes_fit(cfg, PCP_VI, src, head_on("head_vi", SourceFit(src.params)), data, seed, r)

    runners = {TL1: tl1, TL2: tl2, BAYES_BNN: bnn, BTL_PE: pcp_pe, BTL_VI: pcp_vi}
    for method in cfg.methods:
        start = time.perf_counter()
        try:
            mspe, cover, diag = runners[method]()
            err = None
        except Exception as exc:  # a failed sub-run is recorded and the scenario continues
            logger.warning("replicate %d, %s failed: %s", r, method, exc)
            mspe, cover, diag, err = float("nan"), float("nan"), {}, f"{type(exc).__name__}: {exc}"
        out[method] = (mspe, cover, time.perf_counter() - start, err, diag)
    return out


def _run_replicate_star(args):
    return run_replicate(*args)


def run_scenario(cfg: ScenarioConfig, n_jobs: int = 1) -> list[MethodResult]:
    """Fit every method on ``cfg.replicates`` simulated data sets.

    Replicates draw from independent named streams, so results do not depend
    on ``n_jobs``.  Raises :class:`ScenarioError` (carrying the partial
    results) when more than ``max_failure_rate`` of replicates had a failure.
    """
    c_scale = snr_scale(cfg.k2, cfg.p, cfg.rho, stream(cfg.seed, "snr"), snr=cfg.snr, n_ref=cfg.n_ref)
    jobs = [(cfg, r, c_scale) for r in range(cfg.replicates)]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            outcomes = list(pool.map(_run_replicate_star, jobs))
    else:
        outcomes = [run_replicate(*job) for job in jobs]
    results = {m: MethodResult(m, coverage=[] if m in BAYESIAN else None) for m in cfg.methods}
    failed = set()
    for r, outcome in enumerate(outcomes):
        for method, (mspe, cover, runtime, err, diag) in outcome.items():
            res = results[method]
            res.mspe.append(mspe)
            res.runtime.append(runtime)
            res.diagnostics.append(diag)
            if res.coverage is not None:
                res.coverage.append(cover)
            if err is not None:
                res.failures.append((r, err))
                failed.add(r)
    out = list(results.values())
    if len(failed) > cfg.max_failure_rate * cfg.replicates:
        raise ScenarioError(f"{len(failed)} of {cfg.replicates} replicates had a failed method", out)
    return out


# ---------------------------------------------------------------- output


def result_rows(results: list[MethodResult], k: int, n: int) -> list[dict]:
    rows = []
    for res in results:
        rows.append(
            {
                "k": k,
                "n": n,
                "method": res.method,
                "mean_mspe": res.mean_mspe,
                "se_mspe": res.se_mspe,
                "mean_coverage": res.mean_coverage,
            }
        )
    return rows


def _check_row(row: dict):
    if tuple(row) != RESULT_COLUMNS:
        raise ValueError(f"result row has columns {tuple(row)}, expected {RESULT_COLUMNS}")
    if row["method"] not in METHODS:
        raise ValueError(f"unknown method {row['method']!r}")
    if not (np.isnan(row["mean_mspe"]) or row["mean_mspe"] >= 0):
        raise ValueError("MSPE must be non-negative")
    cov = row["mean_coverage"]
    if cov is not None and not (np.isnan(cov) or 0 <= cov <= 1):
        raise ValueError("coverage must lie in [0, 1]")
    if (cov is not None) != (row["method"] in BAYESIAN):
        raise ValueError("coverage is reported for the Bayesian methods only")


def write_results_csv(rows: list[dict], path) -> Path:
    """Write summary rows after validating them; empty cells mark absent values."""
    path = Path(path)
    for row in rows:
        _check_row(row)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path
