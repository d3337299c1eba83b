"""Command-line entry point ``pcp``.

Every subcommand prints one JSON summary line on stdout and exits with a
nonzero status on failure (2 for usage errors, 1 for data or runtime errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io
from .hmc import HmcConfig
from .klcheck import FIRST_DECILE_HAZARD, KlCheckConfig, hazard_slope, run_kl_check
from .network import Architecture, ShapeError
from .posterior import BNN, PCP_PE, PCP_VI, TargetModelSpec, predict_intervals, run_chain
from .prior import POINT_ESTIMATE, VI, PcpPriorSpec, alpha_tilde, calibrate_lambda, density_pe, density_vi
from .rng import stream
from .simulation import METHODS, ScenarioConfig, result_rows, run_scenario, write_results_csv
from .training import OptimizerConfig, SourceFit, train_head, train_mean_field_vi, train_point_estimate

DEFAULT_HIDDEN = (24, 16, 12, 8)
SOURCE_TRAINER = OptimizerConfig(l2=0.03, batch_size=16)
VI_TRAINER = OptimizerConfig(lr=0.01, batch_size=32)
PRIOR_KINDS = {"bnn": BNN, "pcp-pe": PCP_PE, "pcp-vi": PCP_VI}


@dataclass(frozen=True)
class PriorSettings:
    """``[prior]`` section: fixed rate, or calibration target when ``lam`` is unset."""

    lam: float | None = None
    rho_target: float = 0.5
    tau0: float = 100.0


class UsageError(Exception):
    pass


def _summary(command: str, **fields):
    print(json.dumps({"command": command, "status": "ok", **fields}, default=_plain))


def _plain(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _ints(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("widths must be positive")
    return vals


def _config(args) -> io.RunConfig:
    if args.config is None:
        return io.RunConfig()
    known = {
        "trainer": SOURCE_TRAINER,
        "vi_trainer": VI_TRAINER,
        "prior": PriorSettings(),
        "sampler": HmcConfig(),
        "scenario": ScenarioConfig(),
        "kl": KlCheckConfig(),
    }
    return io.load_config(args.config, known)


def _seed(args, cfg: io.RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def _sampler(args, cfg: io.RunConfig, base: HmcConfig = HmcConfig()) -> HmcConfig:
    hmc = cfg.apply("sampler", base)
    overrides = {k: getattr(args, k) for k in ("n_burnin", "n_keep", "thin") if getattr(args, k, None) is not None}
    return replace(hmc, **overrides)


def _path(args, cfg, name):
    value = getattr(args, name, None)
    if value is None:
        value = cfg.paths.get(name)
    if value is None:
        raise UsageError(f"--{name.replace('_', '-')} is required")
    return Path(value)


def _output(args, cfg, default: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    return cfg.output_dir / default


# ---------------------------------------------------------------- subcommands


def cmd_train_source(args):
    cfg = _config(args)
    data = io.load_csv(_path(args, cfg, "data"))
    arch = Architecture((data.X.shape[1],) + args.hidden + (1,))
    rng = stream(_seed(args, cfg), "train-source")
    start = time.perf_counter()
    if args.vi:
        fit = train_mean_field_vi(data.X, data.y, arch, cfg.apply("vi_trainer", VI_TRAINER), rng)
    else:
        fit = train_point_estimate(data.X, data.y, arch, cfg.apply("trainer", SOURCE_TRAINER), rng)
    fit.metadata["rows_dropped"] = data.report.rows_dropped
    out = io.save_fit(fit, _output(args, cfg, "source_fit.json"))
    _summary(
        "train-source",
        output=str(out),
        variational=args.vi,
        n_rows=len(data),
        rows_dropped=data.report.rows_dropped,
        epochs=fit.metadata.get("epochs"),
        val_loss=fit.metadata.get("val_loss"),
        runtime=time.perf_counter() - start,
    )


def _target_spec(kind, source, X, y, settings: PriorSettings, trainer, seed, arch):
    """Model spec for ``kind``; PCP priors anchor at a head-only fit and calibrate the rate."""
    if kind == BNN:
        return TargetModelSpec(arch, BNN), None
    head = train_head(source.params, X, y, trainer, stream(seed, "fit-target", "head"))
    if kind == PCP_PE:
        prior = PcpPriorSpec(1.0, POINT_ESTIMATE, alpha_tilde(source, head.head, X), tau0=settings.tau0, beta_hat=head.head)
    else:
        counts = np.array(arch.param_counts[:-1], float)
        prior = PcpPriorSpec(1.0, VI, counts, tau0=settings.tau0, beta_hat=head.head)
    lam = settings.lam
    if lam is None:
        lam = calibrate_lambda(source, X, y, settings.rho_target, stream(seed, "fit-target", "lambda"), spec=prior)
    return TargetModelSpec(arch, kind, source, prior.with_lambda(lam)), lam


def cmd_fit_target(args):
    kind = PRIOR_KINDS[args.prior]
    cfg = _config(args)
    seed = _seed(args, cfg)
    source = None if kind == BNN else io.load_fit(_path(args, cfg, "source"))
    data = io.load_csv(_path(args, cfg, "data"))
    if source is None:
        arch = Architecture((data.X.shape[1],) + args.hidden + (1,))
    else:
        arch = source.arch
        if arch.input_dim != data.X.shape[1]:
            raise ShapeError(f"source expects {arch.input_dim} features, data has {data.X.shape[1]}")
        if kind == PCP_VI and not source.is_variational:
            raise UsageError("--prior pcp-vi needs a source snapshot trained with --vi")
    settings = cfg.apply("prior", PriorSettings())
    if args.lam is not None:
        settings = replace(settings, lam=args.lam)
    start = time.perf_counter()
    trainer = cfg.apply("trainer", OptimizerConfig())
    spec, lam = _target_spec(kind, source, data.X, data.y, settings, trainer, seed, arch)
    chain = run_chain(spec, _sampler(args, cfg), data.X, data.y, stream(seed, "fit-target", "hmc"))
    if lam is not None:
        chain.diagnostics["lambda"] = lam
    out = io.save_chain(chain, _output(args, cfg, "chain.npz"))
    d = chain.diagnostics
    _summary(
        "fit-target",
        output=str(out),
        prior=args.prior,
        n_samples=len(chain),
        lam=lam,
        accept_prob=d.get("accept_prob"),
        n_divergent=d.get("n_divergent"),
        step_size=d.get("step_size"),
        runtime=time.perf_counter() - start,
    )


def cmd_predict(args):
    cfg = _config(args)
    chain = io.load_chain(args.chain)
    X, y = io.load_features(_path(args, cfg, "data"))
    if X.shape[1] != chain.arch.input_dim:
        raise ShapeError(f"chain expects {chain.arch.input_dim} features, data has {X.shape[1]}")
    s = predict_intervals(chain, X, args.level, stream(_seed(args, cfg), "predict"))
    columns = ("mean", "mu_lower", "mu_upper", "y_lower", "y_upper")
    rows = list(zip(s.mean, s.mu_lower, s.mu_upper, s.y_lower, s.y_upper))
    out = io.write_table(_output(args, cfg, "predictions.csv"), columns, rows)
    extra = {}
    if y is not None:
        extra["mspe"] = float(np.mean((s.mean - y) ** 2))
        extra["y_coverage"] = float(np.mean((s.y_lower <= y) & (y <= s.y_upper)))
    _summary("predict", output=str(out), n_rows=len(X), level=args.level, **extra)


def cmd_simulate(args):
    cfg = _config(args)
    scenario = cfg.apply("scenario", ScenarioConfig())
    overrides = {"k": args.k, "n_target": args.n, "replicates": args.replicates, "seed": _seed(args, cfg)}
    if args.methods is not None:
        overrides["methods"] = tuple(args.methods)
    if args.batch_cv:
        overrides["select_batch"] = True
    scenario = replace(scenario, hmc=_sampler(args, cfg, scenario.hmc), **{k: v for k, v in overrides.items() if v is not None})
    start = time.perf_counter()
    results = run_scenario(scenario, n_jobs=args.n_jobs)
    rows = result_rows(results, scenario.k, scenario.n_target)
    out = write_results_csv(rows, _output(args, cfg, f"results_k{scenario.k}_n{scenario.n_target}.csv"))
    _summary(
        "simulate",
        output=str(out),
        k=scenario.k,
        n=scenario.n_target,
        replicates=scenario.replicates,
        mean_mspe={r.method: r.mean_mspe for r in results},
        failures=sum(len(r.failures) for r in results),
        runtime=time.perf_counter() - start,
    )


def cmd_check_kl(args):
    cfg = _config(args)
    kl = cfg.apply("kl", KlCheckConfig())
    overrides = {
        "lambdas": tuple(args.lam) if args.lam else None,
        "n_datasets": args.datasets,
        "n_tau": args.tau_draws,
        "n_params": args.param_draws,
        "seed": _seed(args, cfg),
    }
    kl = replace(kl, **{k: v for k, v in overrides.items() if v is not None})
    out_dir = Path(args.out_dir) if args.out_dir is not None else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = run_kl_check(kl)
    files, slopes = [], {}
    for lam in kl.lambdas:
        d_max = 0.0
        for k in range(kl.n_datasets):
            curve = result.curve(lam, k)
            d_max = max(d_max, float(curve[-1, 0]))
            rows = [(float(d), float(h), k) for d, h in curve]
            files.append(io.write_table(out_dir / f"hazard_lambda{lam:g}_dataset{k}.csv", ("d", "cum_hazard", "dataset_id"), rows))
        grid = np.linspace(0.0, d_max, 101)
        io.write_table(out_dir / f"reference_lambda{lam:g}.csv", ("d", "cum_hazard"), [(float(d), lam * float(d)) for d in grid])
        slopes[f"{lam:g}"] = {
            "first_decile": result.decile_slope(lam),
            "overall": hazard_slope(result.curve(lam)),
            "relative_error": abs(result.decile_slope(lam) - lam) / lam,
        }
    _summary(
        "check-kl",
        output_dir=str(out_dir),
        hazard_files=len(files),
        slopes=slopes,
        first_decile_hazard=FIRST_DECILE_HAZARD,
        runtime=time.perf_counter() - start,
    )


def _layer_weights(c, L: int) -> np.ndarray:
    if c is None:
        return np.full(L, 1.0 / L)
    c = np.array(c, float)
    if len(c) != L or np.any(c < 0) or not np.isclose(c.sum(), 1.0):
        raise UsageError(f"--c needs {L} non-negative weights summing to one")
    return c


def cmd_plot_prior(args):
    cfg = _config(args)
    grid = np.linspace(args.tau_max / args.points, args.tau_max, args.points)
    if args.source is None:
        counts = np.array(args.counts, float)
        dens = density_vi(grid, _layer_weights(args.c, len(counts)), args.lam, counts)
        case = VI
    else:
        source = io.load_fit(args.source)
        data = io.load_csv(_path(args, cfg, "data"))
        c = _layer_weights(args.c, source.arch.n_body_layers)
        trainer = cfg.apply("trainer", OptimizerConfig())
        head = train_head(source.params, data.X, data.y, trainer, stream(_seed(args, cfg), "plot-prior"))
        dens = density_pe(grid, c, args.lam, alpha_tilde(source, head.head, data.X))
        case = POINT_ESTIMATE
    out = io.write_table(_output(args, cfg, "prior_density.csv"), ("tau_tilde", "density"), list(zip(grid, dens)))
    _summary("plot-prior", output=str(out), lam=args.lam, points=args.points, case=case)


def cmd_trace(args):
    cfg = _config(args)
    chain = io.load_chain(args.chain)
    columns = ["iteration", "sigma"]
    blocks = [np.arange(len(chain)), chain.sigma]
    if chain.log_post is not None:
        columns.append("log_post")
        blocks.append(chain.log_post)
    if chain.tau_tilde is not None:
        columns.append("tau_tilde")
        blocks.append(chain.tau_tilde)
    if chain.c is not None:
        columns += [f"c{i + 1}" for i in range(chain.c.shape[1])]
        blocks += list(chain.c.T)
    if chain.tau is not None:
        columns += [f"tau{i + 1}" for i in range(chain.tau.shape[1])]
        blocks += list(chain.tau.T)
    rows = [(int(r[0]),) + tuple(float(v) for v in r[1:]) for r in np.column_stack(blocks)]
    out = io.write_table(_output(args, cfg, "trace.csv"), columns, rows)
    _summary("trace", output=str(out), n_samples=len(chain), columns=columns)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcp", description="Bayesian transfer learning with PCP priors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", type=Path, help="TOML run file")
        p.add_argument("--seed", type=int, help="global seed (overrides the run file)")
        if out:
            p.add_argument("--out", type=Path, help="output path")

    def sampler(p):
        p.add_argument("--burnin", dest="n_burnin", type=int)
        p.add_argument("--keep", dest="n_keep", type=int)
        p.add_argument("--thin", type=int)

    p = sub.add_parser("train-source", help="fit a network to source data")
    common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--hidden", type=_ints, default=DEFAULT_HIDDEN, help="hidden widths, e.g. 24,16,12,8")
    p.add_argument("--vi", action="store_true", help="mean-field variational fit instead of a point estimate")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("fit-target", help="sample the target posterior")
    common(p)
    sampler(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--prior", choices=sorted(PRIOR_KINDS), required=True)
    p.add_argument("--source", type=Path, help="source snapshot (required for pcp priors)")
    p.add_argument("--hidden", type=_ints, default=DEFAULT_HIDDEN, help="hidden widths for --prior bnn")
    p.add_argument("--lambda", dest="lam", type=float, help="fixed PCP rate (default: calibrate)")
    p.set_defaults(func=cmd_fit_target)

    p = sub.add_parser("predict", help="posterior mean and intervals from a saved chain")
    common(p)
    p.add_argument("--chain", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="run the five-method comparison on synthetic tasks")
    common(p)
    sampler(p)
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument(
        "--batch-cv", action="store_true", help="choose the target batch size by 3-fold CV over {16, 32, 64, 128}"
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check-kl", help="compare implied and empirical flexibility distributions")
    common(p, out=False)
    p.add_argument("--lambda", dest="lam", type=float, action="append", help="rate to check (repeatable)")
    p.add_argument("--datasets", type=int)
    p.add_argument("--tau-draws", type=int)
    p.add_argument("--param-draws", type=int)
    p.add_argument("--out-dir", type=Path)
    p.set_defaults(func=cmd_check_kl)

    p = sub.add_parser("plot-prior", help="tabulate the marginal prior density of the flexibility")
    common(p)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--counts", type=_ints, default=(744, 400, 204, 104), help="per-layer parameter counts")
    p.add_argument("--c", type=float, nargs="+", help="layer weights (default uniform)")
    p.add_argument("--source", type=Path, help="point-estimate source snapshot")
    p.add_argument("--data", type=Path, help="target data for the point-estimate case")
    p.add_argument("--tau-max", type=float, default=0.2)
    p.add_argument("--points", type=int, default=200)
    p.set_defaults(func=cmd_plot_prior)

    p = sub.add_parser("trace", help="export hyperparameter traces from a saved chain")
    common(p)
    p.add_argument("--chain", type=Path, required=True)
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    if args.command == "fit-target" and args.prior != "bnn" and args.source is None and args.config is None:
        parser.error("--prior pcp-pe and pcp-vi need --source")
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (io.DataFormatError, ShapeError, ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(json.dumps({"command": args.command, "status": "error", "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
