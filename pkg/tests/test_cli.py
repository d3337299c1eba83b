import csv
import json

import numpy as np
import pytest

from pcp_transfer import io
from pcp_transfer.cli import main
from pcp_transfer.simulation import gen_covariates, gen_response

SAMPLER = ["--burnin", "150", "--keep", "100", "--thin", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, (json.loads(out.out.strip().splitlines()[-1]) if code == 0 else None), out.err


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    for name, n, k in (("source", 300, 3), ("target", 40, 3), ("test", 25, 3)):
        X = gen_covariates(n, 6, 0.5, rng)
        y, _ = gen_response(X, k, 1.0, rng, c_scale=2.0)
        io.save_csv(io.Dataset(X, y), root / f"{name}.csv")
    return root


@pytest.fixture(scope="module")
def source_fits(files):
    pe, vi = files / "pe.json", files / "vi.json"
    assert main(["train-source", "--data", str(files / "source.csv"), "--hidden", "6,4", "--out", str(pe)]) == 0
    assert main(["train-source", "--data", str(files / "source.csv"), "--hidden", "6,4", "--vi", "--out", str(vi)]) == 0
    return pe, vi


def test_train_source_summary(files, capsys):
    code, summary, _ = run(capsys, "train-source", "--data", files / "source.csv", "--hidden", "5", "--out", files / "s.json")
    assert code == 0 and summary["status"] == "ok" and summary["n_rows"] == 300
    assert io.load_fit(files / "s.json").arch.widths == (6, 5, 1)


@pytest.mark.parametrize("prior", ["bnn", "pcp-pe", "pcp-vi"])
def test_fit_predict_trace(prior, files, source_fits, capsys):
    pe, vi = source_fits
    chain = files / f"{prior}.npz"
    src = [] if prior == "bnn" else ["--source", pe if prior == "pcp-pe" else vi]
    code, summary, err = run(
        capsys, "fit-target", "--data", files / "target.csv", "--prior", prior, "--hidden", "6,4", *src, *SAMPLER, "--out", chain
    )
    assert code == 0, err
    assert summary["n_samples"] == 100 and 0 <= summary["accept_prob"] <= 1
    assert (summary["lam"] is None) == (prior == "bnn")

    code, summary, _ = run(capsys, "predict", "--chain", chain, "--data", files / "test.csv", "--out", files / f"{prior}.csv")
    assert code == 0 and summary["n_rows"] == 25 and "mspe" in summary
    table = rows(files / f"{prior}.csv")
    assert list(table[0]) == ["mean", "mu_lower", "mu_upper", "y_lower", "y_upper"]
    t = {k: np.array([float(r[k]) for r in table]) for k in table[0]}
    assert np.all(t["mu_lower"] <= t["mu_upper"]) and np.all(t["y_lower"] <= t["y_upper"])
    assert np.mean(t["y_upper"] - t["y_lower"]) > np.mean(t["mu_upper"] - t["mu_lower"])

    code, summary, _ = run(capsys, "trace", "--chain", chain, "--out", files / f"{prior}_trace.csv")
    assert code == 0
    trace = rows(files / f"{prior}_trace.csv")
    assert len(trace) == 100
    assert ("tau_tilde" in trace[0]) == (prior != "bnn")


def test_predict_without_response(files, source_fits, capsys):
    chain = files / "bnn_small.npz"
    assert main(["fit-target", "--data", str(files / "target.csv"), "--prior", "bnn", "--hidden", "3", *SAMPLER, "--out", str(chain)]) == 0
    X = io.load_csv(files / "test.csv").X
    io.write_table(files / "features.csv", [f"x{j + 1}" for j in range(6)], [tuple(map(float, r)) for r in X])
    code, summary, _ = run(capsys, "predict", "--chain", chain, "--data", files / "features.csv", "--out", files / "p.csv")
    assert code == 0 and "mspe" not in summary and len(rows(files / "p.csv")) == 25


def test_pcp_without_source_is_usage_error(files, capsys):
    with pytest.raises(SystemExit) as info:
        main(["fit-target", "--data", str(files / "target.csv"), "--prior", "pcp-pe"])
    assert info.value.code == 2
    assert "--source" in capsys.readouterr().err


def test_pcp_vi_needs_variational_source(files, source_fits, capsys):
    with pytest.raises(SystemExit) as info:
        main(["fit-target", "--data", str(files / "target.csv"), "--prior", "pcp-vi", "--source", str(source_fits[0])])
    assert info.value.code == 2


def test_missing_file_reports_error(files, capsys):
    code, _, err = run(capsys, "train-source", "--data", files / "nope.csv", "--out", files / "x.json")
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["status"] == "error"


def test_malformed_data_reports_line(files, capsys):
    bad = files / "bad.csv"
    bad.write_text("x1,y\n1,2\n3\n")
    code, _, err = run(capsys, "train-source", "--data", bad, "--out", files / "x.json")
    assert code == 1 and "line 3" in err


def test_wrong_width_data(files, source_fits, capsys):
    bad = files / "narrow.csv"
    bad.write_text("x1,y\n1,2\n3,4\n")
    code, _, err = run(capsys, "fit-target", "--data", bad, "--prior", "pcp-pe", "--source", source_fits[0])
    assert code == 1 and "features" in err


def test_simulate(files, capsys):
    cfg = files / "sim.toml"
    cfg.write_text(
        "[scenario]\np = 6\nk1 = 3\nn_source = 300\nn_test = 40\nhidden = [6, 4]\nn_ref = 5000\nselect_batch = false\n"
        "[sampler]\nn_leapfrog = 10\n"
    )
    out = files / "sim.csv"
    code, summary, err = run(
        capsys, "simulate", "--config", cfg, "--k", 0, "--n", 30, "--replicates", 2, *SAMPLER, "--out", out
    )
    assert code == 0, err
    table = rows(out)
    assert [r["method"] for r in table] == ["TL1", "TL2", "BNN", "BTL-PCP-PE", "BTL-PCP-VI"]
    assert all(r["k"] == "0" and r["n"] == "30" for r in table)
    assert set(summary["mean_mspe"]) == {r["method"] for r in table}


def test_check_kl(files, capsys):
    out = files / "kl"
    code, summary, _ = run(
        capsys, "check-kl", "--lambda", 1, "--datasets", 2, "--tau-draws", 30, "--param-draws", 50, "--out-dir", out
    )
    assert code == 0 and summary["hazard_files"] == 2
    hazards = sorted(out.glob("hazard_*.csv"))
    assert len(hazards) == 2
    for k, path in enumerate(hazards):
        table = rows(path)
        assert list(table[0]) == ["d", "cum_hazard", "dataset_id"] and all(r["dataset_id"] == str(k) for r in table)
    ref = rows(out / "reference_lambda1.csv")
    assert all(float(r["cum_hazard"]) == pytest.approx(float(r["d"])) for r in ref)


def test_plot_prior(files, source_fits, capsys):
    code, summary, _ = run(capsys, "plot-prior", "--lambda", 2, "--counts", "10,5", "--out", files / "vi_prior.csv")
    assert code == 0 and summary["case"] == "vi"
    table = rows(files / "vi_prior.csv")
    assert len(table) == 200 and all(float(r["density"]) >= 0 for r in table)
    code, summary, _ = run(
        capsys, "plot-prior", "--source", source_fits[0], "--data", files / "target.csv", "--out", files / "pe_prior.csv"
    )
    assert code == 0 and summary["case"] == "point_estimate"
    with pytest.raises(SystemExit):
        main(["plot-prior", "--counts", "10,5", "--c", "0.2", "0.2", "--out", str(files / "x.csv")])


def test_config_rejects_unknown_keys(files, capsys):
    cfg = files / "bad.toml"
    cfg.write_text("[sampler]\nleapfrog = 3\n")
    code, _, err = run(capsys, "simulate", "--config", cfg, "--replicates", 1)
    assert code == 1 and "leapfrog" in err
