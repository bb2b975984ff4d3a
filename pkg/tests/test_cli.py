import json
import time
from pathlib import Path

import numpy as np
import pytest

import artifact
from artifact.cli import CliError, main, parse_csv
from artifact.correlation_ratio import HistoricalData, estimate_lambda_plugin
from artifact.cr_tll_engine import closed_form_linear, estimate_weights
from artifact.glm_core import fit_mle
from artifact.transfer_map import MomentEstimates, map_linear_linear
from conftest import GAUSS

DATA = Path(artifact.__file__).parent / "data"


def write(path, text):
    path.write_text(text)
    return str(path)


def fit_args(out, *extra):
    return [
        "fit", "--source", str(DATA / "source.csv"), "--target", str(DATA / "target.csv"),
        "--hist-source", str(DATA / "hist_source.csv"), "--hist-target", str(DATA / "hist_target.csv"),
        "--response", "y", "--x", "x1,x2", "--z", "z", "--out", str(out), *extra,
    ]


def test_parse_csv_examples(tmp_path):
    p = write(tmp_path / "a.csv", "y,x1,x2\n1,2,3\n4,5,6\n7,8,9\n")
    t = parse_csv(p, "y", ["x1", "x2"])
    assert t.data.n == 3 and t.dropped == 0
    assert np.array_equal(t.data.X, [[2, 3], [5, 6], [8, 9]])
    p = write(tmp_path / "b.csv", "y,x1,x2\n1,2,3\n4,,6\n7,8,9\n")
    assert parse_csv(p, "y", ["x1", "x2"]).dropped == 1
    p = write(tmp_path / "c.csv", "x2,y,x1\n3,1,2\n")
    assert np.array_equal(parse_csv(p, "y", ["x1", "x2"]).data.X, [[2, 3]])


def test_standardize(rng):
    t = parse_csv(DATA / "hist_source.csv", "y", ["x1", "x2"], standardize=True)
    assert np.max(np.abs(t.data.X.mean(axis=0))) <= 1e-12
    assert np.allclose(t.data.X.std(axis=0, ddof=1), 1.0, atol=1e-12)
    raw = parse_csv(DATA / "hist_source.csv", "y", ["x1", "x2"])
    assert np.array_equal(t.data.y, raw.data.y)


def test_parse_errors(tmp_path):
    p = write(tmp_path / "m.csv", "y,x1\n1,2\n")
    with pytest.raises(CliError, match="m.csv.*x2"):
        parse_csv(p, "y", ["x1", "x2"])
    p = write(tmp_path / "n.csv", "y,x1\n1,2\n3,abc\n")
    with pytest.raises(CliError, match=r"n.csv: row 3, column x1"):
        parse_csv(p, "y", ["x1"])


def test_fit_matches_closed_form_oracle(tmp_path):
    assert main(fit_args(tmp_path)) == 0
    doc = json.loads((tmp_path / "fit.json").read_text())
    src = parse_csv(DATA / "source.csv", "y", ["x1", "x2"]).data
    tgt = parse_csv(DATA / "target.csv", "y", ["x1", "x2"], ["z"]).data
    hs = parse_csv(DATA / "hist_source.csv", "y", ["x1", "x2"]).data
    ht = parse_csv(DATA / "hist_target.csv", "y", ["x1", "x2"]).data
    lam = estimate_lambda_plugin(HistoricalData(hs, ht))
    m = MomentEstimates(hs.X.T @ hs.X / hs.n, tgt.X.T @ tgt.X / tgt.n, tgt.X.T @ tgt.Z / tgt.n)
    J = map_linear_linear(lam, m).jacobian_alpha(np.zeros(3))
    w = estimate_weights([fit_mle(GAUSS, src)], fit_mle(GAUSS, tgt.as_sample()))
    oracle = closed_form_linear([(J[:, :2], J[:, 2:])], [(GAUSS, src)], (GAUSS, tgt), w)
    got = np.r_[doc["fit"]["gamma"], doc["fit"]["theta"]]
    assert np.allclose(got, oracle.alpha, atol=1e-8)
    assert doc["labels"] == ["x1", "x2", "z"]


def test_no_sources_is_mle(tmp_path, capsys):
    args = ["fit", "--no-sources", "--target", str(DATA / "target.csv"), "--response", "y",
            "--x", "x1,x2", "--z", "z", "--out", str(tmp_path)]
    assert main(args) == 0
    doc = json.loads((tmp_path / "fit.json").read_text())
    tgt = parse_csv(DATA / "target.csv", "y", ["x1", "x2"], ["z"]).data
    mle = fit_mle(GAUSS, tgt.as_sample()).coefficients
    assert np.allclose(doc["fit"]["gamma"] + doc["fit"]["theta"], mle, atol=1e-10)


def test_bernoulli_rejects_non_binary(tmp_path, capsys):
    args = fit_args(tmp_path, "--family-target", "bernoulli")
    assert main(args) == 2
    assert "target.csv" in capsys.readouterr().err


def test_identical_hist_files_give_unit_ratio(tmp_path, capsys):
    p = str(DATA / "hist_source.csv")
    out = tmp_path / "lam.json"
    assert main(["estimate-lambda", "--hist-source", p, "--hist-target", p, "--response", "y",
                 "--x", "x1,x2", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["method"] == "plugin" and np.array_equal(doc["lambda"]["diag"], [1.0, 1.0])


def test_bias_corrected_lambda(tmp_path, capsys):
    out = tmp_path / "lam.json"
    assert main(["estimate-lambda", "--hist-source", str(DATA / "hist_source.csv"),
                 "--hist-target", str(DATA / "hist_target.csv"), "--source", str(DATA / "source.csv"),
                 "--target", str(DATA / "target.csv"), "--response", "y", "--x", "x1,x2", "--z", "z",
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["method"] == "bias-corrected" and doc["grid"][0] == 0.0


def test_js_demo(tmp_path, capsys):
    out = tmp_path / "js.json"
    assert main(["js-demo", "--k", "5", "--reps", "20000", "--seed", "1", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["js_risk"] < doc["ordinary_risk"]
    assert doc["ordinary_risk"] == pytest.approx(5.0, rel=0.05)


def test_malformed_file_named(tmp_path, capsys):
    bad = write(tmp_path / "broken.csv", "y,x1,x2\n1,oops,2\n")
    args = ["fit", "--no-sources", "--target", bad, "--response", "y", "--x", "x1,x2", "--out", str(tmp_path)]
    assert main(args) == 2
    assert "broken.csv" in capsys.readouterr().err


def test_show_fit_round_trip(tmp_path, capsys):
    assert main(fit_args(tmp_path, "--mle", "--bootstrap", "100", "--seed", "3")) == 0
    printed = capsys.readouterr().out
    assert main(["show-fit", str(tmp_path / "fit.json")]) == 0
    assert capsys.readouterr().out == printed
    doc = json.loads((tmp_path / "fit.json").read_text())
    assert len(doc["bootstrap"]["lower"]) == 3 and "mle" in doc


@pytest.mark.parametrize("form", ["stein", "wu-ritt", "density"])
def test_other_map_forms_run(tmp_path, form, capsys):
    assert main(fit_args(tmp_path, "--map", form)) == 0
    doc = json.loads((tmp_path / "fit.json").read_text())
    assert np.all(np.isfinite(doc["fit"]["gamma"]))


def test_simulate_quick_and_reproducible(tmp_path, capsys):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        t0 = time.perf_counter()
        assert main(["simulate", "--config", "table1_part1", "--replications", "10", "--out", str(out)]) == 0
        assert time.perf_counter() - t0 < 5.0
        runs.append({f: (out / f).read_bytes() for f in ("table.csv", "table.json", "series.dat")})
    assert runs[0] == runs[1]


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", json.dumps({"schema": 1, "bogus": 1}))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "c.json" in capsys.readouterr().err
