import csv
import json

import numpy as np
import pytest

from weakgmm.cli import main
from weakgmm.model import load_designs


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def specs(tmp_path):
    p = tmp_path / "specs.json"
    assert run("gen-specs", "--k", 1, "--target-f", 5, "--n", 10, "--seed", 3, "--out", p) == 0
    return p


class TestGenSpecs:
    def test_writes_loadable(self, specs):
        ds = load_designs(specs)
        assert len(ds) == 10 and all(d.k == 1 for d in ds)

    def test_hetero_flag(self, tmp_path):
        p = tmp_path / "h.json"
        assert run("gen-specs", "--k", 2, "--target-f", 20, "--n", 2, "--hetero", "true", "--out", p) == 0
        assert all("het" in d.id for d in load_designs(p))

    def test_bad_target(self, tmp_path):
        assert run("gen-specs", "--k", 1, "--target-f", 0.5, "--n", 2, "--out", tmp_path / "x.json") == 2


class TestSimulateAndTable:
    def test_end_to_end_binning(self, specs, tmp_path):
        res, tab = tmp_path / "res.csv", tmp_path / "tab.csv"
        assert run("simulate", "--specs", specs, "--reps", 40, "--bag-draws", 20, "--grid", 201,
                   "--estimators", "tsls,btsls,qb-inv", "--out", res) == 0
        assert run("table", "--in", res, "--bin", "f", "--out", tab) == 0
        rows = list(csv.reader(open(tab)))
        assert rows[0][2:] == ["F<=10", "10<F<=20", "20<F<=50", "F>50"]
        body = [r for r in rows[1:] if r[0] != "n_specs"]
        assert [r[0] for r in body] == ["tsls", "btsls", "qb-inv"]
        for r in body:
            assert r[2] != "" and r[3:] == ["", "", ""]
        assert rows[-1] == ["n_specs", "identity", "10", "0", "0", "0"]

    def test_deterministic(self, specs, tmp_path):
        outs = []
        for i, w in enumerate((1, 3, 1)):
            p = tmp_path / f"r{i}.csv"
            assert run("simulate", "--specs", specs, "--reps", 30, "--bag-draws", 10, "--grid", 101,
                       "--workers", w, "--seed", 9, "--functionals", "identity,endog_corr", "--out", p) == 0
            outs.append(p.read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_missing_specs(self, tmp_path):
        assert run("simulate", "--specs", tmp_path / "missing.json", "--out", tmp_path / "o.csv") == 2

    def test_unknown_estimator(self, specs, tmp_path):
        assert run("simulate", "--specs", specs, "--estimators", "gel", "--out", tmp_path / "o.csv") == 2

    def test_malformed_specs(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        assert run("simulate", "--specs", p, "--out", tmp_path / "o.csv") == 2

    def test_table_malformed(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("nope\n")
        assert run("table", "--in", p, "--out", tmp_path / "t.csv") == 2

    def test_unknown_flag(self, capsys):
        assert run("simulate", "--frobnicate") == 2


class TestPrior:
    def test_density_integrates_to_one(self, specs, tmp_path):
        out = tmp_path / "p.csv"
        assert run("prior", "--specs", specs, "--grid", 501, "--out", out) == 0
        data = np.loadtxt(out, delimiter=",", skiprows=1)
        assert data.shape == (501, 2)
        area = np.sum(np.diff(data[:, 0]) * (data[1:, 1] + data[:-1, 1]) / 2)
        assert area == pytest.approx(1.0, rel=1e-12)

    def test_flat_and_id(self, specs, tmp_path):
        out = tmp_path / "p.csv"
        sid = load_designs(specs)[4].id
        assert run("prior", "--specs", specs, "--spec-id", sid, "--kind", "flat", "--grid", 11, "--out", out) == 0
        data = np.loadtxt(out, delimiter=",", skiprows=1)
        np.testing.assert_allclose(data[:, 1], data[0, 1])

    def test_unknown_id(self, specs, tmp_path):
        assert run("prior", "--specs", specs, "--spec-id", "nope", "--out", tmp_path / "p.csv") == 2


class TestVerify:
    @pytest.mark.slow
    def test_defaults_pass(self, tmp_path):
        out = tmp_path / "v.json"
        assert run("verify", "--out", out) == 0
        rep = json.loads(out.read_text())
        assert rep["passed"] and len(rep["checks"]) == 8
