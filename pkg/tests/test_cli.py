import json
import os

import numpy as np
import pandas as pd
import pytest
import yaml

from crbjm.artifact import load_artifact, save_artifact
from crbjm.cli import main

EX_CONFIG = {
    "config_version": 1, "variant": "ex", "n": 220, "seed": 1,
    "n_biomarkers": 3, "n_covariates": 1, "n_event_types": 2,
}
TP_CONFIG = {
    "config_version": 1, "variant": "tp", "n": 200, "seed": 2,
    "n_biomarkers": 3, "n_covariates": 1, "n_event_types": 2,
    "weibull_intercept": 2.3, "tau_max": 12.0,
}


def write_config(tmp_path, cfg, name="gen.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp, EX_CONFIG)
    assert main(["simulate", "--config", cfg, "--out-dir", str(tmp / "data")]) == 0
    return tmp


@pytest.fixture(scope="module")
def artifact_path(sim_dir):
    out = str(sim_dir / "model.json")
    rc = main(["fit", "--subjects", str(sim_dir / "data/subjects.csv"),
               "--longitudinal", str(sim_dir / "data/longitudinal.csv"),
               "--method", "em", "--out", out])
    assert rc == 0
    return out


class TestSimulate:
    def test_outputs_and_determinism(self, tmp_path):
        cfg = write_config(tmp_path, dict(EX_CONFIG, n=50))
        assert main(["simulate", "--config", cfg, "--out-dir", str(tmp_path / "a")]) == 0
        assert main(["simulate", "--config", cfg, "--out-dir", str(tmp_path / "b")]) == 0
        for name in ("subjects.csv", "longitudinal.csv", "truth.csv"):
            a = (tmp_path / "a" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b

    def test_malformed_config_no_partial_outputs(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("n: 50\nvariant: [unclosed\n  seed: {")
        rc = main(["simulate", "--config", str(bad), "--out-dir", str(tmp_path / "out")])
        assert rc != 0
        assert not (tmp_path / "out").exists() or not any((tmp_path / "out").iterdir())

    def test_unknown_key_is_data_error(self, tmp_path):
        cfg = write_config(tmp_path, dict(EX_CONFIG, bogus_key=1))
        rc = main(["simulate", "--config", cfg, "--out-dir", str(tmp_path / "out")])
        assert rc == 2


class TestFit:
    def test_artifact_roundtrip_byte_identical(self, sim_dir, artifact_path, tmp_path):
        model = load_artifact(artifact_path)
        out2 = tmp_path / "model2.json"
        save_artifact(model, out2)
        assert out2.read_bytes() == open(artifact_path, "rb").read()

    def test_refit_same_seed_identical_bytes(self, sim_dir, tmp_path):
        args = ["fit", "--subjects", str(sim_dir / "data/subjects.csv"),
                "--longitudinal", str(sim_dir / "data/longitudinal.csv"),
                "--method", "cca", "--seed", "3"]
        out1, out2 = str(tmp_path / "m1.json"), str(tmp_path / "m2.json")
        assert main(args + ["--out", out1]) == 0
        assert main(args + ["--out", out2]) == 0
        assert open(out1, "rb").read() == open(out2, "rb").read()

    def test_em_equals_cca_on_uncensored_data(self, sim_dir, tmp_path):
        subj = pd.read_csv(sim_dir / "data/subjects.csv")
        keep = subj[subj["event"] != 0]
        long = pd.read_csv(sim_dir / "data/longitudinal.csv")
        long = long[long["id"].isin(keep["id"])]
        sp, lp = tmp_path / "s.csv", tmp_path / "l.csv"
        keep.to_csv(sp, index=False)
        long.to_csv(lp, index=False)
        for method, out in (("em", "em.json"), ("cca", "cca.json")):
            assert main(["fit", "--subjects", str(sp), "--longitudinal", str(lp),
                         "--method", method, "--out", str(tmp_path / out)]) == 0
        em = load_artifact(tmp_path / "em.json")
        cca = load_artifact(tmp_path / "cca.json")
        np.testing.assert_allclose(em.longitudinal.coef, cca.longitudinal.coef, atol=1e-12)

    def test_tp_without_lts_is_clear_error(self, sim_dir, tmp_path, capsys):
        rc = main(["fit", "--subjects", str(sim_dir / "data/subjects.csv"),
                   "--longitudinal", str(sim_dir / "data/longitudinal.csv"),
                   "--variant", "tp", "--out", str(tmp_path / "m.json")])
        assert rc == 3
        assert "LTS" in capsys.readouterr().err
        assert not (tmp_path / "m.json").exists()

    def test_missing_file_is_data_error(self, tmp_path):
        rc = main(["fit", "--subjects", "nope.csv", "--longitudinal", "nope2.csv",
                   "--out", str(tmp_path / "m.json")])
        assert rc == 2


class TestPredict:
    def _inputs(self, sim_dir, tmp_path):
        subj = pd.read_csv(sim_dir / "data/subjects.csv")
        subj[["id", "v1"]].to_csv(tmp_path / "baseline.csv", index=False)
        long = pd.read_csv(sim_dir / "data/longitudinal.csv")
        long.to_csv(tmp_path / "histories.csv", index=False)
        return str(tmp_path / "baseline.csv"), str(tmp_path / "histories.csv")

    def test_empty_queries(self, sim_dir, artifact_path, tmp_path):
        base, hist = self._inputs(sim_dir, tmp_path)
        q = tmp_path / "q.csv"
        q.write_text("id,s,delta,biomarker,t\n")
        out = tmp_path / "out.csv"
        assert main(["predict", "--artifact", artifact_path, "--baseline", base,
                     "--histories", hist, "--queries", str(q), "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert len(table) == 0

    def test_worker_invariance(self, sim_dir, artifact_path, tmp_path):
        base, hist = self._inputs(sim_dir, tmp_path)
        subj = pd.read_csv(sim_dir / "data/subjects.csv")
        ids = subj["id"].head(15)
        rows = [f"{i},1.0,2.5,," for i in ids] + [f"{i},1.0,,y1,3.0" for i in ids]
        q = tmp_path / "q.csv"
        q.write_text("id,s,delta,biomarker,t\n" + "\n".join(rows) + "\n")
        outs = []
        for workers in ("1", "2"):
            out = tmp_path / f"out{workers}.csv"
            assert main(["predict", "--artifact", artifact_path, "--baseline", base,
                         "--histories", hist, "--queries", str(q), "--out", str(out),
                         "--workers", workers]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_tp_horizon_error_is_row_scoped(self, tmp_path):
        cfg = write_config(tmp_path, TP_CONFIG)
        assert main(["simulate", "--config", cfg, "--out-dir", str(tmp_path / "d")]) == 0
        art = str(tmp_path / "tp.json")
        assert main(["fit", "--subjects", str(tmp_path / "d/subjects.csv"),
                     "--longitudinal", str(tmp_path / "d/longitudinal.csv"),
                     "--variant", "tp", "--method", "cca", "--out", art]) == 0
        subj = pd.read_csv(tmp_path / "d/subjects.csv")
        subj[["id", "v1"]].to_csv(tmp_path / "baseline.csv", index=False)
        pd.read_csv(tmp_path / "d/longitudinal.csv").to_csv(tmp_path / "hist.csv", index=False)
        sid = subj["id"].iloc[0]
        q = tmp_path / "q.csv"
        q.write_text(f"id,s,delta,biomarker,t\n{sid},1.0,2.0,,\n{sid},10.0,3.0,,\n")
        out = tmp_path / "o.csv"
        assert main(["predict", "--artifact", art, "--baseline", str(tmp_path / "baseline.csv"),
                     "--histories", str(tmp_path / "hist.csv"), "--queries", str(q),
                     "--out", str(out)]) == 0
        table = pd.read_csv(out)
        errs = table[table["error"].notna() & (table["error"] != "")]
        assert (errs["error"] == "HorizonBeyondTau").any()
        ok = table[(table["s"] == 1.0) & (table["type"] == "1")]
        assert len(ok) == 1 and np.isfinite(ok["probability"].iloc[0])


class TestEvaluate:
    def test_two_folds_and_determinism(self, sim_dir, tmp_path, capsys):
        args = ["evaluate", "--subjects", str(sim_dir / "data/subjects.csv"),
                "--longitudinal", str(sim_dir / "data/longitudinal.csv"),
                "--folds", "2", "--landmarks", "1,2", "--delta", "2.0",
                "--method", "cca", "--seed", "4", "--no-figures"]
        out1 = tmp_path / "r1.csv"
        assert main(args + ["--out", str(out1)]) == 0
        logs = [l for l in capsys.readouterr().out.splitlines() if l.startswith("fold ")]
        assert len(logs) == 2
        out2 = tmp_path / "r2.csv"
        assert main(args + ["--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        assert (tmp_path / "r1.json").exists()

    def test_figure_rendered_by_default(self, sim_dir, tmp_path):
        out = tmp_path / "rep.csv"
        assert main(["evaluate", "--subjects", str(sim_dir / "data/subjects.csv"),
                     "--longitudinal", str(sim_dir / "data/longitudinal.csv"),
                     "--folds", "2", "--landmarks", "1", "--delta", "2.0",
                     "--method", "cca", "--out", str(out)]) == 0
        assert (tmp_path / "rep.png").stat().st_size > 0


class TestBootstrapCmd:
    def test_small_reps_with_warning(self, sim_dir, tmp_path, capsys):
        out = tmp_path / "sd.csv"
        rc = main(["bootstrap", "--subjects", str(sim_dir / "data/subjects.csv"),
                   "--longitudinal", str(sim_dir / "data/longitudinal.csv"),
                   "--reps", "2", "--method", "cca", "--out", str(out)])
        assert rc == 0
        assert "small" in capsys.readouterr().err
        table = pd.read_csv(out)
        assert {"parameter", "bootstrap_sd"} <= set(table.columns)
        assert (table["bootstrap_sd"] >= 0).all()


class TestMcStudyCmd:
    def test_study_outputs(self, tmp_path):
        cfg = write_config(tmp_path, dict(EX_CONFIG, n=80))
        out = tmp_path / "mc.csv"
        assert main(["mc-study", "--config", cfg, "--n-datasets", "2",
                     "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert {"n", "parameter", "pct_bias_em", "rel_efficiency"} <= set(table.columns)
        assert (tmp_path / "mc_summary.json").exists()
        assert (tmp_path / "mc.png").stat().st_size > 0


class TestUsage:
    def test_unknown_command_exit_one(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag_exit_one(self):
        assert main(["simulate"]) == 1
