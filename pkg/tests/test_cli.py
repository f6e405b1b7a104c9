import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from latentbnn.bnn import load_posterior, save_posterior
from latentbnn.cli import DEFAULTS, CliError, main, merge_config, parse_grid

TINY_CONFIG = {
    "bnn": {"arch": [8], "steps": 150, "mc_samples": 5, "minibatch": 20},
    "decompose": {"M": 4, "L": 40},
    "al": {"init_n": 20, "per_round": 5, "pool_size": 20, "test_size": 30, "eval_grid": "-6:6:4"},
    "policy": {"T": 4, "M": 3, "N": 2, "arch": [5], "train_steps": 4, "reps_true": 3, "eval_starts": 2,
               "step_size": 0.01},
}


def read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY_CONFIG))
    return p


@pytest.fixture
def pipeline(tmp_path, cfg_path):
    """Toy dataset, fitted model, transitions and an MDP model, all tiny."""
    d = tmp_path / "run"
    assert run("gen", "heteroskedastic", 60, 3, d / "d.csv") == 0
    assert run("train", d / "d.csv", d / "m.json", "--config", cfg_path) == 0
    assert run("collect", 3, d / "t.csv", "--config", cfg_path, "--seed", 2) == 0
    assert run("train", d / "t.csv", d / "mdp.json", "--config", cfg_path) == 0
    return d


class TestConfig:
    def test_defaults_filled(self):
        cfg = merge_config({"bnn": {"steps": 5}})
        assert cfg["bnn"]["steps"] == 5
        assert cfg["bnn"]["arch"] == DEFAULTS["bnn"]["arch"]
        assert cfg["policy"] == DEFAULTS["policy"]

    @pytest.mark.parametrize("doc", [{"bogus": 1}, {"bnn": {"layers": 3}}, {"policy": {"beta": 1, "x": 2}}])
    def test_unknown_keys_rejected(self, doc):
        with pytest.raises(CliError, match="unknown config key"):
            merge_config(doc)

    def test_bad_config_file_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "c.json"
        bad.write_text('{"seed": 1,\n "bnn": {"nope": 2}}')
        assert run("gen", "bimodal", 5, 1, bad.parent / "d.csv", "--config", bad) == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error:") and "bnn.nope" in err and "\n" not in err

    @pytest.mark.parametrize("spec,count", [("-6:6:121", 121), ("0:1:1", 1)])
    def test_grid(self, spec, count):
        g = parse_grid(spec)
        assert g.size == count and g[0] == float(spec.split(":")[0])

    @pytest.mark.parametrize("spec", ["-6:6:0", "1:2", "a:b:c", "0:1:2:3"])
    def test_bad_grid(self, spec):
        with pytest.raises(CliError):
            parse_grid(spec)


class TestGen:
    def test_rows_and_effective_config(self, tmp_path):
        out = tmp_path / "d.csv"
        assert run("gen", "heteroskedastic", 750, 42, out) == 0
        header, rows = read_rows(out)
        assert header == ["x_0", "y_0"] and len(rows) == 750
        eff = json.loads((tmp_path / "effective_config.json").read_text())
        assert eff["command"] == "gen" and eff["config"]["seed"] == 42

    def test_out_flag_and_seed_flag(self, tmp_path):
        assert run("--seed", 42, "gen", "heteroskedastic", 10, "--out", tmp_path / "a.csv") == 0
        assert run("gen", "heteroskedastic", 10, 42, tmp_path / "b.csv") == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_same_args_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen", "bimodal", 100, 7, tmp_path / name / "d.csv") == 0
        assert (tmp_path / "a/d.csv").read_bytes() == (tmp_path / "b/d.csv").read_bytes()

    def test_floats_round_trip(self, tmp_path):
        out = tmp_path / "d.csv"
        run("gen", "heteroskedastic", 30, 1, out)
        text = out.read_text()
        vals = np.loadtxt(out, delimiter=",", skiprows=1)
        assert all(repr(float(v)) in text for v in vals.ravel())
        assert "\r" not in text

    @pytest.mark.parametrize("argv", [("gen", "heteroskedastic", 0, 1), ("gen", "nope", 5, 1)])
    def test_rejected(self, tmp_path, capsys, argv):
        assert run(*argv, tmp_path / "d.csv") == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and err.count("\n") == 1
        assert not (tmp_path / "d.csv").exists()


class TestTrainScore:
    def test_model_round_trip_and_trace(self, pipeline, tmp_path):
        m = pipeline / "m.json"
        save_posterior(load_posterior(m), tmp_path / "again.json")
        assert m.read_bytes() == (tmp_path / "again.json").read_bytes()
        _, rows = read_rows(pipeline / "m_energy.csv")
        energy = [float(r[1]) for r in rows]
        assert len(energy) == TINY_CONFIG["bnn"]["steps"]
        assert energy[-1] < energy[0]

    def test_malformed_row_named(self, tmp_path, cfg_path, capsys):
        data = tmp_path / "d.csv"
        data.write_text("x_0,y_0\n1.0,2.0\n3.0,oops\n")
        assert run("train", data, tmp_path / "m.json", "--config", cfg_path) == 1
        assert "row 3" in capsys.readouterr().err

    def test_short_row_named(self, tmp_path, cfg_path, capsys):
        data = tmp_path / "d.csv"
        data.write_text("x_0,y_0\n1.0,2.0\n0.5,1.0\n3.0\n")
        assert run("train", data, tmp_path / "m.json", "--config", cfg_path) == 1
        assert "row 4" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        assert run("train", tmp_path / "none.csv", tmp_path / "m.json") == 1
        assert "no such file" in capsys.readouterr().err

    def test_score_schema_and_identity(self, pipeline, cfg_path):
        out = pipeline / "s.csv"
        assert run("score", pipeline / "m.json", "-6:6:121", out, "--config", cfg_path) == 0
        header, rows = read_rows(out)
        assert header == ["x_0", "total_entropy", "aleatoric_entropy", "epistemic_score"]
        assert len(rows) == 121
        for r in rows:
            assert float(r[3]) == float(r[1]) - float(r[2])

    def test_score_empty_grid(self, pipeline, capsys):
        assert run("score", pipeline / "m.json", "-6:6:0", pipeline / "s.csv") == 1
        assert "empty" in capsys.readouterr().err


class TestActiveLearning:
    def test_zero_rounds_single_row(self, tmp_path, cfg_path):
        out = tmp_path / "al.csv"
        assert run("al", "heteroskedastic", 0, out, "--config", cfg_path) == 0
        header, rows = read_rows(out)
        assert header == ["round", "strategy", "n", "test_loglik", "mean_epistemic"]
        assert len(rows) == 1 and rows[0][2] == "20"

    def test_strategies_share_schema(self, tmp_path, cfg_path):
        for strategy in ("epistemic", "random"):
            assert run("al", "bimodal", 1, tmp_path / f"{strategy}.csv", "--strategy", strategy,
                       "--config", cfg_path) == 0
        ha, ra = read_rows(tmp_path / "epistemic.csv")
        hb, rb = read_rows(tmp_path / "random.csv")
        assert ha == hb and len(ra) == len(rb) == 2
        assert [r[2] for r in ra] == ["20", "25"]


class TestPolicyCommands:
    def test_collect_rows(self, pipeline, cfg_path):
        header, rows = read_rows(pipeline / "t.csv")
        assert header == ["s_0", "a_0", "sp_0"]
        assert len(rows) == 3 * TINY_CONFIG["policy"]["T"]

    def test_bias_beta_zero_equals_none(self, pipeline, cfg_path):
        common = [pipeline / "mdp.json", pipeline / "t.csv"]
        assert run("policy-train", *common, pipeline / "a" / "p.json", "--risk-mode", "bias", "--beta", 0,
                   "--config", cfg_path) == 0
        assert run("policy-train", *common, pipeline / "b" / "p.json", "--risk-mode", "none",
                   "--config", cfg_path) == 0
        assert (pipeline / "a/p.json").read_bytes() == (pipeline / "b/p.json").read_bytes()
        _, rows = read_rows(pipeline / "a" / "p_objective.csv")
        assert len(rows) == TINY_CONFIG["policy"]["train_steps"]

    def test_policy_eval(self, pipeline, cfg_path):
        p = pipeline / "p.json"
        assert run("policy-train", pipeline / "mdp.json", pipeline / "t.csv", p, "--config", cfg_path) == 0
        out = pipeline / "eval.csv"
        assert run("policy-eval", p, pipeline / "mdp.json", out, "--config", cfg_path) == 0
        header, rows = read_rows(out)
        assert header == ["expected_model_cost", "expected_true_cost", "model_bias"] and len(rows) == 1
        _, steps = read_rows(pipeline / "eval_per_step.csv")
        assert len(steps) == TINY_CONFIG["policy"]["T"]
        assert float(rows[0][2]) == pytest.approx(sum(float(r[1]) for r in steps), rel=1e-12)

    def test_policy_train_needs_transitions(self, pipeline, cfg_path, capsys):
        assert run("policy-train", pipeline / "mdp.json", pipeline / "d.csv", pipeline / "p.json",
                   "--config", cfg_path) == 1
        assert "transitions" in capsys.readouterr().err

    def test_frontier_cardinality(self, pipeline, cfg_path):
        out = pipeline / "f.csv"
        assert run("frontier", pipeline / "mdp.json", pipeline / "t.csv", out, "--betas", "0,0.5,1,2,5",
                   "--seeds", "1,2,3", "--config", cfg_path) == 0
        header, rows = read_rows(out)
        assert header == ["beta", "seed", "expected_model_cost", "expected_true_cost", "model_bias"]
        assert len(rows) == 15


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "latentbnn.cli", "gen", "bimodal", "-3", "1",
                           str(tmp_path / "d.csv")], capture_output=True, text=True)
    assert proc.returncode != 0
    assert proc.stderr.startswith("error:") and proc.stderr.count("\n") == 1
