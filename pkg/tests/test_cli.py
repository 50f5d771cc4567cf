import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from dpm_covlab import cli
from dpm_covlab.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY, main

BASE = {
    "seed": 3,
    "out": "run",
    "spec": {"weights": [0.5, 0.5], "means": [[-2.0], [2.0]], "var": 0.1},
    "schedule": {"kind": "linear", "N": 30},
    "process": "ddpm",
    "train": {"iterations": 100, "batch": 32, "h": 16, "e": 8, "head_hidden": 8},
    "eval": {"models": ["oracle:sn", "oracle:iso"], "K": [2, 5, 10, 30], "M": 300, "iso_M": 500},
}


def write_cfg(tmp_path, **overrides):
    cfg = json.loads(json.dumps(BASE))
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = write_cfg(tmp)
    assert main(["train", "--config", cfg]) == EXIT_OK
    return tmp, cfg


class TestTrain:
    def test_outputs(self, trained):
        tmp, _ = trained
        for name in ("eps", "sn", "npr"):
            assert (tmp / "run" / f"{name}.ckpt.json").exists()
            rows = read_csv(tmp / "run" / f"loss_{name}.csv")
            assert len(rows) == 100
            assert list(rows[0]) == ["iteration", "loss"]
        assert json.loads((tmp / "run" / "train.json").read_text())["seed"] == 3

    def test_resume_keeps_stage_one(self, trained, tmp_path):
        tmp, _ = trained
        cfg = write_cfg(tmp_path)
        assert main(["train", "--config", cfg, "--resume", str(tmp / "run" / "eps.ckpt.json")]) == EXIT_OK
        eps = json.loads((tmp / "run" / "eps.ckpt.json").read_text())["params"]
        for name in ("sn", "npr"):
            new = json.loads((tmp_path / "run" / f"{name}.ckpt.json").read_text())["params"]
            for key in ("W0", "b0", "W1", "b1", "W2", "b2", "HeW", "Heb"):
                assert json.dumps(new[key]) == json.dumps(eps[key])
        assert not (tmp_path / "run" / "loss_eps.csv").exists()

    def test_invalid_spec_rejected(self, tmp_path):
        cfg = write_cfg(tmp_path, spec={"weights": [0.5, 0.6], "means": [[0.0], [1.0]], "var": 1.0})
        assert main(["train", "--config", cfg]) == EXIT_CONFIG
        assert not (tmp_path / "run").exists()

    def test_config_errors_name_the_line(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, schedule={"kind": "linear", "N": 5})
        assert main(["train", "--config", cfg]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "cfg.json:" in err and "schedule" in err


class TestEvalElbo:
    def test_table_properties(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert main(["eval-elbo", "--config", cfg]) == EXIT_OK
        rows = read_csv(tmp_path / "run" / "elbo.csv")
        assert len(rows) == 2 * 4 * 2
        by = {(r["model"], int(r["K"]), r["trajectory"]): (float(r["value"]), float(r["stderr"])) for r in rows}
        for model in ("oracle:sn", "oracle:iso"):
            for K in (2, 5, 10, 30):
                assert by[(model, K, "OT")][0] <= by[(model, K, "ET")][0]
            ot = [by[(model, K, "OT")] for K in (2, 5, 10, 30)]
            for (a, sa), (b, sb) in zip(ot, ot[1:]):
                assert b <= a + 3 * np.hypot(sa, sb)

    def test_bit_reproducible(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert main(["eval-elbo", "--config", cfg, "--K", "3", "--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(["eval-elbo", "--config", cfg, "--K", "3", "--out", str(tmp_path / "b")]) == EXIT_OK
        assert (tmp_path / "a" / "elbo.csv").read_bytes() == (tmp_path / "b" / "elbo.csv").read_bytes()

    @pytest.mark.parametrize("mode", ["reduced", "direct"])
    def test_other_modes(self, tmp_path, mode):
        cfg = write_cfg(tmp_path)
        assert main(["eval-elbo", "--config", cfg, "--mode", mode, "--K", "5", "--trajectory", "even"]) == EXIT_OK
        rows = read_csv(tmp_path / "run" / "elbo.csv")
        assert {r["mode"] for r in rows} == {mode}

    def test_net_models_use_trained_checkpoints(self, trained):
        tmp, cfg = trained
        out = tmp / "net_eval"
        assert main(["eval-elbo", "--config", cfg, "--models", "net:npr,netmean:sn", "--K", "5",
                     "--trajectory", "even", "--out", str(out)]) == EXIT_OK
        assert len(read_csv(out / "elbo.csv")) == 2

    def test_ddim_rejected(self, tmp_path):
        cfg = write_cfg(tmp_path, process="ddim")
        assert main(["eval-elbo", "--config", cfg]) == EXIT_CONFIG

    @pytest.mark.parametrize("extra", [["--models", "oracle:bogus"], ["--K", "31"], ["--mode", "fast"],
                                       ["--trajectory", "random"]])
    def test_bad_requests(self, tmp_path, extra):
        assert main(["eval-elbo", "--config", write_cfg(tmp_path)] + extra) == EXIT_CONFIG

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval-elbo", "--config", write_cfg(tmp_path), "--models", "net:sn"]) == EXIT_CONFIG


class TestSample:
    def test_writes_samples_and_metrics(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert main(["sample", "--config", cfg, "--model", "oracle:npr", "--K", "10", "--batch", "2000"]) == EXIT_OK
        x = np.loadtxt(tmp_path / "run" / "samples.csv", delimiter=",", skiprows=1)
        assert x.shape == (2000,)
        meta = json.loads((tmp_path / "run" / "samples.meta.json").read_text())
        assert meta["seed"] == 3 and meta["K"] == 10
        metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
        assert metrics["batch"] == 2000

    def test_continuous_needs_vp(self, tmp_path):
        cfg = write_cfg(tmp_path, sample={"sampler": "continuous"})
        assert main(["sample", "--config", cfg, "--batch", "10"]) == EXIT_CONFIG

    def test_continuous_on_vp(self, tmp_path):
        cfg = write_cfg(tmp_path, schedule={"kind": "vp", "N": 50}, sample={"sampler": "continuous"})
        assert main(["sample", "--config", cfg, "--batch", "100", "--format", "json"]) == EXIT_OK
        assert len(json.loads((tmp_path / "run" / "samples.json").read_text())["samples"]) == 100


class TestTrajectoryCommand:
    def test_outputs(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert main(["trajectory", "--config", cfg, "--K", "3,6", "--M", "200"]) == EXIT_OK
        doc = json.loads((tmp_path / "run" / "trajectories.json").read_text())
        for item in doc["trajectories"]:
            assert item["nelbo_OT"] <= item["nelbo_ET"]
            assert json.loads((tmp_path / "run" / f"trajectory_K{item['K']}.json").read_text()) == item["tau"]
        assert (tmp_path / "run" / "cost_matrix.csv").exists()


class TestVerify:
    def test_default_passes(self, capsys):
        assert main(["verify"]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["passed"] is True
        assert all("margin" in c for c in report["checks"])

    def test_fault_fails(self, capsys):
        assert main(["verify", "--fault", "gamma_sign"]) == EXIT_VERIFY
        report = json.loads(capsys.readouterr().out)
        failed = {c["name"] for c in report["checks"] if not c["passed"]}
        assert any("variance" in name for name in failed)


class TestPlotData:
    def make(self, d, name, rows):
        with open(d / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["model", "mode", "K", "value", "stderr", "trajectory"])
            w.writeheader()
            for r in rows:
                w.writerow(r)

    def row(self, model, K, value):
        return {"model": model, "mode": "reduced", "K": K, "value": value, "stderr": 0.1, "trajectory": "ET"}

    def test_union_of_files(self, tmp_path):
        self.make(tmp_path, "a.csv", [self.row("m1", 2, 1.0)])
        self.make(tmp_path, "b.csv", [self.row("m2", 2, 2.0), self.row("m2", 5, 1.5)])
        assert main(["plot-data", str(tmp_path), "--seed", "0"]) == EXIT_OK
        rows = read_csv(tmp_path / "plot_data.csv")
        assert len(rows) == 3
        assert list(tmp_path.glob("*.png"))

    def test_duplicate_last_write_wins(self, tmp_path, capsys):
        self.make(tmp_path, "a.csv", [self.row("m1", 2, 1.0)])
        self.make(tmp_path, "b.csv", [self.row("m1", 2, 7.0)])
        assert main(["plot-data", str(tmp_path)]) == EXIT_OK
        assert float(read_csv(tmp_path / "plot_data.csv")[0]["value"]) == 7.0
        assert "duplicate series m1/reduced/ET" in capsys.readouterr().err

    def test_empty_directory(self, tmp_path):
        assert main(["plot-data", str(tmp_path)]) == EXIT_CONFIG


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert main(["sample", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    def test_missing_seed(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{}")
        assert main(["sample", "--config", str(path)]) == EXIT_CONFIG

    def test_runtime_fault(self, tmp_path, monkeypatch):
        def boom(cfg, args):
            raise FloatingPointError("overflow")
        monkeypatch.setitem(cli.COMMANDS, "sample", boom)
        assert main(["sample", "--config", write_cfg(tmp_path)]) == EXIT_RUNTIME

    @pytest.mark.skipif(shutil.which("dpm-covlab") is None, reason="console script not installed")
    def test_console_script(self):
        res = subprocess.run(["dpm-covlab", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        assert "eval-elbo" in res.stdout
