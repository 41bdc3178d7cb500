import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from fedssm import cli
from fedssm.config import AlgorithmKind, ConfigError, RunConfig, SweepSpec
from fedssm.sparsification import encode_update, serialize_update, topk_mask

GOLDEN = Path(__file__).parent / "golden"

DESK = """\
clients = 4
iid = true
hidden = 8
synthetic_n = 300
synthetic_n_test = 100
local_epochs = 3
rounds = 6
alpha = 0.1
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults(self):
        c = RunConfig()
        assert (c.clients, c.beta1, c.beta2, c.eps, c.local_epochs, c.alpha, c.eta, c.theta) == \
            (20, 0.9, 0.999, 1e-6, 30, 0.05, 0.001, 0.1)

    @pytest.mark.parametrize("text", [
        "",
        DESK,
        "algorithm = fedadam_top\nclip = 1.5\nhidden = 16, 8\nk = 3\nalpha = none\nrho = 2.0\n",
        "variant = fairness_top\neps = 1e-08\niid = yes\nseparation = 2.5\n",
    ])
    def test_round_trip_idempotent(self, text):
        once = RunConfig.from_text(text).to_text()
        assert RunConfig.from_text(once).to_text() == once
        assert RunConfig.from_text(once) == RunConfig.from_text(text)

    def test_comments_and_blank_lines(self):
        assert RunConfig.from_text("# hello\n\n  rounds = 3\n").rounds == 3

    def test_unknown_and_duplicate_keys(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig.from_text("rounds = 3\nrounds = 4\nbogus = 1\nno equals sign\n")
        text = str(exc.value)
        assert "duplicate key 'rounds'" in text and "unknown key 'bogus'" in text and "expected 'key = value'" in text

    def test_alpha_zero(self):
        with pytest.raises(ConfigError, match="k must be >= 1"):
            RunConfig.from_text("alpha = 0\n")

    def test_every_problem_listed(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig.from_text("beta1 = 1.0\neps = 0\nclients = 0\nq = 0\n")
        assert len(exc.value.problems) == 4

    def test_bad_values(self):
        for text in ("iid = maybe\n", "rounds = 2.5\n", "algorithm = adamw\n"):
            with pytest.raises(ConfigError):
                RunConfig.from_text(text)

    def test_one_dataset_source(self):
        with pytest.raises(ConfigError, match="exactly one"):
            RunConfig.from_text("train_images = a.idx\n")
        with pytest.raises(ConfigError):
            RunConfig.from_text("dataset = idx\n")

    def test_digest_tracks_content(self):
        assert RunConfig().digest() == RunConfig().digest()
        assert RunConfig().digest() != RunConfig(seed=1).digest()


class TestSweepSpec:
    def test_grid(self):
        spec = SweepSpec.from_text(DESK + "sweep.alpha = 0.05, 0.2, 1.0\n")
        assert spec.size == 3
        assert [p[0]["alpha"] for p in spec.points()] == [0.05, 0.2, 1.0]

    def test_product(self):
        spec = SweepSpec.from_text("sweep.seed = 1,2,3,4,5\nsweep.alpha = 0.05, 1.0\n")
        pts = spec.points()
        assert len(pts) == 10
        assert pts[1][0] == {"seed": 1, "alpha": 1.0}

    def test_cap(self):
        with pytest.raises(ConfigError, match="cap"):
            SweepSpec.from_text("sweep_cap = 4\nsweep.seed = 1,2,3\nsweep.alpha = 0.1,0.2\n")

    def test_bad_axes(self):
        with pytest.raises(ConfigError):
            SweepSpec.from_text("sweep.nothing = 1,2\n")
        with pytest.raises(ConfigError):
            SweepSpec.from_text("sweep.seed = 1\nsweep.seed = 2\n")

    def test_hidden_axis_uses_semicolons(self):
        spec = SweepSpec.from_text("sweep.hidden = 8; 16,8\n")
        assert [p[0]["hidden"] for p in spec.points()] == [(8,), (16, 8)]


class TestSerialization:
    def test_model_golden_bytes(self):
        blob = cli.serialize_params(np.array([1.0, -2.0]))
        assert blob == bytes.fromhex("0200000000000000" "000000000000f03f" "00000000000000c0")
        np.testing.assert_array_equal(cli.deserialize_params(blob), [1.0, -2.0])

    def test_model_bad_length(self):
        with pytest.raises(ValueError):
            cli.deserialize_params(bytes.fromhex("0300000000000000") + bytes(16))

    def test_tie_rule_golden_bytes(self):
        x = np.array([1.0, -1.0, 1.0, 0.5, -1.0])
        u = encode_update(x, x, x, topk_mask(x, 2))
        assert serialize_update(u, "mask").hex() == (GOLDEN / "tie_update.hex").read_text().strip()

    def test_format_value(self):
        assert [cli.format_value(v) for v in (True, math.nan, math.inf, 0.1, 3)] == ["true", "nan", "inf", "0.1", "3"]
        assert cli.jsonable({"a": math.inf, "b": [math.nan, np.float64(2.0)]}) == {"a": "inf", "b": [None, 2.0]}


class TestRun:
    def test_run_writes_artifacts(self, tmp_path):
        cfg = write(tmp_path, "desk.cfg", DESK)
        assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
        out = tmp_path / "r"
        for name in ("metrics.csv", "metrics.jsonl", "manifest.json", "model.bin", "config.txt"):
            assert (out / name).exists()
        m = rows(out / "metrics.csv")
        assert len(m) == 6 and [r["t"] for r in m] == ["1", "2", "3", "4", "5", "6"]
        assert len((out / "metrics.jsonl").read_text().splitlines()) == 6
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_sha256"] == RunConfig.load(out / "config.txt").digest()
        assert manifest["config_sha256"] == RunConfig.from_text(DESK).digest()
        assert manifest["code_version"] == "0.1.0" and manifest["seed"] == 0
        params = cli.deserialize_params((out / "model.bin").read_bytes())
        assert params.size == manifest["d"] == 42

    def test_rerun_identical_bytes_any_worker_count(self, tmp_path):
        cfg = write(tmp_path, "desk.cfg", DESK)
        outs = []
        for i, workers in enumerate(("1", "1", "4")):
            d = tmp_path / f"r{i}"
            assert cli.main(["run", "--config", cfg, "--out", str(d), "--workers", workers]) == 0
            outs.append((d / "metrics.csv").read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_seed_override(self, tmp_path):
        cfg = write(tmp_path, "desk.cfg", DESK)
        cli.main(["run", "--config", cfg, "--out", str(tmp_path / "a"), "--seed-override", "5"])
        assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 5

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        cfg = write(tmp_path, "bad.cfg", "alpha = 0\n")
        assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
        assert "k must be >= 1" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_golden_metrics(self, tmp_path):
        assert cli.main(["run", "--config", str(GOLDEN / "tiny.cfg"), "--out", str(tmp_path / "g")]) == 0
        assert (tmp_path / "g" / "metrics.csv").read_text() == (GOLDEN / "tiny_metrics.csv").read_text()


class TestSweep:
    def test_three_points(self, tmp_path):
        spec = write(tmp_path, "s.cfg", DESK.replace("rounds = 6", "rounds = 2") + "sweep.alpha = 0.05, 0.2, 1.0\n")
        assert cli.main(["sweep", "--config", spec, "--out", str(tmp_path / "s"), "--workers", "3"]) == 0
        summary = rows(tmp_path / "s" / "summary.csv")
        assert len(summary) == 3 and [r["alpha"] for r in summary] == ["0.05", "0.2", "1.0"]
        assert all(r["status"] == "ok" for r in summary)
        for r in summary:
            res = rows(tmp_path / "s" / r["point"] / "metrics.csv")
            assert int(r["cum_bits"]) == int(res[-1]["uplink_bits_cum"])
            assert float(r["final_test_acc"]) == float(res[-1]["test_acc"])

    def test_counting(self, tmp_path):
        text = DESK.replace("rounds = 6", "rounds = 1") + "sweep.seed = 1,2,3,4,5\nsweep.alpha = 0.05, 1.0\n"
        assert cli.main(["sweep", "--config", write(tmp_path, "s.cfg", text), "--out", str(tmp_path / "s")]) == 0
        assert len(rows(tmp_path / "s" / "summary.csv")) == 10
        assert len(list((tmp_path / "s").glob("point_*"))) == 10

    def test_inf_sentinel(self, tmp_path):
        text = DESK.replace("rounds = 6", "rounds = 1") + "target_accuracy = 1.0\nsweep.seed = 1\n"
        cli.main(["sweep", "--config", write(tmp_path, "s.cfg", text), "--out", str(tmp_path / "s")])
        r = rows(tmp_path / "s" / "summary.csv")[0]
        assert r["rounds_to_target"] == "inf" and r["bits_to_target"] == "inf"

    def test_partial_failure_recorded(self, tmp_path):
        text = DESK.replace("rounds = 6", "rounds = 1") + "sweep.clients = 2, 100000, 0\n"
        code = cli.main(["sweep", "--config", write(tmp_path, "s.cfg", text), "--out", str(tmp_path / "s")])
        assert code == 1
        status = [r["status"] for r in rows(tmp_path / "s" / "summary.csv")]
        assert status == ["ok", "failed", "invalid"]


class TestVerify:
    def test_fresh_checkout_passes(self, capsys):
        code = cli.main(["verify"])
        out = capsys.readouterr().out
        assert len(out.strip().splitlines()) == 7
        assert code == 0, out

    def test_without_clipping(self, tmp_path, capsys):
        cfg = write(tmp_path, "c.cfg", DESK + "clip = inf\n")
        cli.main(["verify", "--config", cfg])
        out = capsys.readouterr().out
        assert "SKIP lemma1_monitor: premise unmet: clipping disabled" in out
        assert "PASS gradient_finite_difference" in out


class TestAnalyze:
    def test_report(self, tmp_path):
        text = DESK + "clip = 1.0\neps = 0.1\nprobe_deviation = true\nprobe_gradnorm = true\nhistogram_round = 3\n"
        cli.main(["run", "--config", write(tmp_path, "c.cfg", text), "--out", str(tmp_path / "run7")])
        assert cli.main(["analyze", "--out", str(tmp_path / "run7")]) == 0
        doc = json.loads((tmp_path / "run7" / "analysis.json").read_text())
        rep = doc["run7"]
        assert rep["summary"]["config_hash_matches"] and rep["summary"]["rows_match_rounds"]
        assert rep["bit_accounting"]["matches"]
        assert rep["lemma1"]["total"] == 0
        assert rep["deviation_bound"]["violations"] == 0
        assert rep["prop1"]["status"] == "evaluated"
        assert len(rep["gradnorm"]["series"]) == 6
        assert (tmp_path / "run7" / "histogram.csv").read_text().startswith("bin_left,bin_right,count_W,count_M,count_V")

    def test_unclipped_run(self, tmp_path):
        cli.main(["run", "--config", write(tmp_path, "c.cfg", DESK), "--out", str(tmp_path / "r")])
        cli.main(["analyze", "--out", str(tmp_path / "r")])
        rep = json.loads((tmp_path / "r" / "analysis.json").read_text())["r"]
        assert rep["lemma1"]["status"] == "premise unmet: clipping disabled"
        assert "deviation_bound" not in rep and "histogram" not in rep

    def test_missing_directory(self, tmp_path):
        assert cli.main(["analyze", "--out", str(tmp_path / "nope")]) == 1
