"""End-to-end tests of the command-line interface and its exit-code contract."""

import json

import numpy as np
import pytest

from essd.cli import main

TOY = ["--input-size", "48", "--base-channels", "16"]


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestAnalyze:
    def test_canonical_ssd_depths(self, capsys):
        code, out, _ = run_cli(capsys, "analyze", "--model", "ssd", "--profile", "canonical300")
        assert code == 0
        doc = json.loads(out)
        assert [s["depth"] for s in doc["sources"]] == [10, 15, 17, 19, 21, 23]
        assert doc["cv_percent"] == 24.19

    def test_canonical_essd_sum_depths(self, capsys):
        code, out, _ = run_cli(capsys, "analyze", "--model", "ESSD-sum", "--profile", "canonical300")
        assert code == 0
        doc = json.loads(out)
        assert [s["depth_rational"] for s in doc["sources"]] == ["29/2", "18", "20", "19", "21", "23"]
        assert doc["cv_percent"] == 13.72

    def test_toy_analyze_runs(self, capsys):
        code, out, _ = run_cli(capsys, "analyze", "--model", "essd", *TOY)
        assert code == 0
        assert json.loads(out)["cv_percent"] > 0

    def test_malformed_descriptor_exits_2(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code, _, err = run_cli(capsys, "analyze", "--descriptor", str(bad))
        assert code == 2
        assert "JSON" in err

    def test_missing_descriptor_exits_3(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "analyze", "--descriptor", str(tmp_path / "nope.json"))
        assert code == 3
        assert "nope.json" in err

    def test_invalid_descriptor_graph_exits_4(self, capsys, tmp_path):
        doc = {
            "layers": [
                {"name": "data", "kind": "data", "inputs": [], "params": {"channels": 3, "size": 48}},
                {"name": "a", "kind": "relu", "inputs": ["ghost"], "params": {}},
            ],
            "prediction_sources": ["a"],
        }
        p = tmp_path / "invalid.json"
        p.write_text(json.dumps(doc))
        code, _, err = run_cli(capsys, "analyze", "--descriptor", str(p))
        assert code == 4
        assert "ghost" in err

    def test_figure_written_next_to_out(self, capsys, tmp_path):
        out = tmp_path / "depth.json"
        code, _, _ = run_cli(capsys, "analyze", "--model", "ssd", "--profile", "canonical300", "--out", str(out))
        assert code == 0
        assert out.exists()
        assert (tmp_path / "depth.depth.png").exists()

    def test_no_figures_flag(self, capsys, tmp_path):
        out = tmp_path / "depth.json"
        code, _, _ = run_cli(
            capsys, "analyze", "--model", "ssd", "--profile", "canonical300", "--out", str(out), "--no-figures"
        )
        assert code == 0
        assert not (tmp_path / "depth.depth.png").exists()


class TestBuild:
    def test_descriptor_round_trips_through_analyze(self, capsys, tmp_path):
        desc = tmp_path / "toy.json"
        code, _, _ = run_cli(capsys, "build", "--model", "ESSD-less", *TOY, "--out", str(desc))
        assert code == 0
        code, out, _ = run_cli(capsys, "analyze", "--descriptor", str(desc))
        assert code == 0
        assert len(json.loads(out)["sources"]) == 4

    def test_canonical_build_rejected(self, capsys):
        code, _, err = run_cli(capsys, "build", "--model", "ssd", "--profile", "canonical300")
        assert code == 2
        assert "toy" in err


class TestVariantNames:
    def test_named_variant_conflicts_with_fusion_flag(self, capsys):
        code, _, err = run_cli(capsys, "analyze", "--model", "ESSD-sum", "--fusion", "prod", *TOY)
        assert code == 2
        assert "fixes" in err

    def test_ssd_rejects_fusion(self, capsys):
        code, _, err = run_cli(capsys, "analyze", "--model", "ssd", "--fusion", "prod", *TOY)
        assert code == 2

    def test_essd_less_equals_explicit_flags(self, capsys):
        _, out_a, _ = run_cli(capsys, "analyze", "--model", "ESSD-less", *TOY)
        _, out_b, _ = run_cli(
            capsys, "analyze", "--model", "essd", "--fusion", "sum", "--no-extra-pred-conv", *TOY
        )
        assert json.loads(out_a) == json.loads(out_b)


class TestTrainEvalDetect:
    def train_args(self, out, seed="0", scale="30000"):
        # scale 30000 shrinks every segment to one or two iterations
        return [
            "train", "--model", "ESSD-sum", *TOY, "--all-phases",
            "--scale", scale, "--seed", seed, "--batch-size", "4", "--n", "4",
            "--out", str(out), "--no-figures",
        ]

    def test_train_writes_weights_log_and_is_deterministic(self, capsys, tmp_path):
        a, b = tmp_path / "a.eswt", tmp_path / "b.eswt"
        assert run_cli(capsys, *self.train_args(a))[0] == 0
        assert run_cli(capsys, *self.train_args(b))[0] == 0
        assert a.read_bytes() == b.read_bytes()
        log_a = (tmp_path / "a.log.jsonl").read_text()
        log_b = (tmp_path / "b.log.jsonl").read_text()
        assert log_a == log_b
        records = [json.loads(l) for l in log_a.splitlines()]
        assert {r["phase"] for r in records} == {1, 2, 3}

    def test_seed_changes_weights(self, capsys, tmp_path):
        a, b = tmp_path / "a.eswt", tmp_path / "b.eswt"
        run_cli(capsys, *self.train_args(a, seed="0"))
        run_cli(capsys, *self.train_args(b, seed="1"))
        assert a.read_bytes() != b.read_bytes()

    def test_phase2_without_init_weights_exits_3(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "train", "--model", "ESSD-sum", *TOY, "--phase", "2",
            "--out", str(tmp_path / "w.eswt"), "--no-figures",
        )
        assert code == 3
        assert "phase 1" in err and "--init-weights" in err

    def test_phase2_with_missing_file_exits_3(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "train", "--model", "ESSD-sum", *TOY, "--phase", "2",
            "--init-weights", str(tmp_path / "ghost.eswt"),
            "--out", str(tmp_path / "w.eswt"), "--no-figures",
        )
        assert code == 3
        assert "ghost.eswt" in err

    def test_phased_invocations_match_all_phases(self, capsys, tmp_path):
        full = tmp_path / "full.eswt"
        run_cli(capsys, *self.train_args(full))
        p1, p2, p3 = (tmp_path / f"p{i}.eswt" for i in (1, 2, 3))
        base = ["train", "--model", "ESSD-sum", *TOY, "--scale", "30000",
                "--seed", "0", "--batch-size", "4", "--n", "4", "--no-figures"]
        assert run_cli(capsys, *base, "--phase", "1", "--out", str(p1))[0] == 0
        assert run_cli(capsys, *base, "--phase", "2", "--init-weights", str(p1), "--out", str(p2))[0] == 0
        assert run_cli(capsys, *base, "--phase", "3", "--init-weights", str(p2), "--out", str(p3))[0] == 0
        assert p3.read_bytes() == full.read_bytes()

    def test_ssd_variant_single_phase(self, capsys, tmp_path):
        out = tmp_path / "ssd.eswt"
        code, _, _ = run_cli(
            capsys, "train", "--model", "ssd", *TOY, "--all-phases", "--scale", "30000",
            "--seed", "0", "--batch-size", "4", "--n", "4", "--out", str(out), "--no-figures",
        )
        assert code == 0
        records = [json.loads(l) for l in (tmp_path / "ssd.log.jsonl").read_text().splitlines()]
        assert {r["phase"] for r in records} == {1}
        code, _, err = run_cli(
            capsys, "train", "--model", "ssd", *TOY, "--phase", "2",
            "--out", str(out), "--no-figures",
        )
        assert code == 2

    def test_eval_and_detect_and_bench_pipeline(self, capsys, tmp_path):
        w = tmp_path / "w.eswt"
        run_cli(capsys, *self.train_args(w))
        ev = tmp_path / "eval.json"
        code, _, _ = run_cli(
            capsys, "eval", "--model", "ESSD-sum", *TOY, "--init-weights", str(w),
            "--n", "4", "--out", str(ev),
        )
        assert code == 0
        doc = json.loads(ev.read_text())
        assert 0.0 <= doc["mean_ap"] <= 1.0
        assert (tmp_path / "eval.ap.png").exists()

        code, out, _ = run_cli(
            capsys, "detect", "--model", "ESSD-sum", *TOY, "--init-weights", str(w),
            "--n", "2", "--score-thresh", "0.05",
        )
        assert code == 0
        lines = [json.loads(l) for l in out.splitlines()]
        assert len(lines) == 2
        for rec in lines:
            assert set(rec) == {"image", "detections"}
            for d in rec["detections"]:
                assert set(d) == {"class_id", "score", "box", "class"}
                assert d["score"] > 0.05

        bn = tmp_path / "bench.json"
        code, _, _ = run_cli(
            capsys, "bench", "--model", "ESSD-sum", *TOY, "--init-weights", str(w),
            "--n", "3", "--warmup", "1", "--out", str(bn),
        )
        assert code == 0
        doc = json.loads(bn.read_text())
        assert doc["batch_size"] == 1
        assert doc["input_resolution"] == 48
        assert doc["fps"] > 0
        assert (tmp_path / "bench.latency.png").exists()

    def test_eval_requires_weights(self, capsys):
        code, _, err = run_cli(capsys, "eval", "--model", "ESSD-sum", *TOY)
        assert code == 2
        assert "--init-weights" in err

    def test_eval_missing_weight_file_exits_3(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "eval", "--model", "ESSD-sum", *TOY, "--init-weights", str(tmp_path / "none.eswt")
        )
        assert code == 3
        assert "none.eswt" in err

    def test_wrong_model_for_weights_exits_4(self, capsys, tmp_path):
        w = tmp_path / "w.eswt"
        run_cli(capsys, *self.train_args(w))
        code, _, err = run_cli(
            capsys, "eval", "--model", "ssd", *TOY, "--init-weights", str(w), "--n", "2"
        )
        assert code == 4
        assert "does not match" in err

    def test_detect_on_npy_file(self, capsys, tmp_path):
        w = tmp_path / "w.eswt"
        run_cli(capsys, *self.train_args(w))
        img = tmp_path / "img.npy"
        rng = np.random.default_rng(0)
        np.save(img, rng.uniform(0, 1, size=(3, 48, 48)).astype(np.float32))
        code, out, _ = run_cli(
            capsys, "detect", "--model", "ESSD-sum", *TOY, "--init-weights", str(w),
            "--score-thresh", "0.01", str(img),
        )
        assert code == 0
        rec = json.loads(out.splitlines()[0])
        assert rec["image"].endswith("img.npy")

    def test_detect_rejects_wrong_shape(self, capsys, tmp_path):
        w = tmp_path / "w.eswt"
        run_cli(capsys, *self.train_args(w))
        img = tmp_path / "img.npy"
        np.save(img, np.zeros((3, 32, 32), dtype=np.float32))
        code, _, err = run_cli(
            capsys, "detect", "--model", "ESSD-sum", *TOY, "--init-weights", str(w), str(img)
        )
        assert code == 4
        assert "shape" in err

    def test_canonical_profile_rejected_for_train(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "train", "--model", "ESSD-sum", "--profile", "canonical300",
            "--all-phases", "--out", str(tmp_path / "w.eswt"),
        )
        assert code == 2
        assert "toy" in err


class TestConfigFile:
    def test_config_supplies_defaults_flags_win(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": "ssd", "profile": "canonical300"}))
        code, out, _ = run_cli(capsys, "analyze", "--config", str(cfg))
        assert code == 0
        assert json.loads(out)["cv_percent"] == 24.19
        # explicit flag beats the config value
        code, out, _ = run_cli(capsys, "analyze", "--config", str(cfg), "--model", "ESSD-sum")
        assert json.loads(out)["cv_percent"] == 13.72

    def test_malformed_config_exits_2(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2")
        code, _, err = run_cli(capsys, "analyze", "--config", str(cfg))
        assert code == 2

    def test_unknown_config_key_exits_2(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"learning_rate": 1}))
        code, _, err = run_cli(capsys, "analyze", "--config", str(cfg))
        assert code == 2
        assert "learning_rate" in err


class TestGradcheck:
    def test_table_and_exit_code(self, capsys):
        code, out, _ = run_cli(capsys, "gradcheck", "--n", "1")
        assert code == 0
        lines = out.splitlines()
        assert lines[0].startswith("op")
        assert sum("PASS" in l for l in lines) == 17
        assert "all ok" in lines[-1]
