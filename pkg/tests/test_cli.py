import json

import numpy as np
import pytest

from mixrank.checkpoint import load_params, save_params
from mixrank.cli import main
from mixrank.config import RunConfig
from mixrank.model import ModelConfig, init_params


@pytest.fixture()
def mini_config(tmp_path):
    cfg = {
        "model": {"vocab_size": 67, "hidden": 16, "layers": 1, "heads": 2,
                  "ffn_mult": 2.0, "max_seq": 64},
        "data": {"seed": 0, "train_size": 200, "eval_seed": 99, "eval_queries": 10},
        "teacher": {"peak_lr": 0.003, "warmup_steps": 5, "total_steps": 30},
        "joint": {"peak_lr": 0.0015, "warmup_steps": 5, "total_steps": 30},
        "batch_size": 16,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_round_trip(self, mini_config):
        cfg = RunConfig.load(mini_config)
        assert cfg.model.hidden == 16
        assert cfg.teacher.total_steps == 30
        assert cfg.joint.peak_lr == 0.0015
        # untouched sections keep defaults
        assert cfg.t_s == 1

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"modle": {}}))
        with pytest.raises(ValueError):
            RunConfig.load(path)

    def test_resolved_persisted(self, tmp_path):
        cfg = RunConfig()
        target = cfg.save_resolved(tmp_path / "out")
        resolved = json.loads(target.read_text())
        assert resolved["model"]["vocab_size"] == 67
        assert RunConfig.from_dict(resolved).to_dict() == cfg.to_dict()

    def test_schedule_kinds(self):
        cfg = RunConfig()
        assert cfg.schedule().total_steps == cfg.joint.total_steps
        cfg.curriculum = {"kind": "flat", "weights": {"lambda_distill": 0.0,
                                                      "lambda_align": 0.0}}
        assert len(cfg.schedule().phases) == 1


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        cfg = ModelConfig(vocab_size=9, hidden=8, layers=2, heads=2, ffn_mult=2.0)
        params = init_params(cfg, seed=3)
        version = save_params(tmp_path / "m.ckpt", params, {"stage": "test"})
        loaded, meta = load_params(tmp_path / "m.ckpt")
        assert meta["version"] == version
        assert meta["stage"] == "test"
        assert loaded.config == cfg
        for (na, ta), (nb, tb) in zip(params.named_parameters(),
                                      loaded.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_same_params_same_version(self, tmp_path):
        cfg = ModelConfig(vocab_size=9, hidden=8, layers=1, heads=2)
        v1 = save_params(tmp_path / "a.ckpt", init_params(cfg, seed=3), {})
        v2 = save_params(tmp_path / "b.ckpt", init_params(cfg, seed=3), {})
        v3 = save_params(tmp_path / "c.ckpt", init_params(cfg, seed=4), {})
        assert v1 == v2 != v3

    def test_truncated_checkpoint_rejected(self, tmp_path):
        from mixrank.errors import DecodeError

        cfg = ModelConfig(vocab_size=9, hidden=8, layers=1, heads=2)
        path = tmp_path / "m.ckpt"
        save_params(path, init_params(cfg, seed=3), {})
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(DecodeError):
            load_params(path)


class TestCliCommands:
    def test_costmodel_spot_values(self, capsys):
        assert main(["costmodel", "--tq", "60", "--ti", "900", "--ni", "250",
                     "--k", "450"]) == 0
        out = capsys.readouterr().out
        assert "230400000" in out.replace(",", "")
        assert "64600" in out.replace(",", "")

    def test_train_teacher_writes_artifacts(self, mini_config, tmp_path, capsys):
        out = tmp_path / "teacher-run"
        assert main(["train-teacher", "--config", str(mini_config),
                     "--out", str(out)]) == 0
        assert (out / "teacher.ckpt").exists()
        assert (out / "config.json").exists()
        metrics = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        assert len(metrics) == 30
        assert all("loss_sft" in m and "lr" in m for m in metrics)
        summary = json.loads((out / "summary.json").read_text())
        assert 0.0 <= summary["ndcg_at_10"] <= 1.0

    def test_train_rerun_reproduces_metrics_bitwise(self, mini_config, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["train-teacher", "--config", str(mini_config), "--out", str(out_a)])
        main(["train-teacher", "--config", str(mini_config), "--out", str(out_b)])
        assert (out_a / "metrics.jsonl").read_text() == (out_b / "metrics.jsonl").read_text()
        assert (out_a / "teacher.ckpt").read_bytes() == (out_b / "teacher.ckpt").read_bytes()

    def test_serve_and_score_subprocess_round_trip(self, tmp_path):
        import re
        import subprocess
        import sys

        from mixrank.model import ModelConfig, init_params

        cfg = ModelConfig(vocab_size=67, hidden=16, layers=1, heads=2, ffn_mult=2.0,
                          max_seq=64)
        enc_cfg = ModelConfig(**{**cfg.to_dict(), "head_mode": "none"})
        save_params(tmp_path / "ranker.ckpt", init_params(cfg, seed=1), {})
        save_params(tmp_path / "encoder.ckpt", init_params(enc_cfg, seed=2), {})
        items_path = tmp_path / "items.json"
        items_path.write_text(json.dumps([{"id": "job-7", "tokens": [1, 2, 3]}]))
        cache_path = tmp_path / "cache.log"
        assert main(["encode", "--checkpoint", str(tmp_path / "encoder.ckpt"),
                     "--items", str(items_path), "--cache", str(cache_path)]) == 0

        server = subprocess.Popen(
            [sys.executable, "-m", "mixrank.cli", "serve",
             "--checkpoint", str(tmp_path / "ranker.ckpt"),
             "--cache", str(cache_path),
             "--encoder", str(tmp_path / "encoder.ckpt"),
             "--port", "0", "--workers", "2"],
            stdout=subprocess.PIPE, text=True)
        try:
            banner = server.stdout.readline()
            port = int(re.search(r"listening on [\d.]+:(\d+)", banner).group(1))
            out = subprocess.run(
                [sys.executable, "-m", "mixrank.cli", "score",
                 "--port", str(port), "--query", "1 2 3 4", "--item-id", "job-7",
                 "--item-tokens", "9 10 11"],
                capture_output=True, text=True, timeout=30)
            assert out.returncode == 0, out.stderr
            assert "job-7: p_yes=" in out.stdout
            assert "inline: p_yes=" in out.stdout
        finally:
            server.kill()
            server.wait()

    def test_joint_pipeline_and_encode(self, mini_config, tmp_path, capsys):
        teacher_out = tmp_path / "teacher"
        joint_out = tmp_path / "joint"
        main(["train-teacher", "--config", str(mini_config), "--out", str(teacher_out)])
        assert main(["train-joint", "--config", str(mini_config),
                     "--teacher", str(teacher_out / "teacher.ckpt"),
                     "--out", str(joint_out)]) == 0
        assert (joint_out / "ranker.ckpt").exists()
        assert (joint_out / "encoder.ckpt").exists()

        items = [{"id": "item-1", "tokens": [1, 2, 3]},
                 {"id": "item-2", "tokens": [4, 5, 6]}]
        items_path = tmp_path / "items.json"
        items_path.write_text(json.dumps(items))
        cache_path = tmp_path / "cache.log"
        assert main(["encode", "--checkpoint", str(joint_out / "encoder.ckpt"),
                     "--items", str(items_path), "--cache", str(cache_path),
                     "--t-s", "2"]) == 0
        assert "updated 2 embeddings" in capsys.readouterr().out
        assert cache_path.exists()
