import json

import numpy as np
import pytest

from faxbev.cli import load_trained, main
from faxbev.dump import read_ppm
from faxbev.io import load_checkpoint, load_tensor
from faxbev.models import payload_bytes

TINY = {"train_scenes": 2, "epochs": 1, "batch_size": 2, "warmup_steps": 1}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """A real (tiny) train-toy run shared by the eval and dump tests."""
    d = tmp_path_factory.mktemp("run")
    cfg = d / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train-toy", "--config", str(cfg), "--out", str(d / "out"), "--seed", "1"]) == 0
    return d / "out"


def records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestExitCodes:
    def test_help(self, capsys):
        assert main(["--help"]) == 0

    def test_missing_subcommand(self):
        assert main([]) == 2

    def test_bad_flag(self):
        assert main(["bench-attention", "--nope"]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["train-toy", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochz": 3}))
        assert main(["train-toy", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_bad_threads_env(self, monkeypatch):
        monkeypatch.setenv("FAXBEV_THREADS", "zero")
        assert main(["gradcheck", "--filter", "^add$", "--instances", "1"]) == 2

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv("FAXBEV_THREADS", "1")
        assert main(["gradcheck", "--filter", "^add$", "--instances", "1"]) == 0

    def test_gradcheck_filter_subset(self, capsys):
        assert main(["gradcheck", "--filter", "softmax"]) == 0
        table = [l for l in capsys.readouterr().out.splitlines() if l.endswith(" ok")]
        assert {l.split()[0] for l in table} == {"softmax_lastaxis", "log_softmax_lastaxis"}


class TestBench:
    def test_csv_and_slopes(self, tmp_path, capsys):
        assert main(["bench-attention", "--sizes", "16,32", "--repeats", "1", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        lines = (tmp_path / "bench_attention.csv").read_text().splitlines()
        assert lines[0] == "H,W,N,variant,pair_count,wall_ms"
        rows = {(int(r.split(",")[0]), r.split(",")[3]): int(r.split(",")[4]) for r in lines[1:]}
        assert rows[(32, "fax")] == 2_097_152
        assert rows[(32, "dense")] // 4 == 4_194_304
        assert "# fax: log-log slope" in out and "# dense: log-log slope" in out
        echoed = json.loads((tmp_path / "config.json").read_text())
        assert echoed["command"] == "bench-attention" and echoed["sizes"] == [16, 32]


class TestTrainEvalDump:
    def test_train_outputs(self, run_dir):
        cfg = json.loads((run_dir / "config.json").read_text())
        assert cfg["command"] == "train-toy" and cfg["seed"] == 1 and cfg["train_scenes"] == 2
        recs = records(run_dir / "metrics.jsonl")
        assert [(r["model"], r["epoch"]) for r in recs] == [("single", 0), ("cobevt", 0)]
        assert all(np.isfinite(r["loss"]) for r in recs)
        for name in ("single.ckpt", "cobevt.ckpt"):
            assert load_checkpoint(run_dir / name)

    def test_rerun_from_echoed_config_is_identical(self, run_dir, tmp_path):
        again = tmp_path / "again"
        assert main(["train-toy", "--config", str(run_dir / "config.json"), "--out", str(again)]) == 0
        for name in ("single.ckpt", "cobevt.ckpt"):
            assert (again / name).read_bytes() == (run_dir / name).read_bytes()

    def test_eval_record(self, run_dir, tmp_path, capsys):
        ck = str(run_dir / "cobevt.ckpt")
        assert main(["eval", ck, "--scenes", "3", "--out", str(tmp_path)]) == 0
        assert main(["eval", ck, "--scenes", "3", "--drop-cameras", "4", "--max-agents", "2",
                     "--out", str(tmp_path)]) == 0
        recs = records(tmp_path / "eval.jsonl")
        assert len(recs) == 2
        assert recs[0]["model"] == "cobevt" and recs[0]["scenes"] == 3 and 0.0 <= recs[0]["iou"] <= 1.0
        assert recs[0]["payload_bytes"] == payload_bytes(8, 8, 32, 1)
        assert recs[0]["payload_bytes_full_scale"] == 524288
        assert recs[1]["drop_cameras"] == 4 and recs[1]["max_agents"] == 2

    def test_eval_single_checkpoint(self, run_dir, capsys):
        assert main(["eval", str(run_dir / "single.ckpt"), "--scenes", "2"]) == 0
        rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert rec["model"] == "single" and rec["payload_bytes"] == 0

    @pytest.mark.parametrize("flags", [["--compression-rate", "8"], ["--drop-cameras", "5"],
                                       ["--max-agents", "0"], ["--drop-cameras", "-1"]])
    def test_eval_bad_options(self, run_dir, flags):
        assert main(["eval", str(run_dir / "cobevt.ckpt"), "--scenes", "1", *flags]) == 2

    def test_eval_bad_checkpoints(self, run_dir, tmp_path):
        bad = tmp_path / "cobevt_bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["eval", str(bad), "--config", str(run_dir / "config.json")]) == 2
        other = tmp_path / "weights.ckpt"
        other.write_bytes((run_dir / "cobevt.ckpt").read_bytes())
        assert main(["eval", str(other), "--config", str(run_dir / "config.json")]) == 2
        swapped = tmp_path / "single.ckpt"  # cooperative weights under a single-agent name
        swapped.write_bytes((run_dir / "cobevt.ckpt").read_bytes())
        assert main(["eval", str(swapped), "--config", str(run_dir / "config.json")]) == 2

    def test_dump_predictions(self, run_dir, tmp_path):
        out = tmp_path / "pred"
        assert main(["dump", "predictions", str(run_dir / "cobevt.ckpt"), "--scene", "4", "--out", str(out)]) == 0
        logits = load_tensor(out / "logits.tdump")
        assert logits.shape == (64, 64, 2) and logits.dtype == np.float32
        # the dump is the model's output, bit for bit
        from faxbev.tensor import Tensor, no_grad
        from faxbev.train import render_scene_data
        model, cfg = load_trained(str(run_dir / "cobevt.ckpt"))
        data = render_scene_data(cfg.scene, 4)
        images, poses, _, _ = data.view(0, np.float32)
        with no_grad():
            ref = model(Tensor(images), data.rigs, poses).data
        assert logits.tobytes() == ref.tobytes()
        assert read_ppm(out / "prediction.ppm").shape == (64, 130, 3)
        assert read_ppm(out / "ego_cameras.ppm").shape == (32, 256, 3)

    def test_dump_attention_rows_sum_to_one(self, run_dir, tmp_path):
        out = tmp_path / "attn"
        assert main(["dump", "attention-maps", str(run_dir / "cobevt.ckpt"), "--scene", "2", "--out", str(out)]) == 0
        files = sorted(out.glob("attn.*.tdump"))
        assert any("fusebevt" in f.name for f in files) and any("sinbevt" in f.name for f in files)
        for f in files:
            w = load_tensor(f)
            assert np.all(w >= 0)
            assert np.abs(w.sum(axis=-1) - 1.0).max() < 1e-5

    def test_dump_warped(self, run_dir, tmp_path):
        out = tmp_path / "warp"
        assert main(["dump", "warped-features", str(run_dir / "cobevt.ckpt"), "--scene", "0", "--out", str(out)]) == 0
        files = sorted(out.glob("warped.*.tdump"))
        assert files and all(load_tensor(f).shape == (8, 8, 32) for f in files)
        assert main(["dump", "warped-features", str(run_dir / "single.ckpt"), "--out", str(out)]) == 2
