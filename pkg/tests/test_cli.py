import json
from pathlib import Path

import numpy as np
import pytest

from mscl import cli
from mscl import data as dm
from mscl.config import DataSection, ModelSection, RunConfig, TrainingSection, write_config
from mscl.segmenter import load_gray_png, read_proposal_manifest


def run_cli(*args):
    return cli.run([str(a) for a in args])


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = run_cli("synth", "--out", out, "--count", "12", "--seed", "3", "--image-size", "32")
    assert code == 0
    return out


def write_tiny_config(path, corpus_dir, out_dir, **training_kwargs):
    config = RunConfig(
        seed=11,
        model=ModelSection(
            topics=6, embed_dim=32, feature_dim=16, layers=1, heads=2,
            ffn_dim=48, max_report_len=64, patch_size=8,
        ),
        training=TrainingSection(epochs=2, batch_size=4, **training_kwargs),
        data=DataSection(manifest=str(corpus_dir / "manifest.jsonl"), out_dir=str(out_dir)),
    )
    write_config(config, path)
    return config


class TestSynth:
    def test_writes_manifest_and_images(self, corpus_dir):
        studies = dm.load_dataset(corpus_dir / "manifest.jsonl")
        assert len(studies) == 12
        pngs = list((corpus_dir / "images").glob("*.png"))
        assert len(pngs) == sum(len(s.image_paths) for s in studies)


class TestSegment:
    def test_processes_all_images(self, corpus_dir, tmp_path):
        out = tmp_path / "segmented"
        code = run_cli("segment", "--images", corpus_dir / "images", "--out", out)
        assert code == 0
        inputs = list((corpus_dir / "images").glob("*.png"))
        outputs = list(out.glob("*.png"))
        assert len(outputs) == len(inputs)
        manifests = list((out / "proposals").glob("*.json"))
        assert len(manifests) == len(inputs)
        image_id, width, height, proposals = read_proposal_manifest(manifests[0])
        assert (width, height) == (32, 32)

    def test_bad_file_continues_with_nonzero_exit(self, corpus_dir, tmp_path, capsys):
        images = tmp_path / "mixed"
        images.mkdir()
        for png in sorted((corpus_dir / "images").glob("*.png"))[:3]:
            (images / png.name).write_bytes(png.read_bytes())
        (images / "broken.png").write_bytes(b"not a png at all")
        out = tmp_path / "seg_out"
        code = run_cli("segment", "--images", images, "--out", out)
        assert code == 1
        assert len(list(out.glob("*.png"))) == 3
        assert "broken.png" in capsys.readouterr().err

    def test_replay_backend_matches_builtin(self, corpus_dir, tmp_path):
        first = tmp_path / "first"
        assert run_cli("segment", "--images", corpus_dir / "images", "--out", first) == 0
        replay = tmp_path / "replay"
        code = run_cli(
            "segment", "--images", corpus_dir / "images", "--out", replay,
            "--backend", "proposals-dir", "--proposals", first / "proposals",
        )
        assert code == 0
        for png in sorted(first.glob("*.png")):
            a = load_gray_png(png)
            b = load_gray_png(replay / png.name)
            np.testing.assert_array_equal(a.pixels, b.pixels)


@pytest.fixture(scope="module")
def trained(corpus_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("train_run")
    config_path = root / "run.toml"
    write_tiny_config(config_path, corpus_dir, root / "out")
    assert run_cli("train", "--config", config_path) == 0
    return root


class TestTrainGenerateEvaluate:
    def test_artifacts_exist(self, trained):
        out = trained / "out"
        assert (out / "last.ckpt").exists()
        assert (out / "best.ckpt").exists()
        lines = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
        assert len(lines) == 2
        assert {"epoch", "l_c", "l_ce", "l_cl", "l_total", "val_bleu4"} == set(lines[0])

    def test_generate_and_evaluate(self, trained, tmp_path):
        gen_path = tmp_path / "gen.jsonl"
        code = run_cli(
            "generate", "--checkpoint", trained / "out" / "best.ckpt",
            "--split", "test", "--out", gen_path,
        )
        assert code == 0
        records = [json.loads(l) for l in gen_path.read_text().splitlines()]
        assert len(records) == 3  # 12 studies split 8/1/3
        assert all(set(r) == {"id", "candidate", "reference"} for r in records)
        # deterministic across runs
        second = tmp_path / "gen2.jsonl"
        assert run_cli("generate", "--checkpoint", trained / "out" / "best.ckpt",
                       "--split", "test", "--out", second) == 0
        assert gen_path.read_bytes() == second.read_bytes()

        metrics_path = tmp_path / "metrics.json"
        assert run_cli("evaluate", "--generations", gen_path, "--out", metrics_path) == 0
        report = json.loads(metrics_path.read_text())
        assert set(report) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor"}
        assert all(0.0 <= v <= 1.0 for v in report.values())

    def test_generate_rejects_mismatched_config(self, trained, corpus_dir, tmp_path, capsys):
        other = tmp_path / "other.toml"
        write_tiny_config(other, corpus_dir, tmp_path / "unused", lam=0.5)
        code = run_cli(
            "generate", "--checkpoint", trained / "out" / "best.ckpt",
            "--split", "test", "--out", tmp_path / "x.jsonl", "--config", other,
        )
        assert code == 1
        assert "CompatibilityError" in capsys.readouterr().err

    def test_resume_via_cli(self, corpus_dir, tmp_path):
        root = tmp_path / "resume_run"
        root.mkdir()
        config_path = root / "run.toml"
        write_tiny_config(config_path, corpus_dir, root / "out")
        assert run_cli("train", "--config", config_path) == 0
        # re-running from the last checkpoint is a no-op (epochs already done)
        assert run_cli("train", "--config", config_path, "--resume", root / "out" / "last.ckpt") == 0


class TestErrorsAndGradcheck:
    def test_bad_config_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[training]\nlam = 3.0\n")
        assert run_cli("train", "--config", bad) == 1
        assert "error[ConfigError]" in capsys.readouterr().err

    def test_missing_manifest_reports_error(self, corpus_dir, tmp_path, capsys):
        config_path = tmp_path / "run.toml"
        config = RunConfig(
            seed=1,
            training=TrainingSection(epochs=1),
            data=DataSection(manifest=str(tmp_path / "none.jsonl"), out_dir=str(tmp_path / "o")),
        )
        write_config(config, config_path)
        assert run_cli("train", "--config", config_path) == 1
        assert "error[FileNotFoundError]" in capsys.readouterr().err

    def test_gradcheck_passes(self, capsys):
        assert run_cli("gradcheck", "--seed", "0") == 0
        out = capsys.readouterr().out
        assert "end_to_end_total_loss" in out
        assert "FAIL" not in out

    def test_gradcheck_corruption_detected(self, capsys):
        assert run_cli("gradcheck", "--seed", "0", "--corrupt", "softmax_rows") == 1
        out = capsys.readouterr().out
        assert "FAIL softmax_rows" in out
