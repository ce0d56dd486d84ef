import numpy as np
import pytest

from textlayout.cli import RunConfig, main
from textlayout.synthdoc import read_annotations, read_pgm

TINY = ["--d", "16", "--n-heads", "2", "--enc-layers", "1", "--dec-layers", "1", "--M", "16"]


def config_of(path):
    return RunConfig.parse((path / "config.txt").read_text())


def test_gen_data_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-data", "--n", "5", "--data-seed", "7", "--out", str(tmp_path / name)]) == 0
    out = capsys.readouterr().out.splitlines()
    hashes = [line.split()[1] for line in out if line.startswith("hash")]
    assert len(hashes) == 2 and hashes[0] == hashes[1]
    assert config_of(tmp_path / "a")["corpus_hash"] == hashes[0]
    assert (tmp_path / "a" / "page_0004.pgm").exists()


def test_usage_errors_exit_2(tmp_path):
    assert main(["bogus"]) == 2
    assert main([]) == 2
    assert main(["pretrain", "--steps", "x", "--out", str(tmp_path)]) == 2
    assert main(["finetune", "--task", "poster", "--model", "m", "--out", str(tmp_path)]) == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert main(["ocr", str(tmp_path / "missing.pgm"), "--model", str(tmp_path), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.txt"
    bad.write_text("colour = blue\n")
    assert main(["inspect", "--config", str(bad)]) == 1


def test_inspect(tmp_path, capsys):
    assert main(["inspect", "--pages", "3", "--data-seed", "2", "--page", "1", "--M", "16"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# page 1:") and "\n# segments\nBEGIN||" in out
    assert main(["inspect", "--pages", "3", "--page", "9"]) == 1


def test_config_round_trip():
    cfg = RunConfig(command="pretrain", lr=0.5, use_layout=False, data="x y")
    parsed = RunConfig.parse(cfg.to_text())
    assert RunConfig(**parsed) == cfg


def test_rerun_from_recorded_config_is_bit_identical(tmp_path):
    first = tmp_path / "first"
    assert main(["pretrain", "--pages", "2", "--steps", "6", "--out", str(first), *TINY]) == 0
    for name in ("config.txt", "train.log", "checkpoint.bin", "model.txt"):
        assert (first / name).exists()
    second = tmp_path / "second"
    assert main(["pretrain", "--config", str(first / "config.txt"), "--out", str(second)]) == 0
    assert (first / "train.log").read_text() == (second / "train.log").read_text()
    assert (first / "checkpoint.bin").read_bytes() == (second / "checkpoint.bin").read_bytes()
    a, b = config_of(first), config_of(second)
    assert a.pop("out") != b.pop("out") and a == b


def test_flags_override_config(tmp_path):
    first = tmp_path / "first"
    assert main(["pretrain", "--pages", "1", "--steps", "2", "--out", str(first), *TINY]) == 0
    second = tmp_path / "second"
    assert main(["pretrain", "--config", str(first / "config.txt"), "--steps", "3", "--no-layout",
                 "--out", str(second)]) == 0
    cfg = config_of(second)
    assert cfg["steps"] == 3 and cfg["use_layout"] is False and cfg["d"] == 16
    assert len((second / "train.log").read_text().splitlines()) == 3


def test_finetune_and_eval_tasks(tmp_path):
    base = tmp_path / "base"
    assert main(["pretrain", "--pages", "4", "--steps", "2", "--out", str(base), *TINY]) == 0
    for task in ("cls", "label", "vqa"):
        out = tmp_path / f"ft-{task}"
        assert main(["finetune", "--task", task, "--model", str(base), "--pages", "4", "--steps", "2",
                     "--M", "16", "--out", str(out)]) == 0
        assert main(["eval", "--task", task, "--model", str(out), "--pages", "4", "--M", "16",
                     "--out", str(out)]) == 0
        assert (out / "metrics.txt").read_text()
    assert main(["eval", "--task", "ocr", "--model", str(base), "--pages", "2", "--max-segments", "2",
                 "--out", str(base)]) == 0
    assert "rec_f1 = " in (base / "metrics.txt").read_text()


def test_pretrain_then_ocr_reconstructs_page(tmp_path):
    data, run, ocr = tmp_path / "data", tmp_path / "run", tmp_path / "ocr"
    assert main(["gen-data", "--n", "1", "--out", str(data)]) == 0
    assert main(["pretrain", "--pages", "1", "--steps", "200", "--lr", "5e-3", "--out", str(run)]) == 0
    assert config_of(run)["corpus_hash"] == config_of(data)["corpus_hash"]
    assert main(["ocr", str(data / "page_0000.pgm"), "--model", str(run), "--out", str(ocr)]) == 0
    gold, _, _, _ = read_annotations((data / "page_0000.txt").read_text())
    got = [line.split("\t") for line in (ocr / "ocr.txt").read_text().splitlines() if not line.startswith("#")]
    assert [(w, tuple(map(int, b.split()))) for w, b in got] == [(g.word, g.box.astuple()) for g in gold]
    assert "#finished\ttrue" in (ocr / "ocr.txt").read_text()
    overlay = read_pgm(ocr / "overlay.pgm")
    page = read_pgm(data / "page_0000.pgm")
    assert overlay.shape == page.shape and np.any(np.isclose(overlay, 128 / 255))
