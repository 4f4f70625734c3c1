import json

import pytest

from malsmooth.cli import main
from malsmooth.pipeline import RECORD_NAME

SMALL = {
    "model": {"input_length": 1024, "epochs": 3, "batch_size": 16},
    "corpus": {"synthetic": {"num_benign": 40, "num_malware": 40, "length_min": 256, "length_max": 1024}},
    "smoothing": {"window_size": 256},
    "attack": {"uap_num_files": 20},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMALL))
    return root, cfg


@pytest.fixture(scope="module")
def pipeline(workspace):
    root, cfg = workspace
    base = ["--config", str(cfg), "--deterministic"]
    assert main(["gen-corpus", *base, "--out", str(root / "corpus")]) == 0
    assert main(["train", *base, "--corpus", str(root / "corpus"), "--out", str(root / "train")]) == 0
    assert main(["eval", *base, "--corpus", str(root / "corpus"), "--model", str(root / "train" / "model.smcv"),
                 "--out", str(root / "eval")]) == 0
    return root, cfg


def test_smoke_pipeline_emits_declared_files(pipeline):
    root, _ = pipeline
    assert (root / "corpus" / "manifest.jsonl").exists()
    assert (root / "train" / "model.smcv").exists()
    ev = root / "eval"
    for name in ["model.smcv", "uap.uap", "uap.uap.json", "report.csv", "report.jsonl", "features.csv",
                 "certification.jsonl", "smoothed/ablation.cfg", "smoothed/base_003.smcv"]:
        assert (ev / name).exists(), name
    for d in ("corpus", "train", "eval"):
        record = json.loads((root / d / RECORD_NAME).read_text())
        assert {"command", "config", "seeds", "artifacts", "versions"} <= set(record)
        assert "finished_at" not in record  # deterministic runs carry no timestamp


def test_record_digests_match_artifacts(pipeline):
    import hashlib

    root, _ = pipeline
    record = json.loads((root / "eval" / RECORD_NAME).read_text())
    for rel, digest in record["artifacts"].items():
        assert hashlib.sha256((root / "eval" / rel).read_bytes()).hexdigest() == digest


def test_rerun_is_byte_identical(pipeline):
    root, cfg = pipeline
    args = ["eval", "--config", str(cfg), "--deterministic", "--corpus", str(root / "corpus"),
            "--model", str(root / "train" / "model.smcv"), "--out", str(root / "eval2")]
    assert main(args) == 0
    for name in ["report.csv", "uap.uap", "model.smcv", "features.csv", "smoothed/base_000.smcv"]:
        assert (root / "eval" / name).read_bytes() == (root / "eval2" / name).read_bytes(), name
    first, second = (json.loads((root / d / RECORD_NAME).read_text()) for d in ("eval", "eval2"))
    for rec in (first, second):
        rec["config"].pop("out")  # the only field that names the output directory
    assert first == second


def test_no_silent_overwrite(pipeline, capsys):
    root, cfg = pipeline
    args = ["train", "--config", str(cfg), "--corpus", str(root / "corpus"), "--out", str(root / "train")]
    assert main(args) == 2
    assert "overwrite" in capsys.readouterr().err


def test_attack_uap_smooth_certify_commands(pipeline):
    root, cfg = pipeline
    base = ["--config", str(cfg), "--deterministic", "--corpus", str(root / "corpus")]
    model = ["--model", str(root / "train" / "model.smcv")]
    assert main(["attack", *base, *model, "--pad-percent", "5", "--out", str(root / "atk")]) == 0
    assert (root / "atk" / "report.csv").exists() and (root / "atk" / "adversarial").is_dir()
    assert main(["uap", *base, *model, "--patch-size", "16", "--out", str(root / "uap")]) == 0
    assert len((root / "uap" / "uap.uap").read_bytes()) == 16
    assert main(["smooth-train", *base, "--window-size", "256", "--out", str(root / "sm")]) == 0
    assert main(["certify", *base, "--smoothed", str(root / "sm" / "smoothed"), "--patch-size", "16",
                 "--out", str(root / "cert")]) == 0
    rows = [json.loads(x) for x in (root / "cert" / "certification.jsonl").read_text().splitlines()]
    assert rows and all(r["n_m"] + r["n_b"] == 4 for r in rows)


def test_certify_length_mismatch_is_config_error(pipeline, capsys):
    root, cfg = pipeline
    code = main(["certify", "--preset", "desk", "--corpus", str(root / "corpus"),
                 "--smoothed", str(root / "eval" / "smoothed"), "--patch-size", "8", "--out", str(root / "bad")])
    assert code == 2
    assert "input length" in capsys.readouterr().err
    assert not (root / "bad").exists()


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_missing_corpus_is_io_error(tmp_path, workspace):
    _, cfg = workspace
    code = main(["train", "--config", str(cfg), "--corpus", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")])
    assert code == 3


def test_bad_config_key_exits_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"smoothing": {"window": 3}}))
    assert main(["gen-corpus", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "smoothing.window" in capsys.readouterr().err


def test_infeasible_uap_exits_4(pipeline, tmp_path):
    root, cfg = pipeline
    code = main(["uap", "--config", str(cfg), "--corpus", str(root / "corpus"),
                 "--model", str(root / "train" / "model.smcv"), "--patch-size", "1000", "--out", str(tmp_path / "u")])
    assert code == 4
