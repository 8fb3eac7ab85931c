import json
import subprocess
import sys

import pytest

from nsggan.cli import EXIT_CONFIG, EXIT_DATA, OUTPUT_ROOT_ENV, build_parser, main

from conftest import TINY

SETS = [a for k, v in TINY.items() for a in ("--set", f"{k}={v}")]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-synthetic", "--out", str(root / "data"), "--identities", "2", "--size", "32"]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def trained(data_dir):
    out = data_dir.parent / "train"
    assert main(["train", "--data", str(data_dir), "--out", str(out), *SETS, "--set", "max_steps=2"]) == 0
    return out


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    text = capsys.readouterr().out
    for cmd in ("make-synthetic", "train", "translate", "evaluate", "ablate"):
        assert cmd in text


def test_console_script_help():
    done = subprocess.run([sys.executable, "-m", "nsggan.cli", "train", "--help"], capture_output=True, text=True)
    assert done.returncode == 0 and "--set" in done.stdout


def test_make_synthetic_layout(data_dir):
    assert len(list(data_dir.glob("*/*_seg.png"))) == 8
    assert (data_dir / "resolved_config.toml").exists()


def test_train_outputs(trained):
    assert {"log.jsonl", "last.safetensors", "resolved_config.toml"} <= {p.name for p in trained.iterdir()}
    assert len((trained / "log.jsonl").read_text().splitlines()) == 2


def test_train_rerun_byte_identical(data_dir, trained, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), *SETS, "--set", "max_steps=2"]) == 0
    assert (tmp_path / "log.jsonl").read_bytes() == (trained / "log.jsonl").read_bytes()
    assert (tmp_path / "resolved_config.toml").read_bytes() == (trained / "resolved_config.toml").read_bytes()


def test_resume(data_dir, trained, tmp_path):
    args = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--resume", str(trained / "last.safetensors")]
    assert main(args) == 0


def test_translate(data_dir, trained, tmp_path):
    ckpt = str(trained / "last.safetensors")
    assert main(["translate", "--data", str(data_dir), "--checkpoint", ckpt, "--out", str(tmp_path),
                 "--targets", "0", "3"]) == 0
    assert len(list((tmp_path / "target_3").glob("*.png"))) == 8
    assert not (tmp_path / "target_1").exists()
    assert len(list((tmp_path / "grids").glob("*.png"))) == 8


def test_evaluate(data_dir, trained, tmp_path, capsys):
    ckpt = str(trained / "last.safetensors")
    assert main(["evaluate", "--data", str(data_dir), "--checkpoint", ckpt, "--out", str(tmp_path)]) == 0
    assert "Age Group" in capsys.readouterr().out
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["counts"]["generated"] == 32
    assert len((tmp_path / "records.jsonl").read_text().splitlines()) == 32 + 8


def test_output_root_env(data_dir, monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert main(["make-synthetic", "--identities", "1", "--size", "32"]) == 0
    assert (tmp_path / "make-synthetic" / "resolved_config.toml").exists()


def test_config_error_exit(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "epochs=ten"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path), "--set", "wavelet=1"]) == EXIT_CONFIG


def test_data_error_exit(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["evaluate", "--data", str(tmp_path / "empty"), "--checkpoint", "x", "--out", str(tmp_path)]) \
        == EXIT_DATA


def test_checkpoint_size_mismatch(trained, tmp_path):
    big = tmp_path / "big"
    assert main(["make-synthetic", "--out", str(big), "--identities", "1", "--size", "64"]) == 0
    assert main(["translate", "--data", str(big), "--checkpoint", str(trained / "last.safetensors"),
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_ablate_small(data_dir, tmp_path):
    args = ["ablate", "--axis", "strategy", "--data", str(data_dir), "--out", str(tmp_path), "--test-fraction",
            "0.5", *SETS, "--set", "max_steps=1"]
    assert main(args) == 0
    assert (tmp_path / "ablation_strategy.txt").exists() and (tmp_path / "resolved_config.toml").exists()
