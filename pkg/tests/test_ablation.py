import json

import pytest

from nsggan.ablation import AXES, GRID_COLUMNS, AblationReport, AblationRow, row_configs, row_labels, run_ablate
from nsggan.config import TrainConfig
from nsggan.datapipe import generate_synthetic_dataset
from nsggan.generator import ConfigError

from conftest import TINY

EXPECTED = {
    "modules": ["Encoder-decoder (Baseline)", "+ ProjectionNet", "+ ConstraintNet", "+ Feature Refinement Module"],
    "injection_type": ["Semantic Only", "Conditional Semantic", "Conditional Noisy Semantic",
                       "Conditional Noisy Semantic (No eyes and lips)"],
    "noise_position": ["No Noise", "ProjectionNet", "ProjectionNet + Decoder"],
    "constraint_type": ["Simple Mapping", "Feature Disentanglement (With Identity Loss)",
                        "Feature Disentanglement (With -Δ Age Loss)"],
    "strategy": ["Self-Driven Only", "Condition-Driven Only", "Jointly Strategy"],
}


@pytest.mark.parametrize("axis", sorted(EXPECTED))
def test_row_labels_and_order(axis):
    assert row_labels(axis) == EXPECTED[axis]


def test_unknown_axis():
    with pytest.raises(ConfigError):
        row_labels("wavelets")


def test_module_rows_switch_cumulatively():
    cfgs = [c for _, c in row_configs(TrainConfig(), "modules")]
    switches = [(c.projection_enabled, c.constraint_enabled, c.frm_enabled) for c in cfgs]
    assert switches == [(False, False, False), (True, False, False), (True, True, False), (True, True, True)]


def test_rows_differ_from_each_other():
    for axis in AXES:
        digests = [c.digest() for _, c in row_configs(TrainConfig(), axis)]
        assert len(set(digests)) == len(digests), axis


def test_final_row_is_full_model_where_applicable():
    base = TrainConfig()
    for axis in ("modules", "noise_position", "constraint_type", "strategy", "injection_type"):
        assert row_configs(base, axis)[-1][1] == base, axis


def _row(label, marks=()):
    return AblationRow(label, "d", list(marks), 1.234, 0.5, 0.75, 50.0, 75.0, {})


def test_table_grid_and_label_layouts():
    grid = AblationReport("noise_position", [_row("No Noise", [False, False]), _row("ProjectionNet", [True, False])])
    text = grid.table().splitlines()
    assert text[0].startswith("ProjectionNet | Decoder") and "✓" in text[2] and "1.23 ± 0.50" in text[1]
    lab = AblationReport("strategy", [_row("Self-Driven Only")]).table()
    assert "Self-Driven Only" in lab and "50.00 (75.00)" in lab
    assert GRID_COLUMNS["modules"][0] == "Encoder-decoder (Baseline)"


def test_run_ablate_writes_ordered_reports(tmp_path):
    data = generate_synthetic_dataset(3, (0, 1, 2, 3), 32)
    base = TrainConfig(**TINY, max_steps=1)
    report = run_ablate(base, "strategy", data[:8], data[8:], tmp_path)
    assert [r.label for r in report.rows] == EXPECTED["strategy"]
    saved = json.loads((tmp_path / "ablation_strategy.json").read_text())
    assert [r["label"] for r in saved["rows"]] == EXPECTED["strategy"]
    assert (tmp_path / "ablation_strategy.txt").exists() and (tmp_path / "base_config.toml").exists()
    for i in range(3):
        (row_dir,) = tmp_path.glob(f"{i}_*")
        assert (row_dir / "records.jsonl").exists() and (row_dir / "log.jsonl").exists()
