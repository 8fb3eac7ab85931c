"""Ablation sweeps: one configuration preset per table row, trained and evaluated in order."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig, apply_overrides, dumps_config
from .datapipe import FaceSample
from .evaluator import EstimatorPlugins, evaluate, format_identity, stripe_accuracy, write_records
from .generator import ConfigError

_NO_MODULES = dict(projection_enabled=False, constraint_enabled=False, frm_enabled=False)

# axis -> ordered (row label, overrides on top of the base config)
AXES: dict[str, tuple[tuple[str, dict], ...]] = {
    "modules": (
        ("Encoder-decoder (Baseline)", _NO_MODULES),
        ("+ ProjectionNet", dict(constraint_enabled=False, frm_enabled=False)),
        ("+ ConstraintNet", dict(frm_enabled=False)),
        ("+ Feature Refinement Module", {}),
    ),
    "injection_type": (
        ("Semantic Only", dict(projection_condition=False, projection_noise_enabled=False, drop_classes=[])),
        ("Conditional Semantic", dict(projection_noise_enabled=False, drop_classes=[])),
        ("Conditional Noisy Semantic", dict(drop_classes=[])),
        ("Conditional Noisy Semantic (No eyes and lips)", dict(drop_classes=[3, 7, 8])),
    ),
    "noise_position": (
        ("No Noise", dict(projection_noise_enabled=False, decoder_noise_enabled=False)),
        ("ProjectionNet", dict(projection_noise_enabled=True, decoder_noise_enabled=False)),
        ("ProjectionNet + Decoder", dict(projection_noise_enabled=True, decoder_noise_enabled=True)),
    ),
    "constraint_type": (
        ("Simple Mapping", dict(constraint_mode="simple_mapping")),
        ("Feature Disentanglement (With Identity Loss)", dict(constraint_mode="disentangle_identity")),
        ("Feature Disentanglement (With -Δ Age Loss)", dict(constraint_mode="disentangle_age")),
    ),
    "strategy": (
        ("Self-Driven Only", dict(strategy="self_only")),
        ("Condition-Driven Only", dict(strategy="condition_only")),
        ("Jointly Strategy", dict(strategy="joint")),
    ),
}

# checkmark columns for the tables that are laid out as switch grids
GRID_COLUMNS = {
    "modules": ("Encoder-decoder (Baseline)", "ProjectionNet", "ConstraintNet", "Feature Refinement Module"),
    "noise_position": ("ProjectionNet", "Decoder"),
}


def row_labels(axis: str) -> list[str]:
    return [label for label, _ in _axis(axis)]


def _axis(axis: str):
    try:
        return AXES[axis]
    except KeyError:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}") from None


def row_configs(base: TrainConfig, axis: str) -> list[tuple[str, TrainConfig]]:
    return [(label, apply_overrides(base, overrides)) for label, overrides in _axis(axis)]


def _checkmarks(axis: str, cfg: TrainConfig) -> list[bool]:
    if axis == "modules":
        return [True, cfg.projection_enabled, cfg.constraint_enabled, cfg.frm_enabled]
    if axis == "noise_position":
        return [cfg.projection_noise_enabled, cfg.decoder_noise_enabled]
    return []


@dataclass
class AblationRow:
    label: str
    config_digest: str
    checkmarks: list
    age_error: float  # mean over groups of |generated mean - generic mean|
    age_std: float  # mean over groups of the generated std
    stripe_accuracy: float
    identity_rate: float
    identity_mean: float
    final_losses: dict

    def age_cell(self) -> str:
        return f"{self.age_error:.2f} ± {self.age_std:.2f}"


@dataclass
class AblationReport:
    axis: str
    rows: list

    def to_dict(self) -> dict:
        return dict(axis=self.axis, columns=list(GRID_COLUMNS.get(self.axis, ())),
                    rows=[vars(r) for r in self.rows])

    def table(self) -> str:
        cols = list(GRID_COLUMNS.get(self.axis, ()))
        header = (cols or ["Configuration"]) + ["Identity Verification Rate", "Age Translation Accuracy",
                                                 "Stripe Accuracy"]
        body = []
        for r in self.rows:
            lead = ["✓" if c else "" for c in r.checkmarks] if cols else [r.label]
            body.append(lead + [format_identity(r.identity_rate, r.identity_mean), r.age_cell(),
                                f"{100 * r.stripe_accuracy:.1f}%"])
        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
        return "\n".join(" | ".join(c.ljust(w) for c, w in zip(line, widths)) for line in [header] + body)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False))
        path.with_suffix(".txt").write_text(self.table() + "\n")
        return path


def run_row(label: str, config: TrainConfig, axis: str, train_set: Sequence[FaceSample],
            test_set: Sequence[FaceSample], out_dir: str | Path | None = None,
            plugins: EstimatorPlugins | None = None) -> AblationRow:
    """Train one row's configuration and score it on ``test_set``."""
    from .trainer import train

    row_dir = None if out_dir is None else Path(out_dir)
    state = train(train_set, config, out_dir=row_dir)
    report, records = evaluate(state.models, test_set, plugins)
    if row_dir is not None:
        write_records(records, row_dir / "records.jsonl")
        report.save(row_dir / "report.json")
    last = state.history[-1] if state.history else {}
    return AblationRow(
        label=label, config_digest=config.digest(), checkmarks=_checkmarks(axis, config),
        age_error=report.mean_abs_error,
        age_std=float(np.mean([g["generated_std"] for g in report.groups.values()])),
        stripe_accuracy=stripe_accuracy(records),
        identity_rate=report.identity_rate, identity_mean=report.identity_mean,
        final_losses={k: last[k] for k in ("self", "cyc", "total") if k in last})


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label.lower()).strip("_")


def run_ablate(base: TrainConfig, axis: str, train_set: Sequence[FaceSample], test_set: Sequence[FaceSample],
               out_dir: str | Path | None = None, parallel: int = 0,
               plugins: EstimatorPlugins | None = None) -> AblationReport:
    """Run every row of ``axis`` and collect a report in table order.

    ``parallel > 1`` trains rows in that many worker processes; each row
    keeps its own directory and seed, so results equal the sequential run.
    """
    rows = row_configs(base, axis)
    dirs = [None] * len(rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        dirs = [out_dir / f"{i}_{_slug(label)}" for i, (label, _) in enumerate(rows)]
        for d, (_, cfg) in zip(dirs, rows):
            d.mkdir(parents=True, exist_ok=True)
    args = [(label, cfg, axis, train_set, test_set, d, plugins) for (label, cfg), d in zip(rows, dirs)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(run_row, *zip(*args)))
    else:
        results = [run_row(*a) for a in args]
    report = AblationReport(axis, results)
    if out_dir is not None:
        report.save(out_dir / f"ablation_{axis}.json")
        (out_dir / "base_config.toml").write_text(dumps_config(base))
    return report
