"""Age translation accuracy, identity preservation, per-sample records and image grids."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .datapipe import (GROUP_LABELS, N_GROUPS, SKIN, DataError, FaceSample, SemanticLayout,
                       count_stripes, to_uint8)

VERIFICATION_THRESHOLD = 73.975

AgeEstimator = Callable[[np.ndarray, SemanticLayout], float]
IdentityScorer = Callable[..., float]  # (a, b) or (a, b, layout)


def synthetic_age_oracle(image: np.ndarray, layout: SemanticLayout) -> int:
    """Group estimate for synthetic faces: the forehead stripe count, capped at 3."""
    return min(count_stripes(image, layout), N_GROUPS - 1)


def region_ncc_score(a: np.ndarray, b: np.ndarray, layout: SemanticLayout | None = None) -> float:
    """100 x normalised cross-correlation over the facial parts other than skin and background.

    Without a layout the whole image is compared.
    """
    mask = None if layout is None else (layout.classes != SKIN) & (layout.classes != 0)
    if mask is None or not mask.any():
        mask = np.ones(np.shape(a)[1:], bool)
    u = np.asarray(a, np.float64)[:, mask].ravel()
    v = np.asarray(b, np.float64)[:, mask].ravel()
    u = u - u.mean()
    v = v - v.mean()
    denom = np.sqrt((u * u).sum() * (v * v).sum())
    if denom < 1e-12:
        return 100.0 if np.allclose(u, v) else 0.0
    return float(100.0 * (u * v).sum() / denom)


@dataclass
class EstimatorPlugins:
    age_estimator: AgeEstimator = synthetic_age_oracle
    identity_scorer: IdentityScorer = region_ncc_score
    threshold: float = VERIFICATION_THRESHOLD


@dataclass
class SampleRecord:
    subject_id: int
    source_group: int
    target_group: int
    estimated_age: float
    identity_score: float | None = None
    kind: str = "generated"  # or "generic" for real images


def write_records(records: Iterable[SampleRecord], path: str | Path) -> Path:
    path = Path(path)
    try:
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write records to {path}: {exc}") from exc
    return path


def read_records(path: str | Path) -> list[SampleRecord]:
    with open(path) as fh:
        return [SampleRecord(**json.loads(line)) for line in fh if line.strip()]


def _stats(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def age_translation_accuracy(generated: Sequence[tuple[float, int]], generic: Sequence[tuple[float, int]],
                             groups: Sequence[int] = range(N_GROUPS)) -> dict[int, dict]:
    """Per-group mean/std of estimated ages for generated vs. generic faces.

    ``generated`` holds (estimate, target group) pairs and ``generic`` holds
    (estimate, annotated group) pairs. The error is generated mean minus
    generic mean; ``abs_error`` is its magnitude.
    """
    out = {}
    for g in groups:
        gen = [e for e, grp in generated if grp == g]
        ref = [e for e, grp in generic if grp == g]
        if not gen or not ref:
            raise DataError(f"age group {g} has no {'generated' if not gen else 'generic'} samples")
        gm, gs = _stats(gen)
        rm, rs = _stats(ref)
        out[g] = dict(generated_mean=gm, generated_std=gs, generic_mean=rm, generic_std=rs,
                      error=gm - rm, abs_error=abs(gm - rm), n_generated=len(gen), n_generic=len(ref))
    return out


def verification_rate(scores: Sequence[float], threshold: float = VERIFICATION_THRESHOLD) -> tuple[float, float]:
    """(verification rate in %, mean score) for already-computed pair scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise DataError("no identity scores")
    return float(100.0 * (scores >= threshold).mean()), float(scores.mean())


def score_pairs(inputs: Sequence[np.ndarray], outputs: Sequence[np.ndarray],
                scorer: IdentityScorer = region_ncc_score,
                layouts: Sequence[SemanticLayout] | None = None) -> list[float]:
    if len(inputs) != len(outputs) or (layouts is not None and len(layouts) != len(inputs)):
        raise DataError(f"length mismatch: {len(inputs)} inputs, {len(outputs)} outputs"
                        + ("" if layouts is None else f", {len(layouts)} layouts"))
    if layouts is None:
        return [float(scorer(a, b)) for a, b in zip(inputs, outputs)]
    return [float(scorer(a, b, lay)) for a, b, lay in zip(inputs, outputs, layouts)]


def identity_preservation(inputs: Sequence[np.ndarray], outputs: Sequence[np.ndarray],
                          scorer: IdentityScorer = region_ncc_score, threshold: float = VERIFICATION_THRESHOLD,
                          layouts: Sequence[SemanticLayout] | None = None) -> tuple[float, float]:
    """(rate %, mean score) of aligned input/output pairs under ``scorer``."""
    return verification_rate(score_pairs(inputs, outputs, scorer, layouts), threshold)


def format_identity(rate: float, mean: float) -> str:
    return f"{rate:.2f} ({mean:.2f})"


@dataclass
class EvalReport:
    groups: dict
    identity_rate: float | None
    identity_mean: float | None
    threshold: float
    counts: dict = field(default_factory=dict)

    @property
    def mean_abs_error(self) -> float:
        return float(np.mean([g["abs_error"] for g in self.groups.values()]))

    def to_dict(self) -> dict:
        return dict(groups={str(k): v for k, v in self.groups.items()}, identity_rate=self.identity_rate,
                    identity_mean=self.identity_mean, threshold=self.threshold, counts=self.counts,
                    mean_abs_error=self.mean_abs_error)

    def table(self) -> str:
        """Text table laid out like the per-group age results (Generic / Generated / Error)."""
        keys = sorted(self.groups)
        header = ["Age Group"] + [GROUP_LABELS[k] for k in keys]
        rows = [header,
                ["Generic"] + [f"{self.groups[k]['generic_mean']:.2f} ± {self.groups[k]['generic_std']:.2f}" for k in keys],
                ["Generated"] + [f"{self.groups[k]['generated_mean']:.2f} ± {self.groups[k]['generated_std']:.2f}" for k in keys],
                ["Absolute Error"] + [f"{self.groups[k]['error']:+.2f}" for k in keys]]
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        if self.identity_rate is not None:
            lines.append(f"Identity Verification Rate: {format_identity(self.identity_rate, self.identity_mean)}"
                         f" @ threshold {self.threshold}")
        return "\n".join(lines)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        path.with_suffix(".txt").write_text(self.table() + "\n")
        return path


def report_from_records(records: Sequence[SampleRecord], threshold: float = VERIFICATION_THRESHOLD) -> EvalReport:
    """Aggregate an :class:`EvalReport` from per-sample records alone."""
    generated = [(r.estimated_age, r.target_group) for r in records if r.kind == "generated"]
    generic = [(r.estimated_age, r.target_group) for r in records if r.kind == "generic"]
    present = sorted({g for _, g in generated} & {g for _, g in generic})
    groups = age_translation_accuracy(generated, generic, present)
    scores = [r.identity_score for r in records if r.kind == "generated" and r.identity_score is not None]
    rate, mean = verification_rate(scores, threshold) if scores else (None, None)
    counts = dict(generated=len(generated), generic=len(generic), scored=len(scores))
    return EvalReport(groups, rate, mean, threshold, counts)


# ---------------------------------------------------------------- translation

def route(source_group: int, target_group: int) -> str:
    """Which generator serves a translation: progressor up, regressor down, self path when equal."""
    if target_group > source_group:
        return "progress"
    if target_group < source_group:
        return "regress"
    return "self"


def translate(models, samples: Sequence[FaceSample], target_group: int, noise_seed: int = 0,
              batch_size: int = 16) -> list[np.ndarray]:
    """Translate every sample to ``target_group`` with the generator its route selects.

    Equal source and target groups go through the self-reconstruction path of
    the progressor for groups below the top one, and of the regressor for the
    top group (the progressor never targets its own input group otherwise).
    """
    outputs: list[np.ndarray | None] = [None] * len(samples)
    by_gen: dict[str, list[int]] = {"g_p": [], "g_r": []}
    for i, s in enumerate(samples):
        r = route(s.condition.group, target_group)
        use_p = r == "progress" or (r == "self" and target_group < N_GROUPS - 1)
        by_gen["g_p" if use_p else "g_r"].append(i)
    dtype = next(models.parameters()).dtype
    models.eval()
    with torch.no_grad():
        for name, idx in by_gen.items():
            gen = getattr(models, name)
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                x = torch.from_numpy(np.stack([samples[i].image for i in chunk])).to(dtype)
                seg = torch.from_numpy(np.stack([samples[i].layout.onehot for i in chunk])).to(dtype)
                tgt = torch.full((len(chunk),), target_group, dtype=torch.long)
                out = gen(x, seg, tgt, noise_seed + start).image
                for j, i in enumerate(chunk):
                    outputs[i] = out[j].numpy()
    return outputs


def evaluate(models, samples: Sequence[FaceSample], plugins: EstimatorPlugins | None = None,
             targets: Sequence[int] = range(N_GROUPS), noise_seed: int = 0) -> tuple[EvalReport, list[SampleRecord]]:
    """Translate ``samples`` to every target group and score the results."""
    plugins = plugins or EstimatorPlugins()
    records = [SampleRecord(s.meta.identity_id, s.condition.group, s.condition.group,
                            float(plugins.age_estimator(s.image, s.layout)), None, "generic") for s in samples]
    for target in targets:
        outs = translate(models, samples, target, noise_seed)
        for s, out in zip(samples, outs):
            records.append(SampleRecord(s.meta.identity_id, s.condition.group, target,
                                        float(plugins.age_estimator(out, s.layout)),
                                        float(plugins.identity_scorer(s.image, out, s.layout))))
    return report_from_records(records, plugins.threshold), records


def stripe_accuracy(records: Sequence[SampleRecord]) -> float:
    """Fraction of generated records whose estimate equals the target group."""
    gen = [r for r in records if r.kind == "generated"]
    return float(np.mean([round(r.estimated_age) == r.target_group for r in gen]))


# ---------------------------------------------------------------- grids

GRID_MARGIN = 2


def grid_size(h: int, w: int, rows: int = 1, cols: int = 1 + N_GROUPS, margin: int = GRID_MARGIN) -> tuple[int, int]:
    """(height, width) in pixels of a grid of ``rows`` x ``cols`` tiles."""
    return rows * h + (rows + 1) * margin, cols * w + (cols + 1) * margin


def compose_grid(source: np.ndarray, translations: Sequence[np.ndarray], margin: int = GRID_MARGIN) -> Image.Image:
    tiles = [source, *translations]
    h, w = source.shape[1:]
    if any(t.shape != source.shape for t in tiles):
        raise DataError("all grid images must share dimensions")
    height, width = grid_size(h, w, 1, len(tiles), margin)
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    for i, tile in enumerate(tiles):
        canvas.paste(Image.fromarray(to_uint8(tile)), (margin + i * (w + margin), margin))
    # red frame marks the input face
    ImageDraw.Draw(canvas).rectangle([margin - 1, margin - 1, margin + w, margin + h], outline=(255, 0, 0))
    return canvas


def emit_grids(inputs: Sequence[np.ndarray], translations: Sequence[Sequence[np.ndarray]], path: str | Path,
               names: Sequence[str] | None = None) -> list[Path]:
    """Write one PNG per subject: the input followed by its per-group translations."""
    path = Path(path)
    if len(inputs) != len(translations):
        raise DataError("need one translation row per input")
    written = []
    if not inputs:
        return written
    path.mkdir(parents=True, exist_ok=True)
    for i, (src, row) in enumerate(zip(inputs, translations)):
        target = path / f"{names[i] if names else f'subject_{i:04d}'}.png"
        try:
            compose_grid(src, row).save(target)
        except OSError as exc:
            raise OSError(f"cannot write grid {target}: {exc}") from exc
        written.append(target)
    return written
