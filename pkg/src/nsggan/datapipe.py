"""Data handling: semantic layouts, age conditions, noise, pair sampling and
the procedural synthetic face set used for desk-scale runs."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

N_CLASSES = 12
CLASS_NAMES = (
    "background", "skin", "eyebrows", "eyes", "ears", "glasses",
    "nose", "lips", "inner_mouth", "hair", "neck", "cloth",
)
SKIN, EYES, LIPS, INNER_MOUTH = 1, 3, 7, 8
DEFAULT_DROP_CLASSES = (EYES, LIPS, INNER_MOUTH)

N_GROUPS = 4
GROUP_LABELS = ("30-", "31-40", "41-50", "51+")
MIN_AGE, MAX_AGE = 16.0, 77.0
# 30- starts at the youngest annotated age, 51+ ends at the oldest
GROUP_BOUNDS = ((MIN_AGE, 30.0), (31.0, 40.0), (41.0, 50.0), (51.0, MAX_AGE))
GROUP_MIDPOINTS = tuple((lo + hi) / 2 for lo, hi in GROUP_BOUNDS)

# CelebAMask-HQ / BiSeNet parsing ids -> merged classes
BISENET_MAPPING = {
    0: 0,    # background
    1: 1,    # skin
    2: 2, 3: 2,    # l/r brow
    4: 3, 5: 3,    # l/r eye
    6: 5,    # eyeglasses
    7: 4, 8: 4, 9: 4,    # l/r ear, earring
    10: 6,   # nose
    11: 8,   # mouth interior
    12: 7, 13: 7,  # upper/lower lip
    14: 10, 15: 10,  # neck, necklace
    16: 11,  # cloth
    17: 9, 18: 9,  # hair, hat
}


class DataError(ValueError):
    """Raised for malformed or insufficient input data."""


class UnknownLabelError(DataError):
    def __init__(self, label: int):
        super().__init__(f"raw label {label} has no entry in the class mapping")
        self.label = label


class InsufficientDataError(DataError):
    pass


def check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate a [3, H, W] image with values in [-1, 1]."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"{name} must have shape [3, H, W], got {image.shape}")
    check_size(image.shape[1], image.shape[2])
    if not np.all(np.isfinite(image)) or image.min() < -1.0 or image.max() > 1.0:
        raise DataError(f"{name} values must be finite and lie in [-1, 1]")
    return image


def check_size(h: int, w: int) -> None:
    for n in (h, w):
        if n < 32 or n & (n - 1):
            raise DataError(f"image sides must be powers of two >= 32, got {h}x{w}")


def check_group(group: int) -> int:
    if int(group) != group or not 0 <= group < N_GROUPS:
        raise DataError(f"age group must be in 0..{N_GROUPS - 1}, got {group}")
    return int(group)


def group_of_age(age: float) -> int:
    if age <= 30:
        return 0
    if age <= 40:
        return 1
    if age <= 50:
        return 2
    return 3


@dataclass(frozen=True)
class SemanticLayout:
    """Per-pixel merged class ids; ``onehot`` is derived on demand."""

    classes: np.ndarray

    def __post_init__(self):
        classes = np.asarray(self.classes)
        if classes.ndim != 2:
            raise DataError(f"layout must be 2-D, got shape {classes.shape}")
        if classes.size and (classes.min() < 0 or classes.max() >= N_CLASSES):
            raise DataError("layout class ids must lie in 0..11")
        object.__setattr__(self, "classes", classes.astype(np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    @property
    def onehot(self) -> np.ndarray:
        return np.eye(N_CLASSES, dtype=np.float32)[self.classes].transpose(2, 0, 1)


@dataclass(frozen=True)
class AgeCondition:
    group: int
    onehot_maps: np.ndarray
    normalized_age: float


@dataclass(frozen=True)
class NoiseMap:
    data: np.ndarray
    seed: int


def merge_parsing(raw_labels: np.ndarray, mapping: Mapping[int, int] = BISENET_MAPPING) -> SemanticLayout:
    """Remap raw parsing ids onto the 12 merged classes."""
    raw = np.asarray(raw_labels)
    if raw.ndim != 2:
        raise DataError(f"raw label map must be 2-D, got shape {raw.shape}")
    for target in mapping.values():
        if not 0 <= target < N_CLASSES:
            raise DataError(f"mapping target {target} is outside 0..11")
    present = np.unique(raw)
    for label in present:
        if int(label) not in mapping:
            raise UnknownLabelError(int(label))
    lut = np.zeros(int(present.max()) + 1 if present.size else 1, dtype=np.int64)
    for label in present:
        lut[int(label)] = mapping[int(label)]
    return SemanticLayout(lut[raw])


def normalized_age(age: float) -> float:
    return float(age) / MAX_AGE


def make_condition(group: int, h: int, w: int) -> AgeCondition:
    group = check_group(group)
    maps = np.zeros((N_GROUPS, h, w), dtype=np.float32)
    maps[group] = 1.0
    return AgeCondition(group, maps, normalized_age(GROUP_MIDPOINTS[group]))


def sample_noise(h: int, w: int, seed: int) -> NoiseMap:
    gen = torch.Generator().manual_seed(int(seed))
    data = torch.randn((1, h, w), generator=gen, dtype=torch.float32).numpy()
    return NoiseMap(data, int(seed))


def keep_mask(drop_classes: Sequence[int] = DEFAULT_DROP_CLASSES) -> np.ndarray:
    keep = np.ones(N_CLASSES, dtype=np.float32)
    keep[list(drop_classes)] = 0.0
    return keep


def apply_noise(layout: SemanticLayout, noise: NoiseMap | np.ndarray,
                drop_classes: Sequence[int] = DEFAULT_DROP_CLASSES) -> np.ndarray:
    """Multiply every semantic channel by the shared noise map and blank the dropped classes."""
    data = noise.data if isinstance(noise, NoiseMap) else np.asarray(noise, dtype=np.float32)
    if data.shape != (1, *layout.shape):
        raise DataError(f"noise shape {data.shape} does not match layout {layout.shape}")
    return layout.onehot * data * keep_mask(drop_classes)[:, None, None]


class SampleInfo(NamedTuple):
    identity_id: int
    group: int
    age: float | None = None
    path: str | None = None


@dataclass(frozen=True)
class SyntheticFaceSpec:
    identity_id: int
    group: int
    wrinkle_count: int
    center_x: float
    center_y: float
    face_a: float
    face_b: float
    eye_dx: float
    lip_a: float
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    cloth: tuple[float, float, float]
    background: float

    @property
    def age(self) -> float:
        return GROUP_MIDPOINTS[self.group]


class FaceSample(NamedTuple):
    image: np.ndarray
    layout: SemanticLayout
    condition: AgeCondition
    meta: SyntheticFaceSpec | SampleInfo


def _identity_geometry(identity_id: int, seed: int) -> dict:
    rng = np.random.default_rng([seed, identity_id])
    tone = rng.uniform(0.05, 0.55)
    hair_level = rng.choice([rng.uniform(-0.95, -0.6), rng.uniform(0.6, 0.9)])
    return dict(
        center_x=32.0 + rng.uniform(-1.5, 1.5),
        center_y=34.0 + rng.uniform(-1.0, 1.0),
        face_a=19.0 * rng.uniform(0.93, 1.07),
        face_b=25.0 * rng.uniform(0.95, 1.05),
        eye_dx=7.5 * rng.uniform(0.92, 1.08),
        lip_a=5.5 * rng.uniform(0.85, 1.15),
        skin=(min(tone + 0.15, 1.0), tone, tone - 0.1),
        hair=(hair_level, hair_level * 0.9, hair_level * 0.8),
        cloth=tuple(float(c) for c in rng.uniform(-0.8, 0.8, size=3)),
        background=float(rng.uniform(-0.3, 0.3)),
    )


def wrinkle_rows(spec: SyntheticFaceSpec, h: int) -> list[tuple[int, int]]:
    """Pixel row spans [start, stop) of the forehead stripes for ``spec`` at height ``h``."""
    s = h / 64.0
    thick = max(1, round(2 * s))
    step = max(thick + 1, round(4.5 * s))
    top = round((spec.center_y - spec.face_b + 5.0) * s)
    return [(top + j * step, top + j * step + thick) for j in range(spec.wrinkle_count)]


def render_face(spec: SyntheticFaceSpec, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Paint one synthetic face; returns (image [3,H,H], class ids [H,H])."""
    s = h / 64.0
    yy, xx = np.mgrid[0:h, 0:h].astype(np.float64)
    yy = (yy + 0.5) / s
    xx = (xx + 0.5) / s
    cx, cy, a, b = spec.center_x, spec.center_y, spec.face_a, spec.face_b

    def ellipse(x0, y0, ax, by):
        return ((xx - x0) / ax) ** 2 + ((yy - y0) / by) ** 2 <= 1.0

    classes = np.zeros((h, h), dtype=np.int64)
    image = np.empty((3, h, h), dtype=np.float64)
    image[:] = spec.background
    skin = np.array(spec.skin)
    hair = np.array(spec.hair)

    def paint(mask, cls, color):
        classes[mask] = cls
        image[:, mask] = np.asarray(color, dtype=np.float64)[:, None]

    paint((yy >= 56) & (np.abs(xx - cx) < 26), 11, spec.cloth)
    paint((np.abs(xx - cx) < 0.45 * a) & (yy >= cy + 0.6 * b) & (yy < 57), 10, skin - 0.1)
    paint(ellipse(cx, cy - 4, a + 3, b + 3) & (yy < cy + 2), 9, hair)
    for side in (-1, 1):
        paint(ellipse(cx + side * a, cy + 1, 2.5, 4.5), 4, skin - 0.05)
    paint(ellipse(cx, cy, a, b), 1, skin)
    ey = cy + 1.0
    for side in (-1, 1):
        ex = cx + side * spec.eye_dx
        paint((np.abs(xx - ex) < 3.5) & (yy >= ey - 5.5) & (yy < ey - 3.5), 2, hair)
        paint(ellipse(ex, ey, 3.0, 1.6), 3, (-0.7, -0.7, -0.6))
    paint((np.abs(xx - cx) < 1.6) & (yy >= ey + 3) & (yy < ey + 10), 6, skin - 0.15)
    ly = cy + 15.0
    paint(ellipse(cx, ly, spec.lip_a, 2.2), 7, (0.6, -0.2, -0.2))
    paint(ellipse(cx, ly, spec.lip_a - 1.0, 0.6), 8, (-0.6, -0.6, -0.6))

    skin_mask = classes == SKIN
    for start, stop in wrinkle_rows(spec, h):
        for row in range(start, stop):
            # local half width of the face ellipse at this row
            dy = ((row + 0.5) / s - cy) / b
            half = a * math.sqrt(max(0.0, 1.0 - dy * dy))
            band = np.abs(xx[row] - cx) < 0.8 * half
            cols = band & skin_mask[row]
            image[:, row, cols] = (skin - 0.55)[:, None]
    return np.clip(image, -1.0, 1.0).astype(np.float32), classes


def generate_synthetic_dataset(n_identities: int, groups_per_identity: Sequence[int] = (0, 1, 2, 3),
                               h: int = 64, seed: int = 0) -> list[FaceSample]:
    """Render ``n_identities`` faces at every requested age group.

    The only age signal is the number of forehead stripes, which equals the
    group index. Geometry and colours depend on (seed, identity) alone, so the
    renders of one identity differ only inside the stripe rows.
    """
    if n_identities < 1:
        raise DataError("n_identities must be >= 1")
    check_size(h, h)
    samples = []
    for identity in range(n_identities):
        geometry = _identity_geometry(identity, seed)
        for group in groups_per_identity:
            group = check_group(group)
            spec = SyntheticFaceSpec(identity_id=identity, group=group, wrinkle_count=group, **geometry)
            image, classes = render_face(spec, h)
            samples.append(FaceSample(image, SemanticLayout(classes), make_condition(group, h, h), spec))
    return samples


def count_stripes(image: np.ndarray, layout: SemanticLayout, contrast: float = 0.3,
                  row_fraction: float = 0.5, min_pixels: int = 4) -> int:
    """Count dark horizontal runs inside the (eroded) skin region."""
    lum = np.asarray(image, dtype=np.float32).mean(axis=0)
    skin = ndimage.binary_erosion(layout.classes == SKIN, structure=np.ones((3, 3), bool))
    if skin.sum() < min_pixels:
        return 0
    reference = np.median(lum[skin])
    dark = (lum < reference - contrast) & skin
    per_row = skin.sum(axis=1)
    is_stripe = (per_row >= min_pixels) & (dark.sum(axis=1) >= row_fraction * np.maximum(per_row, 1))
    runs = np.diff(np.concatenate([[0], is_stripe.astype(np.int8)]))
    return int((runs == 1).sum())


def sample_age(sample: FaceSample) -> float:
    age = getattr(sample.meta, "age", None)
    return GROUP_MIDPOINTS[sample.condition.group] if age is None else float(age)


@dataclass
class FacePairBatch:
    young: list[FaceSample]
    old: list[FaceSample]

    def __post_init__(self):
        if len(self.young) != len(self.old):
            raise DataError("young and old sides must have equal length")
        for y, o in zip(self.young, self.old):
            if not y.condition.group < o.condition.group:
                raise DataError("every pair needs young.group < old.group")

    @property
    def batch_size(self) -> int:
        return len(self.young)

    def tensors(self) -> dict[str, torch.Tensor]:
        """Stack the batch into model-ready tensors."""
        out = {}
        for side, samples in (("y", self.young), ("o", self.old)):
            out[f"x_{side}"] = torch.from_numpy(np.stack([s.image for s in samples]))
            out[f"seg_{side}"] = torch.from_numpy(np.stack([s.layout.onehot for s in samples]))
            out[f"g_{side}"] = torch.tensor([s.condition.group for s in samples], dtype=torch.long)
            out[f"age_{side}"] = torch.tensor([normalized_age(sample_age(s)) for s in samples],
                                              dtype=torch.float32)
        return out


def make_pair_batches(dataset: Sequence[FaceSample], batch_size: int, seed: int,
                      epoch: int = 0) -> Iterator[FacePairBatch]:
    """Yield one epoch of (younger, older) pairs.

    Every image is visited as an anchor in a seeded order; an anchor not yet
    covered is paired with a random partner from a different group, preferring
    partners that are also uncovered.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    groups = np.array([s.condition.group for s in dataset], dtype=np.int64)
    if groups.size == 0 or groups.min() == groups.max():
        raise InsufficientDataError("pairing needs images in at least two different age groups")
    rng = np.random.default_rng([seed, epoch])
    covered = np.zeros(len(dataset), dtype=bool)
    pairs = []
    for anchor in rng.permutation(len(dataset)):
        if covered[anchor]:
            continue
        others = np.flatnonzero(groups != groups[anchor])
        fresh = others[~covered[others]]
        partner = int(rng.choice(fresh if fresh.size else others))
        covered[[anchor, partner]] = True
        lo, hi = (anchor, partner) if groups[anchor] < groups[partner] else (partner, anchor)
        pairs.append((int(lo), int(hi)))
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        yield FacePairBatch([dataset[i] for i, _ in chunk], [dataset[j] for _, j in chunk])


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round((np.clip(image, -1, 1) + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0).clip(-1, 1)


def write_synthetic_dataset(samples: Sequence[FaceSample], root: str | Path, seed: int) -> Path:
    """Write ``root/<group>/<identity>_<index>.png`` plus ``_seg.png`` and a manifest."""
    root = Path(root)
    records = []
    counters: dict[tuple[int, int], int] = {}
    for sample in samples:
        meta = sample.meta
        key = (meta.group, meta.identity_id)
        index = counters.get(key, 0)
        counters[key] = index + 1
        folder = root / str(meta.group)
        folder.mkdir(parents=True, exist_ok=True)
        stem = f"{meta.identity_id}_{index}"
        image_path = folder / f"{stem}.png"
        seg_path = folder / f"{stem}_seg.png"
        try:
            Image.fromarray(to_uint8(sample.image), "RGB").save(image_path)
            Image.fromarray(sample.layout.classes.astype(np.uint8), "L").save(seg_path)
        except OSError as exc:
            raise OSError(f"cannot write sample to {folder}: {exc}") from exc
        record = dict(identity_id=meta.identity_id, group=meta.group, seed=seed,
                      image=str(image_path.relative_to(root)), seg=str(seg_path.relative_to(root)))
        if isinstance(meta, SyntheticFaceSpec):
            record["spec"] = asdict(meta)
        records.append(record)
    manifest = root / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def _load_labels(path: Path, mapping: Mapping[int, int] | None) -> SemanticLayout:
    raw = np.asarray(Image.open(path).convert("L"), dtype=np.int64)
    return SemanticLayout(raw) if mapping is None else merge_parsing(raw, mapping)


def load_image_folder(root: str | Path, mapping: Mapping[int, int] | None = None) -> list[FaceSample]:
    """Read pre-aligned faces from ``root/<group>/<identity>_<index>.png``.

    Each image needs a sibling ``<stem>_seg.png`` holding 8-bit class ids.
    With ``mapping=None`` the ids must already be merged classes; pass
    :data:`BISENET_MAPPING` (or another table) to merge raw parser output.
    When ``root/manifest.jsonl`` carries an ``age`` field it is used as the
    exact age annotation.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    ages = {}
    manifest = root / "manifest.jsonl"
    if manifest.exists():
        for line in manifest.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                if rec.get("age") is not None:
                    ages[rec["image"]] = float(rec["age"])
    samples = []
    for group_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if not group_dir.name.isdigit():
            continue
        group = check_group(int(group_dir.name))
        for path in sorted(group_dir.glob("*.png")):
            if path.stem.endswith("_seg"):
                continue
            seg = path.with_name(path.stem + "_seg.png")
            if not seg.exists():
                raise DataError(f"missing layout {seg} for image {path}")
            image = check_image(from_uint8(np.asarray(Image.open(path).convert("RGB"))), str(path))
            layout = _load_labels(seg, mapping)
            if layout.shape != image.shape[1:]:
                raise DataError(f"layout {seg} has shape {layout.shape}, image has {image.shape[1:]}")
            identity = path.stem.split("_")[0]
            rel = str(path.relative_to(root))
            info = SampleInfo(int(identity) if identity.isdigit() else zlib.crc32(identity.encode()),
                              group, ages.get(rel), rel)
            samples.append(FaceSample(image, layout, make_condition(group, *image.shape[1:]), info))
    if not samples:
        raise DataError(f"no images found under {root}")
    return samples


def split_by_identity(samples: Sequence[FaceSample], test_fraction: float = 0.2,
                      seed: int = 0) -> tuple[list[FaceSample], list[FaceSample]]:
    identities = sorted({s.meta.identity_id for s in samples})
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(len(identities) * test_fraction)))
    test_ids = set(rng.permutation(identities)[:n_test].tolist())
    train = [s for s in samples if s.meta.identity_id not in test_ids]
    test = [s for s in samples if s.meta.identity_id in test_ids]
    return train, test
