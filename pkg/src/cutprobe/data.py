"""Dataset ingestion, subject-disjoint splitting, preprocessing, and the
synthetic texture generator.

Images never leak across splits: the split is decided per subject, and
every record inherits its subject's assignment. The synthetic generator
produces three procedurally distinct texture families so a desk-scale
dataset with real class structure exists without any external data.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

SPLIT_NAMES = ("train", "eval", "test")

_SUBJECT_TAG = 0xDA7A
_SPLIT_TAG = 0x5711


@dataclass
class ManifestRecord:
    path: Path  # resolved absolute path
    image_id: str  # path string as written in the manifest
    subject_id: str
    class_label: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    class_names: list[str]
    root: Path

    def label_index(self, class_label: str) -> int:
        return self.class_names.index(class_label)

    def subjects(self) -> list[str]:
        """Subject ids in first-appearance order."""
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.subject_id, None)
        return list(seen)


@dataclass
class SplitAssignment:
    by_subject: dict[str, str]
    achieved_fractions: dict[str, float]

    def split_of(self, record: ManifestRecord) -> str:
        return self.by_subject[record.subject_id]


def load_manifest(path, class_names: list[str] | None = None) -> DatasetManifest:
    """Parse a `path,subject_id,class` CSV; relative paths resolve against
    the manifest's directory.

    With ``class_names`` given, rows naming any other class are rejected;
    otherwise classes are collected in first-appearance order.
    """
    path = Path(path)
    root = path.parent.resolve()
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest '{path}': {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        raise DataError(f"manifest '{path}' is empty")
    header = [h.strip() for h in rows[0]]
    if header != ["path", "subject_id", "class"]:
        raise DataError(
            f"manifest '{path}': expected header 'path,subject_id,class', got {rows[0]}"
        )
    declared = list(class_names) if class_names is not None else None
    names: list[str] = list(declared or [])
    records: list[ManifestRecord] = []
    seen_paths: set[str] = set()
    for row_no, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise DataError(f"manifest row {row_no}: expected 3 fields, got {len(row)}")
        rel, subject, label = (f.strip() for f in row)
        if not rel:
            raise DataError(f"manifest row {row_no}: empty path")
        if not subject:
            raise DataError(f"manifest row {row_no}: empty subject_id")
        if not label:
            raise DataError(f"manifest row {row_no}: empty class")
        if rel in seen_paths:
            raise DataError(f"manifest row {row_no}: duplicate path '{rel}'")
        seen_paths.add(rel)
        if label not in names:
            if declared is not None:
                raise DataError(
                    f"manifest row {row_no}: unknown class '{label}', "
                    f"expected one of {names}"
                )
            names.append(label)
        records.append(ManifestRecord(root / rel, rel, subject, label))
    if not records:
        raise DataError(f"manifest '{path}' has no data rows")
    return DatasetManifest(records=records, class_names=names, root=root)


def split_by_subject(
    manifest: DatasetManifest,
    fractions: tuple[float, float, float] = (0.83, 0.07, 0.10),
    seed: int = 0,
) -> SplitAssignment:
    """Greedy subject-level partition into train/eval/test.

    Subjects are taken in descending image count (ties broken by a seeded
    shuffle) and each goes to the split with the largest remaining
    shortfall against its target fraction. Disjointness is by construction:
    a subject is assigned exactly once.
    """
    if len(fractions) != len(SPLIT_NAMES):
        raise DataError(f"expected {len(SPLIT_NAMES)} fractions, got {len(fractions)}")
    if min(fractions) <= 0:
        raise DataError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {fractions} (sum {sum(fractions)})")
    subjects = manifest.subjects()
    if len(subjects) < len(SPLIT_NAMES):
        raise DataError(
            f"need at least {len(SPLIT_NAMES)} subjects for subject-disjoint "
            f"splitting, got {len(subjects)}"
        )
    counts = {s: 0 for s in subjects}
    for r in manifest.records:
        counts[r.subject_id] += 1
    total = len(manifest.records)

    rng = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_TAG]))
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    ordered = sorted(shuffled, key=lambda s: -counts[s])  # stable: shuffle breaks ties

    assigned = {name: 0 for name in SPLIT_NAMES}
    by_subject: dict[str, str] = {}
    for subject in ordered:
        shortfalls = [fractions[i] * total - assigned[name] for i, name in enumerate(SPLIT_NAMES)]
        target = SPLIT_NAMES[int(np.argmax(shortfalls))]
        by_subject[subject] = target
        assigned[target] += counts[subject]
    achieved = {name: assigned[name] / total for name in SPLIT_NAMES}
    return SplitAssignment(by_subject=by_subject, achieved_fractions=achieved)


def load_split_file(path) -> dict[str, str]:
    """Parse an explicit `subject_id,split` CSV."""
    path = Path(path)
    try:
        rows = list(csv.reader(io.StringIO(path.read_text(encoding="utf-8"))))
    except OSError as exc:
        raise DataError(f"cannot read split file '{path}': {exc}") from exc
    if not rows or [h.strip() for h in rows[0]] != ["subject_id", "split"]:
        raise DataError(f"split file '{path}': expected header 'subject_id,split'")
    by_subject: dict[str, str] = {}
    for row_no, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 2:
            raise DataError(f"split file row {row_no}: expected 2 fields, got {len(row)}")
        subject, split = (f.strip() for f in row)
        if split not in SPLIT_NAMES:
            raise DataError(
                f"split file row {row_no}: split '{split}' not in {SPLIT_NAMES}"
            )
        if subject in by_subject:
            raise DataError(f"split file row {row_no}: duplicate subject '{subject}'")
        by_subject[subject] = split
    return by_subject


def apply_split(manifest: DatasetManifest, by_subject: dict[str, str]) -> SplitAssignment:
    """Turn an explicit subject->split map into a validated assignment."""
    missing = [s for s in manifest.subjects() if s not in by_subject]
    if missing:
        raise DataError(f"split file does not cover subjects: {missing}")
    counts = {name: 0 for name in SPLIT_NAMES}
    for r in manifest.records:
        counts[by_subject[r.subject_id]] += 1
    total = len(manifest.records)
    achieved = {name: counts[name] / total for name in SPLIT_NAMES}
    relevant = {s: by_subject[s] for s in manifest.subjects()}
    return SplitAssignment(by_subject=relevant, achieved_fractions=achieved)


def split_records(
    manifest: DatasetManifest, assignment: SplitAssignment
) -> dict[str, list[ManifestRecord]]:
    """Per-split record lists, manifest order preserved."""
    out: dict[str, list[ManifestRecord]] = {name: [] for name in SPLIT_NAMES}
    for r in manifest.records:
        out[assignment.split_of(r)].append(r)
    return out


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of (H,W) or (H,W,C) to (out_h,out_w[,C]).

    Half-pixel center convention: source coordinate of output pixel j is
    (j + 0.5) * in/out - 0.5, clamped to the image. At identical sizes the
    mapping is exact and the output equals the input.
    """
    if img.ndim not in (2, 3):
        raise DataError(f"bilinear_resize expects (H,W) or (H,W,C), got shape {img.shape}")
    h, w = img.shape[:2]
    src = img.astype(np.float64)

    def axis_coords(n_in: int, n_out: int):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    r0, r1, rf = axis_coords(h, out_h)
    c0, c1, cf = axis_coords(w, out_w)
    rf = rf[:, None] if img.ndim == 2 else rf[:, None, None]
    cf = cf[None, :] if img.ndim == 2 else cf[None, :, None]
    top = src[r0][:, c0] * (1 - cf) + src[r0][:, c1] * cf
    bottom = src[r1][:, c0] * (1 - cf) + src[r1][:, c1] * cf
    return (top * (1 - rf) + bottom * rf).astype(np.float32)


def decode_image(image_bytes: bytes) -> np.ndarray:
    """Decode 8-bit grayscale or RGB bytes to float32 in [0,1].

    Returns (H,W) for grayscale, (H,W,3) for color.
    """
    try:
        img = Image.open(io.BytesIO(image_bytes))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image: {exc}") from exc
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise DataError(f"unsupported bit depth (mode '{img.mode}'); expected 8-bit")
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float32)
        return arr / np.float32(255.0)
    if img.mode != "RGB":
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float32)
    return arr / np.float32(255.0)


def preprocess_image(
    image_bytes: bytes,
    target: tuple[int, int, int],
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
) -> np.ndarray:
    """Decode, resize, replicate grayscale to 3 channels, normalize.

    Output is (C,H,W) float32 matching ``target``.
    """
    c, h, w = target
    if c != 3:
        raise DataError(f"preprocessing targets 3-channel inputs, got target {target}")
    img = decode_image(image_bytes)
    img = bilinear_resize(img, h, w)
    if img.ndim == 2:
        img = np.repeat(img[None, :, :], 3, axis=0)
    else:
        img = img.transpose(2, 0, 1)
    mean_arr = np.asarray(mean, dtype=np.float32)[:, None, None]
    std_arr = np.asarray(std, dtype=np.float32)[:, None, None]
    return ((img - mean_arr) / std_arr).astype(np.float32)


@dataclass
class ImageSample:
    """A preprocessed image with its identity, ready for feature extraction."""

    image_id: str
    subject_id: str
    label: int
    pixels: np.ndarray


def iter_samples(
    manifest: DatasetManifest,
    target: tuple[int, int, int],
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
    records: list[ManifestRecord] | None = None,
):
    """Yield ImageSamples in manifest order (or the given record order)."""
    for r in records if records is not None else manifest.records:
        try:
            raw = r.path.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read image '{r.path}': {exc}") from exc
        try:
            pixels = preprocess_image(raw, target, mean, std)
        except DataError as exc:
            raise DataError(f"image '{r.image_id}': {exc}") from exc
        yield ImageSample(r.image_id, r.subject_id, manifest.label_index(r.class_label), pixels)


# --- synthetic texture dataset -------------------------------------------

SYNTHETIC_CLASSES = ("cell_mosaic", "filament", "granular")


@dataclass
class SubjectStyle:
    """Per-subject texture parameters; images cluster by subject."""

    orientation: float
    blob_density: float
    brightness: float


def _subject_style(seed: int, subject_idx: int) -> SubjectStyle:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SUBJECT_TAG, subject_idx]))
    return SubjectStyle(
        orientation=float(rng.uniform(0.0, math.pi)),
        blob_density=float(rng.uniform(8.0, 16.0)),
        brightness=float(rng.normal(0.0, 4.0)),
    )


def _render_cell_mosaic(rng, size: int, style: SubjectStyle) -> np.ndarray:
    img = rng.normal(45.0 + style.brightness, 6.0, size=(size, size))
    n_blobs = max(1, int(round(style.blob_density * (size / 64.0) ** 2)))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, size=2)
        radius = rng.uniform(2.5, 5.5)
        intensity = rng.uniform(140.0, 220.0)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        img += intensity * np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))
    return img


def _render_filament(rng, size: int, style: SubjectStyle) -> np.ndarray:
    img = np.full((size, size), 95.0 + style.brightness)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(3):
        theta = style.orientation + rng.normal(0.0, 0.15)
        freq = rng.uniform(0.08, 0.25)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        coord = xx * math.cos(theta) + yy * math.sin(theta)
        img += rng.uniform(18.0, 32.0) * np.sin(2.0 * math.pi * freq * coord + phase)
    img += rng.normal(0.0, 10.0, size=(size, size))
    return img


def _render_granular(rng, size: int, style: SubjectStyle) -> np.ndarray:
    return rng.normal(155.0 + style.brightness, 28.0, size=(size, size))


_RENDERERS = {
    "cell_mosaic": _render_cell_mosaic,
    "filament": _render_filament,
    "granular": _render_granular,
}


def generate_synthetic(
    out_dir,
    subjects: int = 11,
    images_per_subject: int = 30,
    size: int = 64,
    seed: int = 0,
    total_images: int | None = None,
) -> Path:
    """Write a three-class synthetic texture dataset and its manifest.

    With ``total_images`` the count is spread as evenly as possible over
    subjects (earlier subjects take the remainder). Deterministic per seed
    down to the PNG bytes. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    if total_images is not None:
        base, extra = divmod(total_images, subjects)
        per_subject = [base + (1 if i < extra else 0) for i in range(subjects)]
    else:
        per_subject = [images_per_subject] * subjects
    rows = []
    for subj_idx in range(subjects):
        subject_id = f"subj{subj_idx + 1:02d}"
        style = _subject_style(seed, subj_idx)
        for img_idx in range(per_subject[subj_idx]):
            class_label = SYNTHETIC_CLASSES[img_idx % len(SYNTHETIC_CLASSES)]
            rng = np.random.default_rng(np.random.SeedSequence([seed, subj_idx, img_idx]))
            pixels = _RENDERERS[class_label](rng, size, style)
            arr = np.clip(pixels, 0.0, 255.0).astype(np.uint8)
            name = f"{subject_id}_{img_idx:04d}_{class_label}.png"
            Image.fromarray(arr, mode="L").save(image_dir / name, format="PNG")
            rows.append((f"images/{name}", subject_id, class_label))
    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "subject_id", "class"])
        writer.writerows(rows)
    return manifest_path
