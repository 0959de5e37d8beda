"""YOLO labels, box conversion, cropping, splitting and manifest bookkeeping."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng
from .imaging import (
    DegenerateBoxError,
    DriftSpec,
    ImageBuffer,
    PPMError,
    _to_u8,
    load_ppm,
    write_ppm,
)

SPLITS = ("train", "test", "val")
CROP_SIZE = 64
RESIZE_METHOD = "bilinear-align-corners"

# pixel coordinates this close to an integer are snapped before outward rounding
SNAP_EPS = 1e-6


class ClassLabel(enum.IntEnum):
    round_30 = 0
    round_60 = 1
    round_90 = 2
    square_30 = 3
    square_60 = 4
    square_90 = 5
    stop = 6


NUM_CLASSES = len(ClassLabel)


class AnnotationError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizedBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("w", "h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} outside (0, 1]")


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-space box ``[x1, x2) x [y1, y2)``."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def as_tuple(self) -> tuple:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Annotation:
    class_id: ClassLabel
    box: NormalizedBox

    def to_line(self) -> str:
        b = self.box
        return f"{int(self.class_id)} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}"


def parse_annotation(text: str) -> list[Annotation]:
    """Parse a YOLO label file: one ``class cx cy w h`` per non-empty line."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise AnnotationError(lineno, f"expected 5 fields, got {len(fields)}")
        try:
            cid = int(fields[0])
        except ValueError:
            raise AnnotationError(lineno, f"class id {fields[0]!r} is not an integer") from None
        if not 0 <= cid < NUM_CLASSES:
            raise AnnotationError(lineno, f"class id {cid} outside [0, {NUM_CLASSES - 1}]")
        try:
            cx, cy, w, h = (float(f) for f in fields[1:])
        except ValueError:
            raise AnnotationError(lineno, "box values must be decimal numbers") from None
        if not all(math.isfinite(v) for v in (cx, cy, w, h)):
            raise AnnotationError(lineno, "box values must be finite")
        try:
            box = NormalizedBox(cx, cy, w, h)
        except ValueError as exc:
            raise AnnotationError(lineno, str(exc)) from None
        out.append(Annotation(ClassLabel(cid), box))
    return out


def format_annotations(annotations: Iterable[Annotation]) -> str:
    return "".join(a.to_line() + "\n" for a in annotations)


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < SNAP_EPS else v


def pixel_extent(box: NormalizedBox, width: int, height: int) -> BoundingBox:
    """Raw (unclamped, unrounded) pixel corners."""
    return BoundingBox(
        (box.cx - box.w / 2) * width,
        (box.cy - box.h / 2) * height,
        (box.cx + box.w / 2) * width,
        (box.cy + box.h / 2) * height,
    )


def denormalize(box: NormalizedBox, width: int, height: int) -> BoundingBox:
    """Pixel box from a normalized one: clamp to the image, then round outward."""
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    raw = pixel_extent(box, width, height)
    x1 = min(max(raw.x1, 0.0), width)
    x2 = min(max(raw.x2, 0.0), width)
    y1 = min(max(raw.y1, 0.0), height)
    y2 = min(max(raw.y2, 0.0), height)
    x1, y1 = math.floor(_snap(x1)), math.floor(_snap(y1))
    x2, y2 = math.ceil(_snap(x2)), math.ceil(_snap(y2))
    if x2 <= x1 or y2 <= y1:
        raise DegenerateBoxError(f"box {box} has zero extent on a {width}x{height} image")
    return BoundingBox(x1, y1, x2, y2)


def normalize(box: BoundingBox, width: int, height: int) -> NormalizedBox:
    w = (box.x2 - box.x1) / width
    h = (box.y2 - box.y1) / height
    return NormalizedBox((box.x1 + box.x2) / 2 / width, (box.y1 + box.y2) / 2 / height, w, h)


def crop(img: ImageBuffer, box: BoundingBox) -> ImageBuffer:
    x1, y1, x2, y2 = (int(v) for v in box.as_tuple())
    if (x1, y1, x2, y2) != box.as_tuple():
        raise ValueError(f"crop box must have integer corners, got {box}")
    if not (0 <= x1 < x2 <= img.width and 0 <= y1 < y2 <= img.height):
        raise ValueError(f"box {box.as_tuple()} out of bounds for {img.width}x{img.height} image")
    return ImageBuffer(img.pixels[y1:y2, x1:x2])


def resize(img: ImageBuffer, width: int, height: int) -> ImageBuffer:
    """Bilinear resize with corner-aligned sampling (corners map to corners)."""
    if (img.width, img.height) == (width, height):
        return ImageBuffer(img.pixels)

    def coords(n_out: int, n_in: int) -> np.ndarray:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    sx = coords(width, img.width)
    sy = coords(height, img.height)
    x0 = np.minimum(np.floor(sx).astype(int), img.width - 1)
    y0 = np.minimum(np.floor(sy).astype(int), img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    y1 = np.minimum(y0 + 1, img.height - 1)
    fx = (sx - x0)[None, :, None]
    fy = (sy - y0)[:, None, None]
    p = img.pixels.astype(np.float64)
    top = p[y0][:, x0] * (1 - fx) + p[y0][:, x1] * fx
    bottom = p[y1][:, x0] * (1 - fx) + p[y1][:, x1] * fx
    return ImageBuffer(_to_u8(top * (1 - fy) + bottom * fy))


def resize_64(img: ImageBuffer) -> ImageBuffer:
    return resize(img, CROP_SIZE, CROP_SIZE)


@dataclass
class ManifestEntry:
    image: str
    labels: str
    split: str
    drift: DriftSpec | None = None

    @property
    def stem(self) -> str:
        return Path(self.image).stem

    def to_dict(self) -> dict:
        d = {"image": self.image, "labels": self.labels, "split": self.split}
        if self.drift is not None:
            d["drift"] = self.drift.to_dict()
        return d


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int = 0
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"{e.image}: unknown split {e.split!r}")
            if e.drift is not None and e.split == "train":
                raise ManifestError(f"{e.image}: drifted entries cannot be in the train split")

    @property
    def counts(self) -> dict[str, int]:
        c = {s: 0 for s in SPLITS}
        for e in self.entries:
            c[e.split] += 1
        return c

    def select(self, split: str) -> list[ManifestEntry]:
        """Entries for ``split``; besides the three tags, accepts ``all``,
        ``drift`` (drifted entries) and ``standard`` (undrifted test entries)."""
        if split == "all":
            return list(self.entries)
        if split == "drift":
            return [e for e in self.entries if e.drift is not None]
        if split == "standard":
            return [e for e in self.entries if e.split == "test" and e.drift is None]
        if split not in SPLITS:
            raise ManifestError(f"unknown split selector {split!r}")
        return [e for e in self.entries if e.split == split]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "seed": self.seed,
            "counts": self.counts,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text: str, root: str | Path = ".") -> "DatasetManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from None
        extra = set(doc) - {"entries", "seed", "counts"}
        if extra:
            raise ManifestError(f"unknown manifest fields {sorted(extra)}")
        entries = []
        for k, d in enumerate(doc.get("entries", [])):
            unknown = set(d) - {"image", "labels", "split", "drift"}
            if unknown:
                raise ManifestError(f"entry {k}: unknown fields {sorted(unknown)}")
            try:
                drift = DriftSpec.from_dict(d["drift"]) if d.get("drift") else None
                entries.append(ManifestEntry(d["image"], d["labels"], d["split"], drift))
            except (KeyError, ValueError) as exc:
                raise ManifestError(f"entry {k}: {exc}") from None
        m = cls(entries, int(doc.get("seed", 0)), Path(root))
        if "counts" in doc and doc["counts"] != m.counts:
            raise ManifestError(f"counts {doc['counts']} disagree with entries {m.counts}")
        return m

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        return cls.loads(path.read_text(), root=path.parent)


def split_sizes(n: int, ratios: Sequence[float]) -> dict[str, int]:
    """Test and val sizes are ``n * ratio`` rounded half-up; train takes the rest."""
    train_r, test_r, val_r = ratios
    n_test = math.floor(n * test_r + 0.5)
    n_val = math.floor(n * val_r + 0.5)
    return {"train": n - n_test - n_val, "test": n_test, "val": n_val}


def split(entries: Sequence[ManifestEntry], ratios: Sequence[float] = (0.8, 0.1, 0.1),
          seed: int = 0, root: str | Path = ".") -> DatasetManifest:
    """Shuffle undrifted entries and slice them train/test/val; drifted
    entries always go to test.

    The returned manifest keeps the input order, only the split tags change.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if not entries:
        raise ValueError("no entries to split")
    standard = [k for k, e in enumerate(entries) if e.drift is None]
    n_splits = sum(1 for r in ratios if r > 0)
    if 0 < len(standard) < n_splits:
        raise ValueError(f"{len(standard)} entries cannot fill {n_splits} splits")
    sizes = split_sizes(len(standard), ratios)
    order = rng.shuffle(standard, seed)
    tags: dict[int, str] = {}
    pos = 0
    for name in SPLITS:
        for k in order[pos:pos + sizes[name]]:
            tags[k] = name
        pos += sizes[name]
    out = []
    for k, e in enumerate(entries):
        out.append(ManifestEntry(e.image, e.labels, tags.get(k, "test"), e.drift))
    return DatasetManifest(out, seed, Path(root))


def pair_stems(images_dir: str | Path, labels_dir: str | Path) -> tuple[list[tuple[Path, Path]], list[str]]:
    """Match ``*.ppm`` images with ``*.txt`` labels by stem.

    Returns the sorted pairs and a list of problems for unmatched files.
    """
    images = {p.stem: p for p in Path(images_dir).glob("*.ppm")}
    labels = {p.stem: p for p in Path(labels_dir).glob("*.txt")}
    problems = [f"image without labels: {images[s]}" for s in sorted(images.keys() - labels.keys())]
    problems += [f"labels without image: {labels[s]}" for s in sorted(labels.keys() - images.keys())]
    pairs = [(images[s], labels[s]) for s in sorted(images.keys() & labels.keys())]
    return pairs, problems


def relpath(path: str | Path, root: str | Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), Path(root).resolve())).as_posix()


@dataclass(frozen=True)
class CropRecord:
    crop_path: str
    source_image: str
    class_id: int
    box: BoundingBox

    def row(self) -> list:
        b = self.box
        return [self.crop_path, self.source_image, self.class_id, int(b.x1), int(b.y1), int(b.x2), int(b.y2)]


INDEX_HEADER = ["crop_path", "source_image", "class_id", "x1", "y1", "x2", "y2"]


@dataclass
class BuildReport:
    records: list[CropRecord]
    errors: list[str]


def crop_name(stem: str, index: int, class_id: int) -> str:
    return f"{stem}_{index}_{ClassLabel(class_id).name}.ppm"


def crop_key(path_or_name: str) -> str:
    """``<stem>_<index>`` part of a crop filename (class suffix removed)."""
    name = Path(path_or_name).stem
    for label in ClassLabel:
        suffix = "_" + label.name
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def load_sample(manifest: DatasetManifest, entry: ManifestEntry) -> tuple[ImageBuffer, list[Annotation]]:
    img = load_ppm(manifest.resolve(entry.image))
    anns = parse_annotation(manifest.resolve(entry.labels).read_text())
    return img, anns


def _crops_for_entry(manifest: DatasetManifest, entry: ManifestEntry, out_dir: Path):
    try:
        img, anns = load_sample(manifest, entry)
    except (OSError, PPMError, AnnotationError) as exc:
        return [], [f"{entry.image}: {exc}"]
    records, errors = [], []
    for k, ann in enumerate(anns):
        try:
            box = denormalize(ann.box, img.width, img.height)
        except DegenerateBoxError as exc:
            errors.append(f"{entry.image}: annotation {k}: {exc}")
            continue
        name = crop_name(entry.stem, k, ann.class_id)
        (out_dir / name).write_bytes(write_ppm(resize_64(crop(img, box))))
        records.append(CropRecord(name, entry.image, int(ann.class_id), box))
    return records, errors


def build_classifier_dataset(manifest: DatasetManifest, out_dir: str | Path,
                             entries: Sequence[ManifestEntry] | None = None,
                             workers: int = 1) -> BuildReport:
    """Write one 64x64 crop per annotation plus ``index.csv`` and ``meta.json``.

    Crop paths in the index are relative to ``out_dir``; source images are
    recorded as they appear in the manifest.  Unreadable inputs are collected
    in the report rather than raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = manifest.entries if entries is None else entries
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda e: _crops_for_entry(manifest, e, out_dir), entries))
    else:
        parts = [_crops_for_entry(manifest, e, out_dir) for e in entries]
    records = [r for recs, _ in parts for r in recs]
    errors = [e for _, errs in parts for e in errs]
    write_index(records, out_dir / "index.csv")
    meta = {"size": CROP_SIZE, "resize": RESIZE_METHOD, "crops": len(records)}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return BuildReport(records, errors)


def write_index(records: Iterable[CropRecord], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INDEX_HEADER)
    for r in records:
        w.writerow(r.row())
    Path(path).write_text(buf.getvalue())


def read_index(path: str | Path) -> list[CropRecord]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != INDEX_HEADER:
            raise ManifestError(f"unexpected crop index header {header}")
        return [
            CropRecord(row[0], row[1], int(row[2]), BoundingBox(*(int(v) for v in row[3:7])))
            for row in reader
        ]


def audit_classifier_dataset(manifest: DatasetManifest, crops_dir: str | Path) -> list[str]:
    """Re-derive every index row from its source; returns the violations found."""
    crops_dir = Path(crops_dir)
    try:
        records = read_index(crops_dir / "index.csv")
    except (OSError, ManifestError) as exc:
        return [f"index: {exc}"]
    by_image = {e.image: e for e in manifest.entries}
    cache: dict[str, tuple[ImageBuffer, list[Annotation]]] = {}
    problems = []
    for r in records:
        where = f"{r.crop_path}"
        entry = by_image.get(r.source_image)
        if entry is None:
            problems.append(f"{where}: source {r.source_image} not in manifest")
            continue
        if r.source_image not in cache:
            try:
                cache[r.source_image] = load_sample(manifest, entry)
            except (OSError, PPMError, AnnotationError) as exc:
                problems.append(f"{where}: cannot read source: {exc}")
                continue
        img, anns = cache[r.source_image]
        stem, _, idx = crop_key(r.crop_path).rpartition("_")
        if stem != entry.stem or not idx.isdigit() or int(idx) >= len(anns):
            problems.append(f"{where}: name does not refer to an annotation of {r.source_image}")
            continue
        ann = anns[int(idx)]
        if int(ann.class_id) != r.class_id:
            problems.append(f"{where}: class {r.class_id} but annotation says {int(ann.class_id)}")
        try:
            expected_box = denormalize(ann.box, img.width, img.height)
        except DegenerateBoxError as exc:
            problems.append(f"{where}: {exc}")
            continue
        if expected_box != r.box:
            problems.append(f"{where}: box {r.box.as_tuple()} but annotation gives {expected_box.as_tuple()}")
            continue
        try:
            data = (crops_dir / r.crop_path).read_bytes()
        except OSError as exc:
            problems.append(f"{where}: {exc}")
            continue
        if data != write_ppm(resize_64(crop(img, expected_box))):
            problems.append(f"{where}: pixels differ from a fresh crop of the source")
    return problems
