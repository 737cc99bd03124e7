"""Synthetic multi-label localization data, image/annotation I/O, augmentation and splits.

On-disk layout of a dataset directory::

    images/<image_id>.png    8-bit grayscale
    manifest.csv             image_path,split,labels   (labels pipe-separated class names)
    bboxes.csv               image_id,class,x,y,w,h    (pixels at stored resolution)
    classes.txt              one class name per line, in label-vector order
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, IngestionError
from .seeding import stream
from .tensor_ops import interpolation_matrix

NIH_CLASSES = (
    "Atelectasis", "Cardiomegaly", "Effusion", "Infiltration", "Mass", "Nodule", "Pneumonia",
    "Pneumothorax", "Consolidation", "Edema", "Emphysema", "Fibrosis", "Pleural_Thickening", "Hernia",
)
# the published bbox list spells one finding differently from the label file
NIH_BBOX_ALIASES = {"Infiltrate": "Infiltration"}
NIH_NO_FINDING = "No Finding"

# fractions of the paper's official train/val/test split (78484 : 8040 : 25596)
PAPER_SPLIT = (78484 / 112120, 8040 / 112120, 25596 / 112120)


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ConfigurationError(f"bbox extent must be positive, got w={self.w} h={self.h}")

    def scaled(self, sx: float, sy: float) -> "BBox":
        return BBox(self.x * sx, self.y * sy, self.w * sx, self.h * sy)

    def contains(self, row: int, col: int) -> bool:
        """Inclusive pixel-membership test: columns x..x+w-1, rows y..y+h-1."""
        return self.x <= col <= self.x + self.w - 1 and self.y <= row <= self.y + self.h - 1

    def clamped(self, height: int, width: int) -> "BBox":
        x0, y0 = max(0.0, self.x), max(0.0, self.y)
        x1, y1 = min(float(width), self.x + self.w), min(float(height), self.y + self.h)
        return BBox(x0, y0, max(x1 - x0, 1e-9), max(y1 - y0, 1e-9))


@dataclass
class Record:
    image_id: str
    image_path: str
    labels: Tuple[int, ...]
    boxes: Dict[int, List[BBox]] = field(default_factory=dict)
    split: str = "train"


@dataclass
class DatasetManifest:
    class_names: List[str]
    records: List[Record]

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest(self.class_names, [r for r in self.records if r.split == split])

    def label_matrix(self) -> np.ndarray:
        return np.array([r.labels for r in self.records], dtype=np.int64).reshape(len(self.records), len(self.class_names))


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class BlobClass:
    name: str
    area_range: Tuple[float, float]
    kind: str = "disk"
    intensity_range: Tuple[float, float] = (0.25, 0.45)
    prevalence: float = 0.5


def default_classes() -> List[BlobClass]:
    return [
        BlobClass("big", (0.12, 0.20), "disk"),
        # a faint gaussian this small is not learnable from 2000 images by either model,
        # and the stride-32 baseline still misses many dim disks, hence the brighter range
        BlobClass("small", (0.002, 0.01), "disk", (0.6, 0.8)),
    ]


@dataclass
class SyntheticConfig:
    n_images: int = 200
    image_size: int = 64
    classes: List[BlobClass] = field(default_factory=default_classes)
    noise_std: float = 0.1
    background: float = 0.5
    field_amplitude: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        if self.n_images < 1:
            raise ConfigurationError("n_images must be >= 1")
        if self.image_size < 8:
            raise ConfigurationError("image_size must be >= 8")
        if not self.classes:
            raise ConfigurationError("at least one class is required")
        for c in self.classes:
            lo, hi = c.area_range
            if not (0.0 < lo <= hi < 1.0):
                raise ConfigurationError(f"class {c.name!r}: area fractions must lie in (0, 1), got {c.area_range}")
            if not (0.0 < c.prevalence <= 1.0):
                raise ConfigurationError(f"class {c.name!r}: prevalence must lie in (0, 1]")
            if c.kind not in ("disk", "gaussian"):
                raise ConfigurationError(f"class {c.name!r}: unknown blob kind {c.kind!r}")
            if not _side_range(c.area_range, self.image_size):
                raise ConfigurationError(f"class {c.name!r}: no integer blob side fits area range {c.area_range}")
            if _side_range(c.area_range, self.image_size)[1] > self.image_size - 2:
                raise ConfigurationError(f"class {c.name!r}: blob larger than the image")


def _side_range(area_range, size) -> Optional[Tuple[int, int]]:
    lo = math.ceil(math.sqrt(area_range[0]) * size)
    hi = math.floor(math.sqrt(area_range[1]) * size)
    return (max(lo, 1), hi) if hi >= max(lo, 1) else None


@dataclass
class SyntheticSample:
    image: np.ndarray                 # uint8 (S, S)
    labels: Tuple[int, ...]
    boxes: Dict[int, List[BBox]]
    background: np.ndarray            # float, noise + field, before blobs
    blob_layers: Dict[int, np.ndarray]  # float additive contribution per class


def _blob_layer(size: int, x: int, y: int, side: int, kind: str, intensity: float) -> np.ndarray:
    """Additive blob whose nonzero support is exactly the ``side`` x ``side`` box at (x, y)."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = y + (side - 1) / 2.0, x + (side - 1) / 2.0
    d2 = (rows - cy) ** 2 + (cols - cx) ** 2
    inside = d2 <= (side / 2.0) ** 2
    if kind == "disk":
        profile = np.ones_like(d2)
    else:
        sigma = side / 4.0
        profile = np.exp(-d2 / (2.0 * sigma**2))
    return np.where(inside, intensity * profile, 0.0)


def _smooth_field(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size] / size
    field_ = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * (fy * rows + fx * cols) + phase)
    return amplitude * field_ / 3.0


def render_sample(cfg: SyntheticConfig, index: int) -> SyntheticSample:
    """Deterministically render image ``index`` of the dataset described by ``cfg``."""
    rng = np.random.default_rng([cfg.seed, 3, index])
    s = cfg.image_size
    background = cfg.background + _smooth_field(rng, s, cfg.field_amplitude) + rng.normal(0.0, cfg.noise_std, (s, s))
    total = background.copy()
    labels, boxes, layers = [], {}, {}
    for ci, cls in enumerate(cfg.classes):
        present = rng.random() < cls.prevalence
        labels.append(int(present))
        if not present:
            continue
        lo, hi = _side_range(cls.area_range, s)
        side = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(1, s - side))
        y = int(rng.integers(1, s - side))
        intensity = float(rng.uniform(*cls.intensity_range))
        layer = _blob_layer(s, x, y, side, cls.kind, intensity)
        layers[ci] = layer
        boxes[ci] = [BBox(x, y, side, side)]
        total += layer
    image = np.round(np.clip(total, 0.0, 1.0) * 255.0).astype(np.uint8)
    return SyntheticSample(image, tuple(labels), boxes, background, layers)


@dataclass
class ArrayDataset:
    """Images (n, 1, S, S) in [0, 1], labels (n, K), boxes per record."""

    images: np.ndarray
    labels: np.ndarray
    boxes: List[Dict[int, List[BBox]]]
    ids: List[str]
    class_names: List[str]

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "ArrayDataset":
        idx = list(idx)
        return ArrayDataset(self.images[idx], self.labels[idx], [self.boxes[i] for i in idx],
                            [self.ids[i] for i in idx], self.class_names)

    def astype(self, dtype) -> "ArrayDataset":
        return replace(self, images=self.images.astype(dtype))


def render_synthetic(cfg: SyntheticConfig, start: int = 0) -> ArrayDataset:
    """Render ``cfg.n_images`` samples in memory (same pixels generate_synthetic writes)."""
    cfg.validate()
    samples = [render_sample(cfg, start + i) for i in range(cfg.n_images)]
    images = np.stack([smp.image for smp in samples])[:, None].astype(np.float32) / 255.0
    labels = np.array([smp.labels for smp in samples], dtype=np.int64)
    return ArrayDataset(images, labels, [smp.boxes for smp in samples],
                        [f"img{start + i:05d}" for i in range(cfg.n_images)],
                        [c.name for c in cfg.classes])


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> DatasetManifest:
    """Write images, manifest.csv, bboxes.csv and classes.txt under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(cfg.n_images):
        smp = render_sample(cfg, i)
        image_id = f"img{i:05d}"
        rel = f"images/{image_id}.png"
        save_png(smp.image, out / rel)
        records.append(Record(image_id, rel, smp.labels, smp.boxes))
    manifest = DatasetManifest([c.name for c in cfg.classes], records)
    write_manifest(manifest, out)
    return manifest


# ---------------------------------------------------------------------------
# manifests


def write_manifest(manifest: DatasetManifest, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "classes.txt").write_text("\n".join(manifest.class_names) + "\n", encoding="utf-8")
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_path", "split", "labels"])
        for r in manifest.records:
            names = [manifest.class_names[c] for c, v in enumerate(r.labels) if v]
            writer.writerow([r.image_path, r.split, "|".join(names)])
    with open(out / "bboxes.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "class", "x", "y", "w", "h"])
        for r in manifest.records:
            for c in sorted(r.boxes):
                for b in r.boxes[c]:
                    writer.writerow([r.image_id, manifest.class_names[c], _num(b.x), _num(b.y), _num(b.w), _num(b.h)])


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def read_manifest(data_dir) -> DatasetManifest:
    root = Path(data_dir)
    try:
        class_names = [ln for ln in (root / "classes.txt").read_text(encoding="utf-8").splitlines() if ln]
        with open(root / "manifest.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read dataset manifest in {root}: {exc}") from exc
    index = {n: i for i, n in enumerate(class_names)}
    records = []
    for row in rows:
        names = [n for n in row["labels"].split("|") if n]
        unknown = [n for n in names if n not in index]
        if unknown:
            raise IngestionError(f"manifest row {row['image_path']}: unknown classes {unknown}")
        labels = tuple(int(n in names) for n in class_names)
        image_id = Path(row["image_path"]).stem
        records.append(Record(image_id, row["image_path"], labels, {}, row["split"]))
    by_id = {r.image_id: r for r in records}
    bbox_path = root / "bboxes.csv"
    if bbox_path.exists():
        with open(bbox_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rec = by_id.get(row["image_id"])
                if rec is None:
                    continue
                if row["class"] not in index:
                    raise IngestionError(f"bboxes.csv: unknown class {row['class']!r}")
                box = BBox(float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"]))
                rec.boxes.setdefault(index[row["class"]], []).append(box)
    return DatasetManifest(class_names, records)


def load_dataset(manifest: DatasetManifest, root, target_size: Optional[int] = None) -> ArrayDataset:
    """Load every record's image (and rescale its boxes) into an :class:`ArrayDataset`."""
    root = Path(root)
    images, boxes = [], []
    for r in manifest.records:
        img, factors = load_image(root / r.image_path, target_size)
        images.append(img)
        boxes.append(rescale_boxes(r.boxes, *factors))
    arr = np.stack(images)[:, None] if images else np.zeros((0, 1, target_size or 1, target_size or 1), np.float32)
    return ArrayDataset(arr.astype(np.float32), manifest.label_matrix(), boxes,
                        [r.image_id for r in manifest.records], list(manifest.class_names))


# ---------------------------------------------------------------------------
# image I/O and resampling


def save_png(image: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path, format="PNG", optimize=False)


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_matrix(src: int, dst: int, a: float = -0.5) -> np.ndarray:
    """(dst, src) resampling weights, half-pixel centers, edge pixels replicated."""
    d = np.arange(dst)
    s = (d + 0.5) * src / dst - 0.5
    base = np.floor(s).astype(int)
    mat = np.zeros((dst, src))
    for off in range(-1, 3):
        idx = base + off
        wts = cubic_kernel(s - idx, a)
        np.add.at(mat, (d, np.clip(idx, 0, src - 1)), wts)
    return mat


def resize_bicubic(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = image.shape
    th, tw = size
    if (th, tw) == (h, w):
        return image.astype(np.float64)
    return bicubic_matrix(h, th) @ image.astype(np.float64) @ bicubic_matrix(w, tw).T


def load_image(path, target_size=None) -> Tuple[np.ndarray, Tuple[float, float]]:
    """Read an 8-bit grayscale PNG as floats in [0, 1], bicubic-resized to ``target_size``.

    Returns the image and the (sx, sy) factors to apply to its boxes.
    """
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise IngestionError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
            pixels = np.asarray(im, dtype=np.uint8)
    except IngestionError:
        raise
    except Exception as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    img = pixels.astype(np.float64) / 255.0
    h, w = img.shape
    if target_size is None:
        return img, (1.0, 1.0)
    th, tw = (target_size, target_size) if np.isscalar(target_size) else target_size
    out = np.clip(resize_bicubic(img, (th, tw)), 0.0, 1.0)
    return out, (tw / w, th / h)


def rescale_boxes(boxes: Dict[int, List[BBox]], sx: float, sy: float) -> Dict[int, List[BBox]]:
    if sx == 1.0 and sy == 1.0:
        return {c: list(bs) for c, bs in boxes.items()}
    return {c: [b.scaled(sx, sy) for b in bs] for c, bs in boxes.items()}


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    crop_scale: float = 1.0
    crop_x: float = 0.0   # fraction of the free horizontal room used as offset
    crop_y: float = 0.0
    angle: float = 0.0    # degrees
    brightness: float = 0.0
    contrast: float = 0.0


IDENTITY_AUGMENT = AugmentParams()


AUGMENT_OPS = ("flip", "crop", "rotate", "color")


def sample_augmentation(rng: np.random.Generator, ops: Sequence[str] = AUGMENT_OPS) -> AugmentParams:
    """Draw one set of augmentation parameters; ops left out of ``ops`` stay at identity.

    All seven values are always drawn so the stream advances identically
    whatever subset is enabled.
    """
    unknown = set(ops) - set(AUGMENT_OPS)
    if unknown:
        raise ConfigurationError(f"unknown augmentations {sorted(unknown)}; choose from {AUGMENT_OPS}")
    flip = bool(rng.random() < 0.5)
    crop_scale = float(rng.uniform(0.7, 1.0))
    crop_x, crop_y = float(rng.random()), float(rng.random())
    angle = float(rng.uniform(-90.0, 90.0))
    brightness = float(rng.uniform(-0.5, 0.5))
    contrast = float(rng.uniform(-0.5, 0.5))
    return AugmentParams(
        flip=flip and "flip" in ops,
        crop_scale=crop_scale if "crop" in ops else 1.0,
        crop_x=crop_x if "crop" in ops else 0.0,
        crop_y=crop_y if "crop" in ops else 0.0,
        angle=angle if "rotate" in ops else 0.0,
        brightness=brightness if "color" in ops else 0.0,
        contrast=contrast if "color" in ops else 0.0,
    )


def apply_augmentation(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Flip, resized crop (area fraction ``crop_scale``), rotation, brightness/contrast on a 2-D image."""
    out = np.asarray(image, dtype=np.float64)
    h, w = out.shape
    if p.flip:
        out = out[:, ::-1]
    if p.crop_scale < 1.0:
        ch = max(1, int(round(h * math.sqrt(p.crop_scale))))
        cw = max(1, int(round(w * math.sqrt(p.crop_scale))))
        y0 = int(round(p.crop_y * (h - ch)))
        x0 = int(round(p.crop_x * (w - cw)))
        crop = out[y0 : y0 + ch, x0 : x0 + cw]
        out = interpolation_matrix(ch, h) @ crop @ interpolation_matrix(cw, w).T
    if p.angle != 0.0:
        out = ndimage.rotate(out, p.angle, reshape=False, order=1, mode="constant", cval=0.0)
    if p.brightness != 0.0 or p.contrast != 0.0:
        out = (out - 0.5) * (1.0 + p.contrast) + 0.5 + p.brightness
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, rng: np.random.Generator, ops: Sequence[str] = AUGMENT_OPS) -> np.ndarray:
    return apply_augmentation(image, sample_augmentation(rng, ops))


# ---------------------------------------------------------------------------
# splits


def split(manifest: DatasetManifest, ratios: Sequence[float] = PAPER_SPLIT, seed: int = 0,
          names: Sequence[str] = ("train", "val", "test")) -> Dict[str, DatasetManifest]:
    """Seeded disjoint partition; also stamps each record's ``split`` tag."""
    ratios = list(ratios)
    if len(ratios) != len(names) or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigurationError(f"split ratios must be {len(names)} non-negative numbers summing to 1")
    n = len(manifest.records)
    counts = [int(math.floor(r * n)) for r in ratios]
    counts[0] += n - sum(counts)
    return split_counts(manifest, counts, seed, names)


def split_counts(manifest: DatasetManifest, counts: Sequence[int], seed: int = 0,
                 names: Sequence[str] = ("train", "val", "test")) -> Dict[str, DatasetManifest]:
    """Like :func:`split` but with exact partition sizes, which must add up to the manifest size."""
    counts = [int(k) for k in counts]
    n = len(manifest.records)
    if len(counts) != len(names) or sum(counts) != n:
        raise ConfigurationError(f"split counts {counts} must be {len(names)} sizes adding up to {n}")
    if min(counts) < 1:
        raise ConfigurationError(f"split of {n} records into {counts} leaves an empty partition")
    order = stream(seed, "shuffle").permutation(n)
    out, start = {}, 0
    for name, k in zip(names, counts):
        chosen = sorted(order[start : start + k])
        start += k
        recs = []
        for i in chosen:
            manifest.records[i].split = name
            recs.append(manifest.records[i])
        out[name] = DatasetManifest(manifest.class_names, recs)
    return out


# ---------------------------------------------------------------------------
# NIH Chest X-Ray 14 adapter


def ingest_nih_csv(labels_csv, bbox_csv, image_dir) -> DatasetManifest:
    """Build a 14-class manifest from ``Data_Entry_2017.csv`` and ``BBox_List_2017.csv``-shaped files.

    The label file needs ``Image Index`` and ``Finding Labels`` (pipe-separated)
    columns; the bbox file lists image index, finding label and x, y, w, h in
    its first six columns.
    """
    index = {n: i for i, n in enumerate(NIH_CLASSES)}
    bad = []
    records: Dict[str, Record] = {}
    try:
        with open(labels_csv, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                name = row["Image Index"]
                findings = [f for f in row["Finding Labels"].split("|") if f and f != NIH_NO_FINDING]
                unknown = [f for f in findings if f not in index]
                if unknown:
                    bad.append(f"{labels_csv}:{lineno} {unknown}")
                    continue
                labels = tuple(int(c in findings) for c in NIH_CLASSES)
                records[name] = Record(Path(name).stem, str(Path(image_dir) / name), labels)
        with open(bbox_csv, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                name, finding = row[0], NIH_BBOX_ALIASES.get(row[1], row[1])
                if finding not in index:
                    bad.append(f"{bbox_csv}:{lineno} {[row[1]]}")
                    continue
                x, y, w, h = (float(v) for v in row[2:6])
                rec = records.get(name)
                if rec is None:
                    rec = records[name] = Record(Path(name).stem, str(Path(image_dir) / name), tuple([0] * len(NIH_CLASSES)))
                rec.boxes.setdefault(index[finding], []).append(BBox(x, y, w, h))
    except (OSError, KeyError) as exc:
        raise IngestionError(f"cannot ingest NIH CSVs: {exc}") from exc
    if bad:
        raise IngestionError("unknown class names in rows: " + "; ".join(bad))
    return DatasetManifest(list(NIH_CLASSES), list(records.values()))


def emit_nih_rows(manifest: DatasetManifest) -> Tuple[List[List[str]], List[List[str]]]:
    """Inverse of :func:`ingest_nih_csv`: (label rows, bbox rows) without headers."""
    inverse_alias = {v: k for k, v in NIH_BBOX_ALIASES.items()}
    label_rows, bbox_rows = [], []
    for r in manifest.records:
        name = Path(r.image_path).name
        findings = [manifest.class_names[c] for c, v in enumerate(r.labels) if v]
        label_rows.append([name, "|".join(findings) if findings else NIH_NO_FINDING])
        for c in sorted(r.boxes):
            for b in r.boxes[c]:
                cname = manifest.class_names[c]
                bbox_rows.append([name, inverse_alias.get(cname, cname), _num(b.x), _num(b.y), _num(b.w), _num(b.h)])
    return label_rows, bbox_rows
