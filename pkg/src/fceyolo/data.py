"""YOLO-format labels, dataset splitting, contrast/brightness augmentation,
letterboxing and a small synthetic detection dataset."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import cv2
import numpy as np

from .metrics import GroundTruth
from .tensor import load_tensor

SPLITS = ("train", "valid", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".bin")
CLASS_FILE = "classes.txt"
DEFAULT_CLASSES = (
    "bone anomaly", "bone lesion", "foreign body", "fracture", "metal",
    "periosteal reaction", "pronator sign", "soft tissue", "text",
)


class LabelError(ValueError):
    """Malformed label text."""


# ------------------------------------------------------------------ labels


@dataclass(frozen=True)
class YoloLabel:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise LabelError(f"negative class id {self.class_id}")
        if not all(0.0 <= v <= 1.0 for v in (self.cx, self.cy, self.w, self.h)):
            raise LabelError(f"coordinates outside [0, 1]: {self}")
        if self.w <= 0 or self.h <= 0:
            raise LabelError(f"box must have positive size: {self}")

    def to_xyxy(self, width: float, height: float) -> tuple:
        return (
            (self.cx - self.w / 2) * width, (self.cy - self.h / 2) * height,
            (self.cx + self.w / 2) * width, (self.cy + self.h / 2) * height,
        )

    @classmethod
    def from_xyxy(cls, class_id: int, box: Sequence[float], width: float, height: float) -> "YoloLabel":
        x1, y1, x2, y2 = box
        return cls(class_id, (x1 + x2) / 2 / width, (y1 + y2) / 2 / height, (x2 - x1) / width, (y2 - y1) / height)


# six-decimal label files can overshoot an edge by this much; clip those quietly
_ROUNDING_SLACK = 1e-5


def _clip_label(cls_id: int, cx: float, cy: float, w: float, h: float, line: int) -> YoloLabel:
    x1, y1, x2, y2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    if x1 >= 0 and y1 >= 0 and x2 <= 1 and y2 <= 1:
        return YoloLabel(cls_id, cx, cy, w, h)
    overshoot = max(-x1, -y1, x2 - 1, y2 - 1)
    x1, y1, x2, y2 = max(x1, 0.0), max(y1, 0.0), min(x2, 1.0), min(y2, 1.0)
    if x2 <= x1 or y2 <= y1:
        raise LabelError(f"line {line}: box lies outside the image")
    if overshoot > _ROUNDING_SLACK:
        warnings.warn(f"line {line}: box clipped to the image", stacklevel=3)
    return YoloLabel(cls_id, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def parse_yolo_labels(text: str) -> list:
    """One label per nonempty line: ``class cx cy w h``."""
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise LabelError(f"line {n}: expected 5 fields, got {len(parts)}")
        try:
            cls_id = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError:
            raise LabelError(f"line {n}: non-numeric field in {line.strip()!r}") from None
        if not all(math.isfinite(v) for v in (cx, cy, w, h)) or w <= 0 or h <= 0 or cls_id < 0:
            raise LabelError(f"line {n}: invalid values in {line.strip()!r}")
        out.append(_clip_label(cls_id, cx, cy, w, h, n))
    return out


def format_yolo_labels(labels: Sequence[YoloLabel]) -> str:
    return "".join(f"{l.class_id} {l.cx:.6f} {l.cy:.6f} {l.w:.6f} {l.h:.6f}\n" for l in labels)


def labels_to_ground_truth(labels: Sequence[YoloLabel], image_id: str, width: int, height: int) -> list:
    return [GroundTruth(image_id, l.class_id, l.to_xyxy(width, height)) for l in labels]


# ------------------------------------------------------------------ split


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.7, 0.2, 0.1)
    seed: int = 0
    sizes: Optional[tuple] = None  # explicit (train, valid) counts override the ratios

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError(f"need three positive ratios, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")

    def counts(self, n: int) -> tuple:
        if n < 3:
            raise ValueError(f"need at least 3 items to split, got {n}")
        if self.sizes is not None:
            a, b = self.sizes[:2]
            if a < 0 or b < 0 or a + b > n:
                raise ValueError(f"explicit sizes {self.sizes} do not fit {n} items")
            return a, b, n - a - b
        a = math.floor(self.ratios[0] * n + 1e-9)
        b = math.floor(self.ratios[1] * n + 1e-9)
        return a, b, n - a - b


def split_dataset(items: Sequence, spec: SplitSpec = SplitSpec()) -> tuple:
    """Seeded shuffle, then (floor(r1 n), floor(r2 n), remainder)."""
    items = list(items)
    a, b, _ = spec.counts(len(items))
    perm = np.random.default_rng(spec.seed).permutation(len(items))
    shuffled = [items[i] for i in perm]
    return shuffled[:a], shuffled[a:a + b], shuffled[a + b:]


# ------------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentSpec:
    alpha: float = 1.2  # contrast gain
    gamma: float = 10.0  # brightness offset, 8-bit scale
    lo: float = 0.0
    hi: float = 255.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lo >= self.hi:
            raise ValueError("clip range is empty")


def augment_contrast_brightness(image: np.ndarray, spec: AugmentSpec = AugmentSpec()) -> np.ndarray:
    """clip(alpha * p + gamma) on a copy, via OpenCV's weighted sum."""
    out = cv2.addWeighted(image, spec.alpha, image, 0.0, spec.gamma)
    if out.dtype == np.uint8 and (spec.lo, spec.hi) == (0.0, 255.0):
        return out  # OpenCV already saturates 8-bit output
    return np.clip(out, spec.lo, spec.hi).astype(image.dtype)


AUG_SUFFIX = "_aug"


def augmented_index(items: Sequence[str], suffix: str = AUG_SUFFIX) -> list:
    """Originals followed by one augmented copy of each; labels are shared."""
    items = list(items)
    return items + [f"{s}{suffix}" for s in items]


# ------------------------------------------------------------------ letterbox


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: float
    pad_y: float
    src_size: tuple  # (width, height) of the original image

    def to_network(self, box: Sequence[float]) -> tuple:
        x1, y1, x2, y2 = box
        s = self.scale
        return (x1 * s + self.pad_x, y1 * s + self.pad_y, x2 * s + self.pad_x, y2 * s + self.pad_y)

    def to_original(self, box: Sequence[float]) -> tuple:
        x1, y1, x2, y2 = box
        s = self.scale
        return ((x1 - self.pad_x) / s, (y1 - self.pad_y) / s, (x2 - self.pad_x) / s, (y2 - self.pad_y) / s)


def letterbox(image: np.ndarray, target: int, fill: int = 114) -> tuple:
    """Aspect-preserving resize onto a ``target`` square, centered with ``fill`` padding."""
    if target <= 0 or target % 32:
        raise ValueError(f"target size {target} must be a positive multiple of 32")
    h, w = image.shape[:2]
    scale = min(target / w, target / h)
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    resized = image if (nw, nh) == (w, h) else cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    left, top = (target - nw) // 2, (target - nh) // 2
    out = np.full((target, target) + image.shape[2:], fill, dtype=image.dtype)
    out[top:top + nh, left:left + nw] = resized
    return out, LetterboxTransform(scale, float(left), float(top), (w, h))


# ------------------------------------------------------------------ synthetic data


@dataclass
class Sample:
    stem: str
    image: np.ndarray  # (H, W, 3) uint8
    labels: list = field(default_factory=list)


def class_intensity(class_id: int, n_classes: int) -> int:
    """Fill level of a synthetic object: evenly spread over [90, 250]."""
    if n_classes == 1:
        return 250
    return int(round(90 + 160 * class_id / (n_classes - 1)))


def synth_sample(stem: str, image_size: int, objects: Sequence[tuple], n_classes: int = 9,
                 background: int = 20) -> Sample:
    """One image from explicit (class_id, (x1, y1, x2, y2)) integer-pixel objects."""
    img = np.full((image_size, image_size, 3), background, np.uint8)
    labels = []
    for c, (x1, y1, x2, y2) in objects:
        img[y1:y2, x1:x2] = class_intensity(c, n_classes)
        labels.append(YoloLabel.from_xyxy(c, (x1, y1, x2, y2), image_size, image_size))
    return Sample(stem, img, labels)


def synth_dataset(n_images: int, image_size: int = 64, n_classes: int = 9, seed: int = 0,
                  boxes_per_image: int = 1, side_range: tuple = (0.25, 0.6), background: int = 20) -> list:
    """Dark images holding bright axis-aligned rectangles.

    Each rectangle's gray level identifies its class; sides are drawn from
    ``side_range`` (fractions of the image side).  Labels are exact (integer
    pixel corners).
    """
    rng = np.random.default_rng(seed)
    lo, hi = max(1, int(side_range[0] * image_size)), int(side_range[1] * image_size)
    out = []
    for i in range(n_images):
        objects = []
        for _ in range(boxes_per_image):
            bw, bh = (int(rng.integers(lo, hi + 1)) for _ in range(2))
            x1 = int(rng.integers(0, image_size - bw + 1))
            y1 = int(rng.integers(0, image_size - bh + 1))
            objects.append((int(rng.integers(n_classes)), (x1, y1, x1 + bw, y1 + bh)))
        out.append(synth_sample(f"synth_{i:05d}", image_size, objects, n_classes, background))
    return out


def overfit_pair(n_classes: int = 9) -> list:
    """Two fixed 64x64 images whose four objects land on all three strides
    (sides 42, 24 and 20, and 10 pixels), in distinct cells."""
    return [
        synth_sample("pair_0", 64, [(3 % n_classes, (4, 6, 46, 48)), (7 % n_classes, (50, 50, 60, 60))], n_classes),
        synth_sample("pair_1", 64, [(0, (6, 34, 30, 58)), (5 % n_classes, (38, 6, 58, 26))], n_classes),
    ]


def image_to_array(image: np.ndarray) -> np.ndarray:
    """(H, W[, C]) uint8 image to a (3, H, W) float32 array in [0, 1]."""
    img = image if image.ndim == 3 else image[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return np.ascontiguousarray(img[:, :, :3].transpose(2, 0, 1), dtype=np.float32) / 255.0


# ------------------------------------------------------------------ directory I/O


def load_image(path: Union[str, Path]) -> np.ndarray:
    """8-bit PNG/JPEG (16-bit rescaled to 8-bit) or a raw tensor dump."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix == ".bin":
        arr = load_tensor(path).data
        if arr.ndim == 3 and arr.shape[0] in (1, 3):
            arr = arr.transpose(1, 2, 0)
        return np.clip(np.round(arr * 255 if arr.max() <= 1.0 else arr), 0, 255).astype(np.uint8)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValueError(f"cannot decode image {path}")
    if img.dtype == np.uint16:
        img = (img.astype(np.float64) * (255.0 / 65535.0)).round().astype(np.uint8)
    return img


def save_image(path: Union[str, Path], image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), image):
        raise OSError(f"failed to write {path}")


def write_class_names(root: Union[str, Path], names: Sequence[str] = DEFAULT_CLASSES) -> Path:
    p = Path(root) / CLASS_FILE
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("".join(f"{n}\n" for n in names))
    return p


def read_class_names(root: Union[str, Path]) -> list:
    p = Path(root) / CLASS_FILE
    if not p.exists():
        return list(DEFAULT_CLASSES)
    return [line.strip() for line in p.read_text().splitlines() if line.strip()]


def write_split(root: Union[str, Path], split: str, samples: Sequence[Sample]) -> None:
    """images/<split>/<stem>.png and labels/<split>/<stem>.txt."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root)
    for s in samples:
        save_image(root / "images" / split / f"{s.stem}.png", s.image)
        lp = root / "labels" / split / f"{s.stem}.txt"
        lp.parent.mkdir(parents=True, exist_ok=True)
        lp.write_text(format_yolo_labels(s.labels))


def read_split(root: Union[str, Path], split: str) -> list:
    """Samples of one split, sorted by stem.  A missing label file means no objects."""
    root = Path(root)
    img_dir = root / "images" / split
    if not img_dir.is_dir():
        raise FileNotFoundError(f"no image directory {img_dir}")
    out = []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        lp = root / "labels" / split / f"{p.stem}.txt"
        try:
            labels = parse_yolo_labels(lp.read_text()) if lp.exists() else []
        except LabelError as e:
            raise LabelError(f"{lp}: {e}") from None
        out.append(Sample(p.stem, load_image(p), labels))
    return out


def read_labels_dir(label_dir: Union[str, Path]) -> dict:
    """stem -> labels for every .txt file in a directory."""
    d = Path(label_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"no label directory {d}")
    out = {}
    for p in sorted(d.glob("*.txt")):
        try:
            out[p.stem] = parse_yolo_labels(p.read_text())
        except LabelError as e:
            raise LabelError(f"{p}: {e}") from None
    return out


def augment_split(root: Union[str, Path], split: str = "train", spec: AugmentSpec = AugmentSpec(),
                  out_root: Optional[Union[str, Path]] = None) -> int:
    """Add one contrast/brightness copy of every image (labels copied verbatim).

    Returns the resulting number of images in the split.
    """
    out_root = Path(out_root or root)
    samples = [s for s in read_split(root, split) if not s.stem.endswith(AUG_SUFFIX)]
    if out_root != Path(root):
        write_split(out_root, split, samples)
    aug = [Sample(s.stem + AUG_SUFFIX, augment_contrast_brightness(s.image, spec), s.labels) for s in samples]
    write_split(out_root, split, aug)
    return len(samples) + len(aug)
