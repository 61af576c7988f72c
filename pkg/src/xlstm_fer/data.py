"""Dataset manifests, image decoding/preprocessing and a synthetic pattern dataset."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Category orders of the public FER benchmarks.
CKPLUS_LABELS = ("anger", "contempt", "disgust", "fear", "happy", "sadness", "surprise")
RAFDB_LABELS = ("surprise", "fear", "disgust", "happiness", "sadness", "anger", "neutral")
FERPLUS_LABELS = ("anger", "disgust", "fear", "happy", "sad", "surprise", "neutral", "contempt")
LABEL_MAPS = {"ckplus": CKPLUS_LABELS, "rafdb": RAFDB_LABELS, "ferplus": FERPLUS_LABELS}

# Published split sizes, used only to warn about incomplete copies.
SPLIT_SIZES = {
    "ckplus": {"train": 784, "test": 197},
    "rafdb": {"train": 12271, "test": 3068},
    "ferplus": {"train": 28709, "val": 3589, "test": 3589},
}

# Optional per-channel normalization, applied after scaling to [0, 1].
NORMALIZATION = {
    "none": None,
    "half": ((0.5,), (0.5,)),
    "imagenet": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
}


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int
    source: str


@dataclass
class DatasetManifest:
    classes: list[str]
    records: list[tuple[str, int]] = field(default_factory=list)
    split: str = "train"

    @property
    def class_to_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.classes)}

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __len__(self) -> int:
        return len(self.records)


def _resolve_label_map(label_map) -> list[str] | None:
    if label_map is None:
        return None
    if isinstance(label_map, str):
        try:
            return list(LABEL_MAPS[label_map.lower()])
        except KeyError:
            raise DataError(f"unknown label map {label_map!r}; known: {sorted(LABEL_MAPS)}") from None
    return [str(c) for c in label_map]


def known_dataset(classes) -> str | None:
    """Name of the benchmark whose category set equals ``classes`` (case-insensitive)."""
    names = {c.lower() for c in classes}
    for key, labels in LABEL_MAPS.items():
        if names == set(labels) and len(names) == len(classes):
            return key
    return None


def check_split_size(manifest: DatasetManifest) -> None:
    ds = known_dataset(manifest.classes)
    if ds is None:
        return
    expected = SPLIT_SIZES[ds].get(manifest.split)
    if expected is not None and len(manifest) != expected:
        warnings.warn(f"{ds} {manifest.split} split has {len(manifest)} images; the published split has {expected}",
                      stacklevel=2)


def load_manifest(source, label_map=None, split: str = "train") -> DatasetManifest:
    """Build a manifest from a directory-per-class tree or a ``path,label`` CSV.

    Records are ordered lexicographically by path. Without ``label_map`` the
    class order is the sorted directory names (or sorted CSV labels).
    """
    source = Path(source)
    declared = _resolve_label_map(label_map)
    if source.is_dir():
        class_dirs = sorted(p for p in source.iterdir() if p.is_dir())
        if not class_dirs:
            raise DataError(f"{source}: no class directories found")
        classes = declared if declared is not None else [p.name for p in class_dirs]
        index = {c.lower(): i for i, c in enumerate(classes)}
        records = []
        for d in class_dirs:
            if d.name.lower() not in index:
                raise DataError(f"{d}: class {d.name!r} is not in the label map")
            for f in sorted(d.iterdir()):
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    records.append((str(f), index[d.name.lower()]))
    elif source.is_file():
        try:
            with open(source, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except (OSError, UnicodeDecodeError, csv.Error) as exc:
            raise DataError(f"{source}: unreadable manifest ({exc})") from exc
        if rows and not {"path", "label"} <= set(rows[0]):
            raise DataError(f"{source}: CSV header must contain 'path' and 'label'")
        classes = declared if declared is not None else sorted({r["label"] for r in rows})
        index = {c.lower(): i for i, c in enumerate(classes)}
        records = []
        for r in rows:
            p = Path(r["path"])
            if not p.is_absolute():
                p = source.parent / p
            if r["label"].lower() not in index:
                raise DataError(f"{p}: label {r['label']!r} is not in the label map")
            records.append((str(p), index[r["label"].lower()]))
        seen = set()
        for p, _ in records:
            if p in seen:
                raise DataError(f"{p}: listed more than once")
            seen.add(p)
        records.sort(key=lambda r: r[0])
    else:
        raise DataError(f"{source}: no such directory or CSV file")
    if not records:
        raise DataError(f"{source}: dataset is empty")
    manifest = DatasetManifest(list(classes), records, split)
    check_split_size(manifest)
    return manifest


# -- decoding and preprocessing -----------------------------------------------

def decode_image(path) -> np.ndarray:
    """Decode a PNG/JPEG file to a uint8 array, ``(H, W)`` or ``(H, W, 3)``."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise DataError(f"{path}: unsupported image type (PNG and JPEG only)")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc


def _interp_matrix(n_in: int, n_out: int, method: str) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` resampling matrix, half-pixel centers."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    m = np.zeros((n_out, n_in))
    if method == "nearest":
        idx = np.clip(np.floor(pos + 0.5).astype(int), 0, n_in - 1)
        m[np.arange(n_out), idx] = 1.0
        return m
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def resize(image: np.ndarray, size: tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Separable resize of an ``(H, W, C)`` float array."""
    h, w = image.shape[:2]
    th, tw = size
    if (h, w) == (th, tw):
        return image.copy()
    rows = _interp_matrix(h, th, method)
    cols = _interp_matrix(w, tw, method)
    return np.einsum("ih,hwc,jw->ijc", rows, image, cols)


def preprocess(raw: np.ndarray, size: tuple[int, int], grayscale: bool = True,
               method: str = "bilinear", normalization: str = "none") -> np.ndarray:
    """uint8 image to float64 ``(H, W, C)`` in [0, 1], then optional mean/std normalization."""
    img = np.asarray(raw)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[-1] not in (1, 3, 4):
        raise DataError(f"preprocess: unsupported image shape {img.shape}")
    img = img[..., :3].astype(np.float64) / 255.0
    if grayscale and img.shape[-1] == 3:
        img = img @ np.array([0.299, 0.587, 0.114])[:, None]
    elif not grayscale and img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    img = np.clip(resize(img, size, method), 0.0, 1.0)
    norm = NORMALIZATION.get(normalization)
    if normalization not in NORMALIZATION:
        raise DataError(f"unknown normalization {normalization!r}; known: {sorted(NORMALIZATION)}")
    if norm is not None:
        mean, std = (np.resize(np.asarray(v), img.shape[-1]) for v in norm)
        img = (img - mean) / std
    return img


def load_images(manifest: DatasetManifest, size: tuple[int, int], channels: int,
                normalization: str = "none") -> tuple[np.ndarray, np.ndarray]:
    """Decode and preprocess every record; returns ``(images, labels)`` in manifest order."""
    images = np.stack([preprocess(decode_image(p), size, grayscale=channels == 1,
                                  normalization=normalization)
                       for p, _ in manifest.records])
    labels = np.array([lab for _, lab in manifest.records], dtype=np.int64)
    return images, labels


# -- synthetic data ------------------------------------------------------------

def class_pattern(label: int, num_classes: int, size: tuple[int, int], channels: int = 1) -> np.ndarray:
    """Noise-free prototype for ``label``: an oriented bar plus an off-center blob and arc."""
    h, w = size
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h - 0.5, (np.arange(w) + 0.5) / w - 0.5, indexing="ij")
    theta = np.pi * label / num_classes
    dist = np.abs(-np.sin(theta) * xx + np.cos(theta) * yy)
    bar = (dist < 0.08).astype(np.float64)
    phi = 2 * np.pi * label / num_classes
    bx, by = 0.3 * np.cos(phi), 0.3 * np.sin(phi)
    blob = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * 0.07 ** 2))
    r = np.hypot(xx, yy)
    ang = np.arctan2(yy, xx)
    arc = ((np.abs(r - 0.42) < 0.04) & (np.cos(ang - phi - np.pi) > 0.5)).astype(np.float64)
    base = 0.15 + 0.6 * np.clip(bar + blob + 0.7 * arc, 0.0, 1.0)
    tint = np.array([0.75 + 0.25 * np.cos(phi + 2 * np.pi * ch / 3) for ch in range(channels)])
    return base[..., None] * (tint if channels > 1 else 1.0)


def synth_dataset(num_classes: int = 3, per_class: int = 32, size: tuple[int, int] = (32, 32),
                  channels: int = 1, seed: int = 7, noise: float = 0.15) -> list[Sample]:
    """Deterministic class-pattern images with seeded Gaussian pixel noise, clipped to [0, 1].

    Samples are interleaved by class (0, 1, ..., K-1, 0, 1, ...).
    """
    if num_classes < 2:
        raise DataError(f"synth_dataset needs at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    protos = [class_pattern(c, num_classes, size, channels) for c in range(num_classes)]
    samples = []
    for i in range(per_class):
        for c in range(num_classes):
            img = protos[c] + noise * rng.standard_normal(protos[c].shape)
            samples.append(Sample(np.clip(img, 0.0, 1.0), c, f"synth:{seed}:{c}:{i}"))
    return samples


def stack_samples(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


def write_image_tree(root, samples: list[Sample], class_names) -> Path:
    """Write samples as PNGs in a directory-per-class tree (used for eval fixtures and demos)."""
    from PIL import Image

    root = Path(root)
    for j, s in enumerate(samples):
        d = root / class_names[s.label]
        d.mkdir(parents=True, exist_ok=True)
        arr = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(d / f"{j:05d}.png")
    return root
