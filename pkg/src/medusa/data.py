"""Synthetic chest-radiograph-like data, manifest I/O, and batching.

Each image shows a body silhouette with two dark lung fields (the mask).
Positive images carry 1-3 bright round lesions lying entirely inside the
lungs; negatives carry none.  Both classes may carry bright wire-like
distractors placed strictly outside the lungs.
"""
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import netpbm
from .tensor import ConfigError, MedusaError, ShapeError

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["image", "mask", "label", "split"]

BACKGROUND = 0.05
BODY = 0.45
LUNG = 0.2
DISTRACTOR = 0.35


class DatasetError(MedusaError):
    """A manifest row or the file it points at is unusable."""

    def __init__(self, message, row=None, path=None):
        self.row = row
        self.path = path
        where = []
        if row is not None:
            where.append("row %d" % row)
        if path is not None:
            where.append(str(path))
        super().__init__("%s: %s" % (", ".join(where), message) if where else message)


@dataclass
class SyntheticConfig:
    image_size: int = 64
    n_train: int = 1600
    n_val: int = 200
    n_test: int = 200
    positive_fraction: float = 0.5
    lesion_count: tuple = (1, 3)
    lesion_radius: tuple = (2.0, 6.0)
    lesion_contrast: tuple = (0.08, 0.25)
    distractor_prob: float = 0.3
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("lesion_count", "lesion_radius", "lesion_contrast"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError("%s range is empty: (%s, %s)" % (name, lo, hi))
        if self.lesion_count[0] < 1:
            raise ConfigError("positive samples need at least one lesion")
        for name in ("positive_fraction", "distractor_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError("%s must lie in [0, 1], got %s" % (name, v))
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.noise_sigma < 0:
            raise ConfigError("sample counts and noise must be non-negative")

    def split_sizes(self):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


@dataclass
class SyntheticSample:
    image: np.ndarray  # float in [0, 1], before 8-bit quantisation
    label: int
    mask: np.ndarray  # uint8 0/1 lung region
    lesions: np.ndarray = None  # bool footprint of all lesions
    distractors: np.ndarray = None  # bool footprint of all distractors
    lesion_params: list = field(default_factory=list)


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _dilate(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _smooth_field(rng, yy, xx, size, amplitude):
    field_ = np.zeros_like(yy)
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / size
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(fy * yy + fx * xx + phase)
    return amplitude * field_ / 3.0


def _distractor(rng, yy, xx, size):
    """Footprint of a thin bright bar or arc."""
    if rng.random() < 0.5:
        y0, x0 = rng.uniform(0, size, size=2)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(0.25, 0.6) * size
        dy, dx = np.sin(angle), np.cos(angle)
        t = (yy - y0) * dy + (xx - x0) * dx
        dist = np.abs((yy - y0) * dx - (xx - x0) * dy)
        return (dist <= rng.uniform(0.5, 1.2)) & (np.abs(t) <= length / 2)
    cy, cx = rng.uniform(0, size, size=2)
    radius = rng.uniform(0.15, 0.4) * size
    start = rng.uniform(0, 2 * np.pi)
    span = rng.uniform(0.5, 1.5)
    ang = np.mod(np.arctan2(yy - cy, xx - cx) - start, 2 * np.pi)
    ring = np.abs(np.hypot(yy - cy, xx - cx) - radius) <= rng.uniform(0.5, 1.2)
    return ring & (ang <= span)


def generate_sample(rng, config, label):
    """Draw one sample from ``rng``; ``label`` 1 adds lesions."""
    s = config.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    j = lambda scale: rng.uniform(-scale, scale) * s  # noqa: E731

    body = _ellipse(yy, xx, 0.52 * s + j(0.02), 0.5 * s + j(0.02), 0.46 * s, 0.42 * s)
    image = np.where(body, BODY, BACKGROUND)
    mask = np.zeros((s, s), dtype=bool)
    for side in (-1, 1):
        cy = 0.48 * s + j(0.03)
        cx = 0.5 * s + side * (0.2 * s + j(0.02))
        ry = 0.27 * s * rng.uniform(0.92, 1.05)
        rx = 0.13 * s * rng.uniform(0.92, 1.08)
        mask |= _ellipse(yy, xx, cy, cx, ry, rx)
    image = np.where(mask, LUNG, image)
    image = image + _smooth_field(rng, yy, xx, s, 0.03)

    lesions = np.zeros((s, s), dtype=bool)
    params = []
    if label == 1:
        count = int(rng.integers(config.lesion_count[0], config.lesion_count[1] + 1))
        inside = np.argwhere(mask)
        while len(params) < count:
            r = rng.uniform(*config.lesion_radius)
            contrast = rng.uniform(*config.lesion_contrast)
            for _ in range(200):
                cy, cx = inside[rng.integers(len(inside))] + rng.uniform(-0.5, 0.5, size=2)
                dist = np.hypot(yy - cy, xx - cx)
                footprint = dist < r
                if footprint.any() and not np.any(footprint & ~mask):
                    break
            else:
                continue  # radius too large for this lung shape; redraw it
            # flat-topped disc with a one-pixel soft edge
            image = image + contrast * np.clip(r - dist, 0.0, 1.0)
            lesions |= footprint
            params.append((float(cy), float(cx), float(r), float(contrast)))

    distractors = np.zeros((s, s), dtype=bool)
    if rng.random() < config.distractor_prob:
        keep_out = _dilate(mask)
        for _ in range(50):
            fp = _distractor(rng, yy, xx, s)
            if fp.any() and not np.any(fp & keep_out):
                distractors = fp
                image = np.where(fp, image + DISTRACTOR, image)
                break

    image = image + rng.normal(0.0, config.noise_sigma, size=(s, s))
    return SyntheticSample(np.clip(image, 0.0, 1.0), int(label), mask.astype(np.uint8), lesions, distractors, params)


def split_labels(n, positive_fraction, rng):
    n_pos = int(round(n * positive_fraction))
    labels = np.array([1] * n_pos + [0] * (n - n_pos), dtype=np.int64)
    rng.shuffle(labels)
    return labels


def iter_samples(config, split):
    """Yield the samples of one split; each draws from its own seeded stream."""
    split_id = SPLITS.index(split)
    n = config.split_sizes()[split]
    labels = split_labels(n, config.positive_fraction, np.random.default_rng([config.seed, split_id]))
    for i in range(n):
        rng = np.random.default_rng([config.seed, split_id, i + 1])
        yield generate_sample(rng, config, labels[i])


def generate_dataset(config, out_dir):
    """Write images, masks (P5), and ``manifest.csv`` under ``out_dir``; return the manifest path."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    rows = []
    for split in SPLITS:
        for i, sample in enumerate(iter_samples(config, split)):
            stem = "%s_%05d.pgm" % (split, i)
            img_rel = "images/" + stem
            mask_rel = "masks/" + stem
            netpbm.write(os.path.join(out_dir, img_rel), netpbm.quantize(sample.image))
            netpbm.write(os.path.join(out_dir, mask_rel), sample.mask * np.uint8(255))
            rows.append([img_rel, mask_rel, str(sample.label), split])
    path = os.path.join(out_dir, "manifest.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return path


@dataclass
class Dataset:
    images: np.ndarray  # N x 1 x H x W, float in [0, 1]
    labels: np.ndarray
    masks: np.ndarray = None  # N x 1 x H x W of 0/1, or None when the manifest has none
    paths: list = field(default_factory=list)
    split: str = None

    def __len__(self):
        return len(self.labels)

    @property
    def has_masks(self):
        return self.masks is not None

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], None if self.masks is None else self.masks[idx],
                       [self.paths[i] for i in idx], self.split)

    def batches(self, batch_size, shuffle=False, seed=0):
        """Yield ``(images, labels, masks, indices)``; the last batch may be short."""
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        order = np.arange(len(self))
        if shuffle:
            np.random.default_rng(seed).shuffle(order)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            masks = None if self.masks is None else self.masks[idx]
            yield self.images[idx], self.labels[idx], masks, idx


def read_manifest(path):
    """Parse the manifest into dict rows, each tagged with its 1-based line number."""
    try:
        with open(path, newline="") as fh:
            lines = list(csv.reader(fh))
    except OSError as exc:
        raise DatasetError("cannot read manifest: %s" % exc.strerror, path=path) from None
    if not lines or [c.strip() for c in lines[0]] != MANIFEST_HEADER:
        raise DatasetError("manifest header must be %s" % ",".join(MANIFEST_HEADER), row=1, path=path)
    rows = []
    for lineno, cells in enumerate(lines[1:], start=2):
        if not cells:
            continue
        if len(cells) != 4:
            raise DatasetError("expected 4 columns, got %d" % len(cells), row=lineno, path=path)
        image, mask, label, split = (c.strip() for c in cells)
        if split not in SPLITS:
            raise DatasetError("unknown split %r" % split, row=lineno, path=path)
        if label not in ("0", "1"):
            raise DatasetError("label must be 0 or 1, got %r" % label, row=lineno, path=path)
        rows.append({"row": lineno, "image": image, "mask": mask or None, "label": int(label), "split": split})
    seen = {}
    for r in rows:
        prev = seen.setdefault(r["image"], r["split"])
        if prev != r["split"]:
            raise DatasetError("image listed in both %s and %s" % (prev, r["split"]), row=r["row"], path=path)
    return rows


def _load_plane(path, row):
    try:
        pixels = netpbm.read(path)
    except FileNotFoundError:
        raise DatasetError("file not found", row=row, path=path) from None
    except OSError as exc:
        raise DatasetError("cannot read file: %s" % exc.strerror, row=row, path=path) from None
    except netpbm.NetpbmError as exc:
        raise DatasetError("malformed P5 file: %s" % exc, row=row, path=path) from None
    if pixels.ndim != 2:
        raise DatasetError("expected a P5 grayscale image", row=row, path=path)
    return pixels


def load_dataset(manifest_path, split=None, dtype=np.float32):
    """Load one split (or every row, if ``split`` is None) into memory."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    rows = [r for r in read_manifest(manifest_path) if split is None or r["split"] == split]
    if not rows:
        raise DatasetError("no rows for split %r" % split, path=manifest_path)
    with_mask = [r["mask"] is not None for r in rows]
    if any(with_mask) and not all(with_mask):
        raise DatasetError("some rows have masks and some do not", path=manifest_path)
    images, masks, shape = [], [], None
    for r in rows:
        img = _load_plane(os.path.join(base, r["image"]), r["row"])
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DatasetError("image is %dx%d, expected %dx%d" % (img.shape + shape), row=r["row"])
        images.append(img)
        if r["mask"] is not None:
            m = _load_plane(os.path.join(base, r["mask"]), r["row"])
            if m.shape != shape:
                raise DatasetError("mask extents do not match the image", row=r["row"])
            masks.append(m)
    images = (np.stack(images)[:, None] / np.float64(255)).astype(dtype)
    mask_arr = (np.stack(masks)[:, None] > 127).astype(dtype) if masks else None
    labels = np.array([r["label"] for r in rows], dtype=np.int64)
    return Dataset(images, labels, mask_arr, [r["image"] for r in rows], split)


def apply_seg_ablation(image, mask, kind):
    """Segmentation-input ablations: ``type1`` keeps only the masked region, ``type2`` adds it back onto the image."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ShapeError("image %s and mask %s shapes differ" % (image.shape, mask.shape))
    segmented = image * mask
    if kind == "type1":
        return segmented
    if kind == "type2":
        return np.clip(image + segmented, 0.0, 1.0).astype(image.dtype)
    raise ConfigError("unknown segmentation ablation %r" % (kind,))


def synthesize(config, split, dtype=np.float32):
    """Build a split in memory, quantised exactly as a write/load round trip would be."""
    images, masks, labels = [], [], []
    for sample in iter_samples(config, split):
        images.append(netpbm.quantize(sample.image))
        masks.append(sample.mask)
        labels.append(sample.label)
    if not labels:
        raise DatasetError("split %r is empty" % split)
    imgs = (np.stack(images)[:, None] / np.float64(255)).astype(dtype)
    return Dataset(imgs, np.array(labels, dtype=np.int64), np.stack(masks)[:, None].astype(dtype), [], split)
