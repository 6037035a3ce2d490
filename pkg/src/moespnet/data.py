"""Synthetic texture-vs-shape segmentation scenes, augmentation, dataset I/O.

Classes: 0 background, 1 fine texture, 2 coarse texture, 3 solid square,
4 solid disc.  The two texture classes differ only in local pattern period and
sit inside randomly shaped blobs, so a small receptive field suffices.  Squares
and discs share one flat colour; their interiors are locally identical and only
the global silhouette separates them, which needs a large receptive field.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from moespnet import formats
from moespnet.layers import IGNORE_LABEL
from moespnet.tensor import seed_rng

SCALES = (0.5, 0.75, 1.0, 1.25, 1.5)
CLASS_NAMES = ("background", "texture-fine", "texture-coarse", "square", "disc")


class DataConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    num_classes: int = 5
    min_objects: int = 2
    max_objects: int = 5
    fine_period: int = 2      # texture-fine cell size in pixels
    coarse_period: int = 4    # texture-coarse cell size
    seed: int = 0

    def __post_init__(self):
        if self.canvas < 32:
            raise DataConfigError(f"canvas must be at least 32 pixels, got {self.canvas}")
        if self.num_classes != 5:
            raise DataConfigError("the texture/shape generator defines exactly 5 classes")
        if not 0 <= self.min_objects <= self.max_objects:
            raise DataConfigError("need 0 <= min_objects <= max_objects")


def _blob_mask(rng, yy, xx, cy, cx, r):
    # irregular blob: radius modulated by a few random harmonics
    ang = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot(yy - cy, xx - cx)
    k = rng.integers(2, 5)
    mod = 1 + 0.25 * np.sin(k * ang + rng.uniform(0, 2 * np.pi)) + 0.15 * np.sin((k + 1) * ang + rng.uniform(0, 2 * np.pi))
    return rad <= r * mod


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns image (1, 3, H, W) float32 in [0, 1] and labels (1, 1, H, W) int64."""
    rng = seed_rng([spec.seed, 0, index])
    n = spec.canvas
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    base = rng.uniform(0.25, 0.45) + 0.1 * (yy * rng.uniform(-1, 1) + xx * rng.uniform(-1, 1)) / n
    img = np.repeat(base[None], 3, axis=0)
    lab = np.zeros((n, n), dtype=np.int64)
    shape_color = np.array([0.85, 0.75, 0.55])
    count = rng.integers(spec.min_objects, spec.max_objects + 1)
    for _ in range(count):
        cls = int(rng.integers(1, 5))
        cy, cx = rng.uniform(0, n, size=2)
        if cls in (1, 2):
            r = rng.uniform(0.12, 0.25) * n
            mask = _blob_mask(rng, yy, xx, cy, cx, r)
            period = spec.fine_period if cls == 1 else spec.coarse_period
            py, px = rng.integers(0, 2 * period, size=2)
            checker = (((yy + py) // period + (xx + px) // period) % 2) * 2 - 1
            tint = rng.uniform(0.35, 0.65, size=3)
            amp = rng.uniform(0.2, 0.3)
            patch = tint[:, None, None] + amp * checker[None]
        else:
            half = rng.uniform(0.11, 0.2) * n
            if cls == 3:
                mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
            else:
                # equal area to a square of the same half-width
                mask = np.hypot(yy - cy, xx - cx) <= half * 2 / np.sqrt(np.pi)
            patch = np.broadcast_to(shape_color[:, None, None], (3, n, n))
        img = np.where(mask[None], patch, img)
        lab[mask] = cls
    img = img + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)[None], lab[None, None]


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class Geometry:
    scale: float
    flip: bool
    top: int       # crop offset in the scaled, padded frame
    left: int
    pad_h: int
    pad_w: int


def _resize_matrix(size_in: int, size_out: int) -> np.ndarray:
    scale = size_out / size_in
    m = np.zeros((size_out, size_in))
    for t in range(size_out):
        src = min(max((t + 0.5) / scale - 0.5, 0.0), size_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, size_in - 1)
        f = src - i0
        m[t, i0] += 1 - f
        m[t, i1] += f
    return m


def _nearest_index(size_in: int, size_out: int) -> np.ndarray:
    scale = size_out / size_in
    return np.minimum(((np.arange(size_out) + 0.5) / scale).astype(np.int64), size_in - 1)


def draw_geometry(h: int, w: int, crop: int, rng: np.random.Generator) -> Geometry:
    scale = float(SCALES[rng.integers(len(SCALES))])
    flip = bool(rng.random() < 0.5)
    sh, sw = int(round(h * scale)), int(round(w * scale))
    ph, pw = max(crop - sh, 0), max(crop - sw, 0)
    top = int(rng.integers(0, sh + ph - crop + 1))
    left = int(rng.integers(0, sw + pw - crop + 1))
    return Geometry(scale, flip, top, left, ph, pw)


def apply_geometry(image: np.ndarray, labels: np.ndarray, geo: Geometry, crop: int,
                   ignore_label: int = IGNORE_LABEL) -> tuple[np.ndarray, np.ndarray]:
    """Scale (bilinear image, nearest labels), flip, then pad/crop; identical geometry for both."""
    _, c, h, w = image.shape
    sh, sw = int(round(h * geo.scale)), int(round(w * geo.scale))
    if (sh, sw) == (h, w):
        img = image[0].astype(np.float64)
        lab = labels[0, 0]
    else:
        mh, mw = _resize_matrix(h, sh), _resize_matrix(w, sw)
        img = mh @ image[0].astype(np.float64) @ mw.T
        lab = labels[0, 0][np.ix_(_nearest_index(h, sh), _nearest_index(w, sw))]
    if geo.flip:
        img = img[:, :, ::-1]
        lab = lab[:, ::-1]
    if geo.pad_h or geo.pad_w:
        img = np.pad(img, ((0, 0), (0, geo.pad_h), (0, geo.pad_w)))
        lab = np.pad(lab, ((0, geo.pad_h), (0, geo.pad_w)), constant_values=ignore_label)
    img = img[:, geo.top:geo.top + crop, geo.left:geo.left + crop]
    lab = lab[geo.top:geo.top + crop, geo.left:geo.left + crop]
    return np.ascontiguousarray(img, dtype=image.dtype)[None], np.ascontiguousarray(lab)[None, None]


def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator, crop: int = 64,
            ignore_label: int = IGNORE_LABEL) -> tuple[np.ndarray, np.ndarray]:
    geo = draw_geometry(image.shape[2], image.shape[3], crop, rng)
    return apply_geometry(image, labels, geo, crop, ignore_label)


# -- datasets on disk --------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray   # (M, 3, H, W)
    labels: np.ndarray   # (M, 1, H, W)

    def __len__(self) -> int:
        return len(self.images)


def write_sample(directory: str | Path, index: int, image: np.ndarray, labels: np.ndarray,
                 ignore_label: int = IGNORE_LABEL) -> None:
    d = Path(directory)
    formats.write_sptn(d / f"{index}.sptn", image)
    formats.write_splb(d / f"{index}.splb", labels, ignore_label)


def read_sample(directory: str | Path, index: int) -> tuple[np.ndarray, np.ndarray]:
    d = Path(directory)
    image = formats.read_sptn(d / f"{index}.sptn")
    lab, _ = formats.read_splb(d / f"{index}.splb")
    return image, lab[None, None]


def generate_dataset(root: str | Path, spec: SceneSpec, n_train: int = 512, n_val: int = 64) -> Path:
    """Write ``train/`` and ``val/`` splits plus ``dataset.json``; val indices follow train's."""
    root = Path(root)
    splits = {"train": range(0, n_train), "val": range(n_train, n_train + n_val)}
    for split, idx in splits.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        for k, i in enumerate(idx):
            image, labels = generate_scene(spec, i)
            write_sample(root / split, k, image, labels)
    meta = {"scene_spec": asdict(spec), "splits": {s: len(r) for s, r in splits.items()},
            "classes": list(CLASS_NAMES), "ignore_label": IGNORE_LABEL}
    (root / "dataset.json").write_text(json.dumps(meta, indent=1))
    return root


def load_split(root: str | Path, split: str) -> Dataset:
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset.json under {root}")
    meta = json.loads(meta_path.read_text())
    n = meta["splits"].get(split)
    if n is None:
        raise KeyError(f"split {split!r} not in {root}; have {sorted(meta['splits'])}")
    if n == 0:
        return Dataset(np.zeros((0, 3, 0, 0), np.float32), np.zeros((0, 1, 0, 0), np.int64))
    pairs = [read_sample(root / split, i) for i in range(n)]
    return Dataset(np.concatenate([p[0] for p in pairs]), np.concatenate([p[1] for p in pairs]))


def batch_at(ds: Dataset, seed: int, iteration: int, batch: int, crop: int,
             do_augment: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """The training batch for one iteration: a pure function of (seed, iteration).

    Sample k of the stream draws its dataset index and augmentation from a
    generator keyed on (seed, k), so training can resume at any iteration and
    see exactly the batches an uninterrupted run would.
    """
    imgs, labs = [], []
    for k in range(iteration * batch, (iteration + 1) * batch):
        rng = seed_rng([seed, 1, k])
        i = int(rng.integers(len(ds)))
        image, labels = ds.images[i:i + 1], ds.labels[i:i + 1]
        if do_augment:
            image, labels = augment(image, labels, rng, crop)
        imgs.append(image)
        labs.append(labels)
    return np.concatenate(imgs), np.concatenate(labs)
