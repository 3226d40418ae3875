"""Dataset layouts, triple-mask generation, augmentation and synthetic fixtures."""
from __future__ import annotations

import csv
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .types import BACKGROUND, BOUNDARY, INTERIOR, SIZE_MULTIPLE

logger = logging.getLogger(__name__)

# split counts of the official releases
EXPECTED_COUNTS = {
    "glas": {"train": 85, "testA": 60, "testB": 20},
    "crag": {"train": 173, "test": 40},
}

CROSS = ndimage.generate_binary_structure(2, 1)


class DataError(RuntimeError):
    """Dataset layout or file problem."""


@dataclass(frozen=True)
class Entry:
    image: Path
    annotation: Path
    split: str
    grade: Optional[str] = None

    @property
    def name(self):
        return self.image.stem


@dataclass
class DatasetManifest:
    dataset: str
    root: Path
    entries: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def counts(self):
        out = {}
        for e in self.entries:
            out[e.split] = out.get(e.split, 0) + 1
        return out

    def verify_counts(self):
        """Return a one-line summary like ``85/60/20 OK`` against the official split sizes."""
        expected = EXPECTED_COUNTS[self.dataset]
        got = self.counts()
        ok = all(got.get(k, 0) == v for k, v in expected.items())
        nums = "/".join(str(got.get(k, 0)) for k in expected)
        return f"{nums} {'OK' if ok else 'MISMATCH (expected ' + '/'.join(map(str, expected.values())) + ')'}"


def _glas_split(stem):
    m = re.match(r"(train|testA|testB)_", stem)
    return m.group(1) if m else "train"


def _read_glas_grades(root):
    grades = {}
    for path in root.glob("*rade*.csv"):
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if len(row) >= 3 and row[0] and not row[0].lower().startswith("name"):
                    grades[row[0].strip()] = row[2].strip()
    return grades


def load_manifest(root_dir, dataset="glas") -> DatasetManifest:
    """Scan a GlaS or CRAG directory.

    GlaS: ``<name>.bmp`` + ``<name>_anno.bmp``, split taken from the
    ``train_``/``testA_``/``testB_`` prefix, grades from ``Grade.csv`` if present.
    CRAG: any ``Images/`` directory with a sibling ``Annotation/`` holding
    files of the same stem; the split is the parent directory name, with
    ``valid`` treated as ``test``.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    dataset = dataset.lower()
    if dataset not in EXPECTED_COUNTS:
        raise ValueError(f"unknown dataset {dataset!r}; expected glas or crag")
    manifest = DatasetManifest(dataset, root)

    if dataset == "glas":
        grades = _read_glas_grades(root)
        for anno in sorted(root.rglob("*_anno.bmp")):
            stem = anno.name[: -len("_anno.bmp")]
            image = anno.with_name(stem + ".bmp")
            if not image.exists():
                raise DataError(f"annotation {anno} has no matching image {image.name}")
            manifest.entries.append(Entry(image, anno, _glas_split(stem), grades.get(stem)))
        images = [p for p in root.rglob("*.bmp") if not p.name.endswith("_anno.bmp")]
        orphans = {p.stem for p in images} - {e.name for e in manifest.entries}
        if orphans:
            raise DataError(f"{len(orphans)} images lack annotations, e.g. {sorted(orphans)[0]}")
    else:
        for img_dir in sorted(root.rglob("Images")):
            anno_dir = img_dir.parent / "Annotation"
            if not anno_dir.is_dir():
                raise DataError(f"{img_dir} has no sibling Annotation/ directory")
            split = img_dir.parent.name.lower()
            split = "test" if split in ("valid", "val", "test") else "train"
            annos = {p.stem: p for p in anno_dir.iterdir() if p.is_file()}
            for image in sorted(p for p in img_dir.iterdir() if p.is_file()):
                if image.stem not in annos:
                    raise DataError(f"image {image} has no annotation in {anno_dir}")
                manifest.entries.append(Entry(image, annos[image.stem], split))

    if not manifest.entries:
        raise DataError(f"no image/annotation pairs found under {root} (0 matched pairs)")
    expected = EXPECTED_COUNTS[dataset]
    got = manifest.counts()
    if any(got.get(k, 0) != v for k, v in expected.items()):
        msg = f"{dataset} split counts {got} differ from the official release {expected}"
        manifest.warnings.append(msg)
        logger.warning(msg)
    return manifest


def read_image(path) -> np.ndarray:
    """RGB image as float32 H x W x 3 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    return arr / 255.0


def read_instances(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable annotation {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.int32)


def load_entry(entry: Entry):
    image = read_image(entry.image)
    inst = read_instances(entry.annotation)
    if inst.shape != image.shape[:2]:
        raise DataError(f"{entry.annotation} is {inst.shape}, image is {image.shape[:2]}")
    return image, inst


def make_triple_mask(inst: np.ndarray, boundary_width: int = 2) -> np.ndarray:
    """Background / interior / boundary classes from an instance map.

    Each instance is eroded separately (4-connected structuring element,
    ``boundary_width`` iterations, image border counted as outside); the
    removed ring becomes boundary, so two touching glands both contribute a band.
    """
    if boundary_width < 1:
        raise ValueError("boundary_width must be >= 1")
    inst = np.asarray(inst)
    out = np.zeros(inst.shape, dtype=np.uint8)
    objects = ndimage.find_objects(inst.astype(np.int64, copy=False))
    pad = boundary_width + 1
    for label, sl in enumerate(objects, start=1):
        if sl is None:
            continue
        # work on a padded window around the object
        rows = slice(max(sl[0].start - pad, 0), min(sl[0].stop + pad, inst.shape[0]))
        cols = slice(max(sl[1].start - pad, 0), min(sl[1].stop + pad, inst.shape[1]))
        obj = inst[rows, cols] == label
        core = ndimage.binary_erosion(obj, CROSS, iterations=boundary_width, border_value=0)
        window = out[rows, cols]
        window[obj] = BOUNDARY
        window[core] = INTERIOR
    return out


def save_label_png(path, labels, bits=8):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = np.uint16 if bits == 16 else np.uint8
    Image.fromarray(np.asarray(labels).astype(dtype)).save(path)


def cache_dir(default):
    return Path(os.environ.get("DEANET_CACHE") or default)


def cached_triple_mask(entry: Entry, inst, boundary_width, cache_root) -> np.ndarray:
    path = Path(cache_root) / f"w{boundary_width}" / entry.split / f"{entry.name}.png"
    if path.exists():
        with Image.open(path) as im:
            mask = np.asarray(im).astype(np.uint8)
        if mask.shape == inst.shape:
            return mask
    mask = make_triple_mask(inst, boundary_width)
    save_label_png(path, mask)
    return mask


# ----------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    affine_prob: float = 0.5
    rotation: float = 180.0
    scale: tuple = (0.8, 1.25)
    elastic_prob: float = 0.5
    elastic_alpha: float = 100.0
    elastic_sigma: float = 10.0
    crop: tuple = (416, 416)
    pad: int = 0

    def __post_init__(self):
        if any(c % SIZE_MULTIPLE or c <= 0 for c in self.crop):
            raise ValueError(f"crop size {self.crop} must be positive multiples of {SIZE_MULTIPLE}")

    @classmethod
    def identity(cls, crop):
        return cls(hflip_prob=0.0, affine_prob=0.0, elastic_prob=0.0, crop=tuple(crop))


def augment(image, triple_mask, inst_map, cfg: AugmentConfig, seed):
    """Apply one random spatial transform to an image and both of its masks.

    All randomness comes from ``seed``. The transform maps each output pixel of
    the crop back to a source coordinate. Images are resampled bilinearly, masks
    by nearest neighbour, and reflection fills any out-of-range samples.
    """
    rng = np.random.default_rng(seed)
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    if triple_mask.shape != (h, w) or inst_map.shape != (h, w):
        raise ValueError("image and masks must share H x W")
    ch, cw = cfg.crop
    if ch > h + 2 * cfg.pad or cw > w + 2 * cfg.pad:
        raise ValueError(f"crop {cfg.crop} larger than padded image {(h + 2 * cfg.pad, w + 2 * cfg.pad)}")

    flip = rng.random() < cfg.hflip_prob
    do_affine = rng.random() < cfg.affine_prob
    angle = np.deg2rad(rng.uniform(-cfg.rotation, cfg.rotation)) if do_affine else 0.0
    scale = float(np.exp(rng.uniform(*np.log(cfg.scale)))) if do_affine else 1.0
    do_elastic = rng.random() < cfg.elastic_prob
    top = int(rng.integers(-cfg.pad, h + cfg.pad - ch + 1))
    left = int(rng.integers(-cfg.pad, w + cfg.pad - cw + 1))

    identity = not (flip or do_affine or do_elastic)
    if identity and 0 <= top and 0 <= left and top + ch <= h and left + cw <= w:
        sl = (slice(top, top + ch), slice(left, left + cw))
        return image[sl].copy(), triple_mask[sl].copy(), inst_map[sl].copy()

    yy, xx = np.meshgrid(np.arange(ch, dtype=np.float64) + top, np.arange(cw, dtype=np.float64) + left,
                         indexing="ij")
    if do_elastic:
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (ch, cw)), cfg.elastic_sigma) * cfg.elastic_alpha
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (ch, cw)), cfg.elastic_sigma) * cfg.elastic_alpha
        yy, xx = yy + dy, xx + dx
    if do_affine:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        cos, sin = np.cos(angle) / scale, np.sin(angle) / scale
        yy, xx = cy + cos * (yy - cy) - sin * (xx - cx), cx + sin * (yy - cy) + cos * (xx - cx)
    if flip:
        xx = (w - 1) - xx

    coords = np.stack([yy, xx])
    out_img = np.stack(
        [ndimage.map_coordinates(image[..., c], coords, order=1, mode="mirror") for c in range(image.shape[2])],
        axis=-1,
    ).astype(np.float32)
    out_tm = ndimage.map_coordinates(triple_mask, coords, order=0, mode="mirror").astype(triple_mask.dtype)
    out_inst = ndimage.map_coordinates(inst_map, coords, order=0, mode="mirror").astype(inst_map.dtype)
    return out_img, out_tm, out_inst


def hflip(image, *masks):
    return (image[:, ::-1].copy(),) + tuple(m[:, ::-1].copy() for m in masks)


# ----------------------------------------------------------------- torch dataset


class GlandDataset(torch.utils.data.Dataset):
    """Image / triple-mask / instance samples with seed-driven augmentation.

    ``set_epoch`` must be called before each epoch: the augmentation seed of
    item ``i`` is a pure function of ``(seed, epoch, i)``.
    """

    def __init__(self, samples, augment_cfg: Optional[AugmentConfig] = None, seed=0):
        self.samples = samples  # list of (name, image HxWx3, triple HxW, inst HxW)
        self.augment_cfg = augment_cfg
        self.seed = seed
        self.epoch = 0

    @classmethod
    def from_entries(cls, entries, boundary_width=2, cache_root=None, **kw):
        samples = []
        for e in entries:
            image, inst = load_entry(e)
            tm = (
                cached_triple_mask(e, inst, boundary_width, cache_root)
                if cache_root
                else make_triple_mask(inst, boundary_width)
            )
            samples.append((e.name, image, tm, inst))
        return cls(samples, **kw)

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        name, image, tm, inst = self.samples[i]
        if self.augment_cfg is not None:
            seed = np.random.SeedSequence([self.seed, self.epoch, i])
            image, tm, inst = augment(image, tm, inst, self.augment_cfg, seed)
        return (
            torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))),
            torch.from_numpy(tm.astype(np.int64)),
            torch.from_numpy(inst.astype(np.int64)),
        )


# ----------------------------------------------------------------- synthetic fixtures


def synthetic_sample(rng, size=64, n_glands=None, touching=True, noise=0.04, contrast=1.0):
    """One fake H&E tile and its instance map.

    Glands are ellipses with a pale lumen ringed by dark epithelial nuclei on a
    pink stroma. With ``touching`` some pairs of glands share an edge. Lower
    ``contrast`` pulls lumen and nuclei towards the stroma colour.
    """
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w]
    inst = np.zeros((h, w), dtype=np.int32)
    n = n_glands if n_glands is not None else int(rng.integers(2, 5))
    label = 0
    for _ in range(n * 10):
        if label >= n:
            break
        ry, rx = rng.uniform(0.10, 0.2, 2) * size
        cy, cx = rng.uniform(ry, h - ry), rng.uniform(rx, w - rx)
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dy * np.cos(t) + dx * np.sin(t)) / ry
        v = (-dy * np.sin(t) + dx * np.cos(t)) / rx
        blob = u ** 2 + v ** 2 <= 1.0
        overlap = blob & (inst > 0)
        if overlap.any() and not (touching and overlap.sum() < 0.15 * blob.sum()):
            continue
        label += 1
        inst[blob & (inst == 0)] = label
    tm = make_triple_mask(inst, max(1, size // 32))

    stroma = np.array([0.93, 0.72, 0.82])
    lumen = np.array([0.98, 0.93, 0.95])
    nuclei = np.array([0.35, 0.20, 0.55])
    image = np.empty((h, w, 3))
    image[:] = stroma
    image[tm == INTERIOR] = stroma + contrast * (lumen - stroma)
    image[tm == BOUNDARY] = stroma + contrast * (nuclei - stroma)
    image += rng.normal(0, noise, image.shape)
    image = ndimage.gaussian_filter(image, sigma=(0.6, 0.6, 0))
    return np.clip(image, 0, 1).astype(np.float32), inst


def synthetic_samples(n, size=64, seed=0, boundary_width=None, **style):
    """``n`` (name, image, triple, inst) tuples, ready for :class:`GlandDataset`.

    ``style`` goes to :func:`synthetic_sample` (``noise``, ``contrast``, ...).
    """
    rng = np.random.default_rng(seed)
    bw = boundary_width or max(1, size // 32)
    out = []
    for i in range(n):
        image, inst = synthetic_sample(rng, size, **style)
        out.append((f"synthetic_{i}", image, make_triple_mask(inst, bw), inst))
    return out


def write_synthetic_glas(root, counts=None, size=64, seed=0):
    """Write a GlaS-layout fixture directory (bmp image + ``_anno.bmp`` pairs)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counts = counts or {"train": 8, "testA": 2, "testB": 2}
    rng = np.random.default_rng(seed)
    for split, n in counts.items():
        for i in range(1, n + 1):
            image, inst = synthetic_sample(rng, size)
            Image.fromarray((image * 255).round().astype(np.uint8)).save(root / f"{split}_{i}.bmp")
            Image.fromarray(inst.astype(np.uint8)).save(root / f"{split}_{i}_anno.bmp")
    return root
