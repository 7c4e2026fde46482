"""Synthetic dataset generation, dataset directories on disk, group-level splits.

On-disk layout::

    images/<sample_id>.png   8-bit grayscale
    masks/<sample_id>.png    1-bit ground truth (optional per sample)
    manifest.csv             sample_id,path,label,group_id,mask_path
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from mlcam.errors import ConfigError, DataError
from mlcam.network import D, ND

MANIFEST_FIELDS = ("sample_id", "path", "label", "group_id", "mask_path")
# blob radius as a fraction of image width
FEATURE_SCALES = {"intermediate": (0.10, 0.25), "restrictive": (0.03, 0.08)}

T = TypeVar("T")
R = TypeVar("R")


def n_threads() -> int:
    """Worker cap from ``MLCAM_THREADS`` (default 1)."""
    raw = os.environ.get("MLCAM_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"MLCAM_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"MLCAM_THREADS must be >= 1, got {value}")
    return value


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Order-preserving map over a thread pool sized by :func:`n_threads`."""
    workers = n_threads()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class SegSample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    label: str
    gt_mask: np.ndarray | None
    group_id: str
    sample_id: str

    def __post_init__(self):
        if self.label not in (D, ND):
            raise DataError(f"sample {self.sample_id}: label must be D or ND, got {self.label!r}")
        if self.gt_mask is not None:
            fg = bool(np.any(self.gt_mask))
            if self.label == D and not fg:
                raise DataError(f"sample {self.sample_id}: D sample with empty mask")
            if self.label == ND and fg:
                raise DataError(f"sample {self.sample_id}: ND sample with foreground mask")


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_groups: int = 20
    images_per_group: int = 30
    feature_scale: str = "intermediate"
    texture_noise: float = 0.06
    distractor_density: float = 2.0
    blob_contrast: float = 0.45
    seed: int = 0

    def __post_init__(self):
        if self.feature_scale not in FEATURE_SCALES:
            raise ConfigError(f"feature_scale must be one of {sorted(FEATURE_SCALES)}, got {self.feature_scale!r}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.n_groups < 1 or self.images_per_group < 1:
            raise ConfigError("n_groups and images_per_group must be >= 1")
        if self.texture_noise < 0 or self.distractor_density < 0:
            raise ConfigError("texture_noise and distractor_density must be non-negative")
        lo, hi = self.radius_range
        if not 0 < lo <= hi < 0.5:
            raise ConfigError(f"invalid blob radius range {self.radius_range}")
        if self.radius_px[0] < 1.0:
            raise ConfigError(f"image_size {self.image_size} too small for {self.feature_scale} blobs")

    @property
    def radius_range(self) -> tuple[float, float]:
        return FEATURE_SCALES[self.feature_scale]

    @property
    def radius_px(self) -> tuple[float, float]:
        lo, hi = self.radius_range
        return lo * self.image_size, hi * self.image_size

    @property
    def n_samples(self) -> int:
        return self.n_groups * self.images_per_group


def _background(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    smooth = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16, mode="wrap")
    smooth /= smooth.std() + 1e-12
    fine = rng.standard_normal((size, size))
    return 0.25 + amplitude * smooth + 0.5 * amplitude * fine


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _streak(rng: np.random.Generator, size: int) -> np.ndarray:
    """Thin quadratic Bezier curve, one pixel wide."""
    p = rng.uniform(0, size - 1, size=(3, 2))
    t = np.linspace(0.0, 1.0, 4 * size)[:, None]
    pts = (1 - t) ** 2 * p[0] + 2 * (1 - t) * t * p[1] + t**2 * p[2]
    out = np.zeros((size, size), dtype=bool)
    ij = np.clip(np.rint(pts).astype(np.int64), 0, size - 1)
    out[ij[:, 0], ij[:, 1]] = True
    return out


def synth_sample(cfg: SynthConfig, index: int) -> SegSample:
    """Sample ``index`` of the dataset described by ``cfg``; independent of other samples."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    label = D if index % 2 == 0 else ND
    img = _background(rng, size, cfg.texture_noise)

    mask = np.zeros((size, size), dtype=bool)
    if label == D:
        r_lo, r_hi = cfg.radius_px
        for _ in range(int(rng.integers(1, 4))):
            ry, rx = rng.uniform(r_lo, r_hi, size=2)
            r = max(ry, rx)
            cy, cx = rng.uniform(r, size - 1 - r, size=2) if size - 1 - 2 * r > 0 else (size / 2, size / 2)
            blob = _ellipse(size, cy, cx, ry, rx, rng.uniform(0, np.pi))
            if not blob.any():
                blob[int(round(cy)), int(round(cx))] = True
            # speckled interior mimics densely packed nuclei
            texture = 0.7 + 0.3 * rng.random((size, size))
            img += blob * cfg.blob_contrast * texture
            mask |= blob

    for _ in range(int(rng.poisson(cfg.distractor_density))):
        img += _streak(rng, size) * rng.uniform(0.35, 0.55)
    n_speckle = int(rng.poisson(10 * cfg.distractor_density))
    if n_speckle:
        yx = rng.integers(0, size, size=(n_speckle, 2))
        img[yx[:, 0], yx[:, 1]] += rng.uniform(0.3, 0.6, size=n_speckle)

    img = np.clip(img, 0.0, 1.0)
    return SegSample(
        image=img[None],
        label=label,
        gt_mask=mask,
        group_id=f"g{index % cfg.n_groups:03d}",
        sample_id=f"s{index:05d}",
    )


def generate(cfg: SynthConfig) -> list[SegSample]:
    return parallel_map(lambda i: synth_sample(cfg, i), list(range(cfg.n_samples)))


def split_by_group(
    samples: Sequence[SegSample],
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> tuple[list[SegSample], list[SegSample], list[SegSample]]:
    """Partition whole groups into (train, val, test)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    groups = sorted({s.group_id for s in samples})
    if len(groups) < 3:
        raise ConfigError(f"need at least 3 groups to split, got {len(groups)}")
    order = np.random.default_rng(seed).permutation(len(groups))
    n_train = int(round(fractions[0] * len(groups)))
    n_val = int(round(fractions[1] * len(groups)))
    if min(n_train, n_val, len(groups) - n_train - n_val) < 1:
        raise ConfigError(f"fractions {fractions} leave an empty split for {len(groups)} groups")
    assign = {}
    for rank, gi in enumerate(order):
        assign[groups[gi]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    parts: tuple[list, list, list] = ([], [], [])
    for s in samples:
        parts[assign[s.group_id]].append(s)
    return parts


def split_groups(parts: Iterable[Sequence[SegSample]]) -> list[set[str]]:
    return [{s.group_id for s in p} for p in parts]


def export_dataset(samples: Sequence[SegSample], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        rel = f"images/{s.sample_id}.png"
        pixels = np.rint(np.clip(s.image[0], 0, 1) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(out / rel)
        mask_rel = ""
        if s.gt_mask is not None:
            mask_rel = f"masks/{s.sample_id}.png"
            Image.fromarray(np.asarray(s.gt_mask, dtype=bool)).save(out / mask_rel)
        rows.append((s.sample_id, rel, s.label, s.group_id, mask_rel))
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    return out


def read_image(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Grayscale image as ``[H, W]`` floats in [0, 1], bilinear-resized to ``size``."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def read_mask(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.NEAREST)
        return np.asarray(im) > 127


def load_images(
    directory: str | Path,
    manifest: str | Path = "manifest.csv",
    size: tuple[int, int] | None = None,
) -> list[SegSample]:
    """Load a dataset directory. Every bad row is collected into one DataError."""
    root = Path(directory)
    manifest_path = root / manifest
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in MANIFEST_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"manifest {manifest_path} is missing columns", [", ".join(missing)])
        rows = list(reader)

    def _load(item):
        row_no, row = item
        label = row["label"].strip()
        if label not in (D, ND):
            return None, f"row {row_no}: unknown label {label!r}"
        try:
            img = read_image(root / row["path"], size)
            mask = read_mask(root / row["mask_path"], img.shape) if row["mask_path"].strip() else None
            return SegSample(img[None], label, mask, row["group_id"], row["sample_id"]), None
        except FileNotFoundError as exc:
            return None, f"row {row_no}: missing file {exc.filename}"
        except (UnidentifiedImageError, OSError) as exc:
            return None, f"row {row_no}: cannot decode image ({exc})"
        except DataError as exc:
            return None, f"row {row_no}: {exc}"

    # header is row 1
    results = parallel_map(_load, list(enumerate(rows, start=2)))
    problems = [p for _, p in results if p]
    if problems:
        raise DataError(f"{len(problems)} bad manifest row(s) in {manifest_path}", problems)
    return [s for s, _ in results]


def stack_images(samples: Sequence[SegSample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float64)
