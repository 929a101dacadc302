"""Datasets, irregular masks and training batches."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DatasetIOError, GenerationError, InvalidArgumentError, ShapeError
from .implicit import cell_centers
from .sample import IGNORE_LABEL, MaskedSample

BUCKETS = {
    "0-20": (0.0, 0.2),
    "20-40": (0.2, 0.4),
    "40-60": (0.4, 0.6),
}

NUM_LABELS = {"celebahq": 19, "ade20k": 150, "toy": 5}
CELEBAHQ_SPLIT = (25_000, 5_000)
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

TOY_LABEL_NAMES = ("background", "disk", "square", "triangle", "bar")
CELEBAHQ_LABEL_NAMES = (
    "background", "skin", "nose", "eyeglasses", "left eye", "right eye", "left eyebrow", "right eyebrow",
    "left ear", "right ear", "mouth", "upper lip", "lower lip", "hair", "hat", "earring", "necklace",
    "neck", "cloth",
)
ADE20K_LABEL_NAMES = tuple("""
wall|building|sky|floor|tree|ceiling|road|bed|windowpane|grass|cabinet|sidewalk|person|earth|door|table|
mountain|plant|curtain|chair|car|water|painting|sofa|shelf|house|sea|mirror|rug|field|armchair|seat|fence|
desk|rock|wardrobe|lamp|bathtub|railing|cushion|base|box|column|signboard|chest of drawers|counter|sand|
sink|skyscraper|fireplace|refrigerator|grandstand|path|stairs|runway|case|pool table|pillow|screen door|
stairway|river|bridge|bookcase|blind|coffee table|toilet|flower|book|hill|bench|countertop|stove|palm|
kitchen island|computer|swivel chair|boat|bar|arcade machine|hovel|bus|towel|light|truck|tower|chandelier|
awning|streetlight|booth|television receiver|airplane|dirt track|apparel|pole|land|bannister|escalator|
ottoman|bottle|buffet|poster|stage|van|ship|fountain|conveyer belt|canopy|washer|plaything|swimming pool|
stool|barrel|basket|waterfall|tent|bag|minibike|cradle|oven|ball|food|step|tank|trade name|microwave|pot|
animal|bicycle|lake|dishwasher|screen|blanket|sculpture|hood|sconce|vase|traffic light|tray|ashcan|fan|
pier|crt screen|plate|monitor|bulletin board|shower|radiator|glass|clock|flag
""".replace("\n", "").split("|"))
LABEL_NAMES = {"celebahq": CELEBAHQ_LABEL_NAMES, "ade20k": ADE20K_LABEL_NAMES, "toy": TOY_LABEL_NAMES}
# flat per-category colors; the background is a vertical gradient
_TOY_COLORS = np.array([
    [0.55, 0.55, 0.60],
    [0.90, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.20, 0.35, 0.90],
    [0.95, 0.85, 0.20],
])


def parse_bucket(bucket) -> tuple[float, float]:
    if isinstance(bucket, str):
        key = bucket.replace("%", "").replace(" ", "").replace("–", "-")
        if key not in BUCKETS:
            raise InvalidArgumentError(f"unknown mask ratio bucket {bucket!r}; expected one of {list(BUCKETS)}")
        return BUCKETS[key]
    lo, hi = bucket
    if not 0.0 <= lo < hi <= 1.0:
        raise InvalidArgumentError(f"invalid mask ratio bucket {bucket!r}")
    return float(lo), float(hi)


def bucket_name(bucket) -> str:
    lo, hi = parse_bucket(bucket)
    return f"{round(lo * 100)}-{round(hi * 100)}"


# -- datasets --------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "toy"
    root: Optional[str] = None
    split: str = "train"
    image_size: int = 32
    labels: bool = True
    seed: int = 0
    toy_train_size: int = 32
    toy_test_size: int = 16

    def __post_init__(self):
        if self.kind not in NUM_LABELS:
            raise InvalidArgumentError(f"unknown dataset kind {self.kind!r}")
        if self.split not in ("train", "test"):
            raise InvalidArgumentError(f"split must be train or test, got {self.split!r}")

    @property
    def num_labels(self) -> int:
        return NUM_LABELS[self.kind]

    def with_split(self, split: str) -> "DatasetSpec":
        return DatasetSpec(**{**self.__dict__, "split": split})


def _stamp_polygon(rr, cc, verts):
    inside = np.ones_like(rr, dtype=bool)
    n = len(verts)
    # convex polygon with counter-clockwise vertices
    for k in range(n):
        (r0, c0), (r1, c1) = verts[k], verts[(k + 1) % n]
        inside &= (c1 - c0) * (rr - r0) - (r1 - r0) * (cc - c0) <= 0
    return inside


def toy_sample(index: int, size: int = 32, seed: int = 0, split: str = "train") -> MaskedSample:
    """Procedural image of flat-colored shapes over a gradient, with labels."""
    split_id = 0 if split == "train" else 1
    rng = np.random.default_rng([seed, split_id, index])
    rr, cc = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    labels = np.zeros((size, size), dtype=np.int64)
    top = _TOY_COLORS[0] + rng.uniform(-0.1, 0.1, 3)
    bottom = top * rng.uniform(0.6, 0.9)
    t = (rr / size)[..., None]
    image = (1 - t) * top + t * bottom

    for _ in range(rng.integers(2, 4)):
        cat = int(rng.integers(1, len(_TOY_COLORS)))
        extent = rng.uniform(0.35, 0.55) * size
        cr, ccen = rng.uniform(0.25, 0.75, 2) * size
        half = extent / 2
        if cat == 1:
            region = (rr - cr) ** 2 + (cc - ccen) ** 2 <= half ** 2
        elif cat == 2:
            region = (np.abs(rr - cr) <= half * 0.85) & (np.abs(cc - ccen) <= half * 0.85)
        elif cat == 3:
            verts = [(cr - half, ccen), (cr + half * 0.8, ccen - half), (cr + half * 0.8, ccen + half)]
            region = _stamp_polygon(rr, cc, verts)
        else:
            region = (np.abs(rr - cr) <= half * 0.3) & (np.abs(cc - ccen) <= half * 1.1)
        color = np.clip(_TOY_COLORS[cat] + rng.uniform(-0.05, 0.05, 3), 0, 1)
        image[region] = color
        labels[region] = cat

    img = torch.from_numpy(np.clip(image, 0, 1).transpose(2, 0, 1).astype(np.float32))
    lab = torch.from_numpy(labels)
    return MaskedSample(image=img, ground_truth=img.clone(), labels=lab, name=f"toy-{split}-{index:05d}")


def _load_rgb(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            im = _resize_crop(im, size, Image.BICUBIC)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetIOError(f"cannot read image ({exc})", path) from exc


def _load_labels(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = _resize_crop(im, size, Image.NEAREST)
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DatasetIOError(f"cannot read label map ({exc})", path) from exc
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.int64)


def _resize_crop(im: Image.Image, size: int, resample) -> Image.Image:
    w, h = im.size
    scale = size / min(w, h)
    nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
    im = im.resize((nw, nh), resample)
    left, top = (nw - size) // 2, (nh - size) // 2
    return im.crop((left, top, left + size, top + size))


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)


class ImageDataset:
    """Images (and optional label maps) for one split.

    Layout: ``root/<split>/*.png`` with labels at ``root/<split>_labels/<stem>.png``.
    A CelebAHQ root holding a single ``root/images`` directory is split by
    sorted order into 25,000 train / 5,000 test images.
    """

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self._toy_cache: dict[int, MaskedSample] = {}
        if spec.kind == "toy":
            self.files = None
            self.label_dir = None
            return
        if spec.root is None:
            raise DatasetIOError("dataset root is not set")
        root = Path(spec.root)
        split_dir = root / spec.split
        if split_dir.is_dir():
            self.files = _list_images(split_dir)
            other = root / ("test" if spec.split == "train" else "train")
            if other.is_dir():
                overlap = {p.stem for p in self.files} & {p.stem for p in _list_images(other)}
                if overlap:
                    raise DatasetIOError(f"train/test splits share {len(overlap)} images", root)
            self.label_dir = root / f"{spec.split}_labels"
        elif spec.kind == "celebahq" and (root / "images").is_dir():
            files = _list_images(root / "images")
            n_train = min(CELEBAHQ_SPLIT[0], len(files) * CELEBAHQ_SPLIT[0] // sum(CELEBAHQ_SPLIT))
            self.files = files[:n_train] if spec.split == "train" else files[n_train:n_train + CELEBAHQ_SPLIT[1]]
            self.label_dir = root / "labels"
        else:
            raise DatasetIOError("dataset split directory not found", split_dir)

    def __len__(self) -> int:
        if self.files is None:
            return self.spec.toy_train_size if self.spec.split == "train" else self.spec.toy_test_size
        return len(self.files)

    def __getitem__(self, index: int) -> MaskedSample:
        return self.load(index)

    def load(self, index: int) -> MaskedSample:
        n = len(self)
        if not 0 <= index < n:
            raise IndexError(f"index {index} out of range for dataset of size {n}")
        spec = self.spec
        if self.files is None:
            if index not in self._toy_cache:
                sample = toy_sample(index, spec.image_size, spec.seed, spec.split)
                if not spec.labels:
                    sample.labels = None
                self._toy_cache[index] = sample
            return self._toy_cache[index]
        path = self.files[index]
        rgb = torch.from_numpy(_load_rgb(path, spec.image_size).transpose(2, 0, 1).copy())
        labels = None
        if spec.labels and self.label_dir is not None:
            lpath = self.label_dir / f"{path.stem}.png"
            if lpath.exists():
                raw = _load_labels(lpath, spec.image_size)
                if spec.kind == "ade20k":
                    # ADE20K: 0 is "other", 1..150 are the categories
                    raw = np.where(raw == 0, IGNORE_LABEL, raw - 1)
                labels = torch.from_numpy(raw)
        return MaskedSample(image=rgb, ground_truth=rgb.clone(), labels=labels, name=path.stem)


def load_sample(spec: DatasetSpec, index: int) -> MaskedSample:
    return ImageDataset(spec).load(index)


# -- masks -----------------------------------------------------------------


@dataclass(frozen=True)
class MaskSource:
    kind: str = "synthetic"
    bucket: tuple = BUCKETS["20-40"]
    seed: int = 0
    corpus_dir: Optional[str] = None
    invert: bool = False
    max_attempts: int = 64

    def __post_init__(self):
        object.__setattr__(self, "bucket", parse_bucket(self.bucket))
        if self.kind not in ("synthetic", "file-corpus"):
            raise InvalidArgumentError(f"unknown mask source kind {self.kind!r}")
        if self.kind == "file-corpus" and not self.corpus_dir:
            raise InvalidArgumentError("file-corpus mask source needs corpus_dir")


def _segment_distance(rr, cc, a, b):
    ab = b - a
    denom = float(ab @ ab) or 1.0
    t = np.clip(((rr - a[0]) * ab[0] + (cc - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(rr - (a[0] + t * ab[0]), cc - (a[1] + t * ab[1]))


def _synthetic_mask(rng: np.random.Generator, height: int, width: int, lo: float, hi: float,
                    max_attempts: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    scale = min(height, width)
    total = height * width
    if math.floor(hi * total) < max(1, math.ceil(lo * total)):
        raise GenerationError(f"no pixel count of a {height}x{width} mask has a ratio in [{lo}, {hi}]")
    for _ in range(max_attempts):
        target = rng.uniform(max(lo, 0.5 / total), hi)
        mask = np.zeros((height, width), dtype=bool)
        failures = 0
        while mask.sum() / total < target and failures < 16:
            stroke = np.zeros_like(mask)
            if rng.random() < 0.2:
                h = rng.uniform(0.1, 0.35) * height
                w = rng.uniform(0.1, 0.35) * width
                r0, c0 = rng.uniform(0, height - h), rng.uniform(0, width - w)
                stroke = (rr >= r0) & (rr < r0 + h) & (cc >= c0) & (cc < c0 + w)
            else:
                radius = rng.uniform(0.03, 0.08) * scale / (1 + failures)
                point = rng.uniform(0, 1, 2) * (height, width)
                for _ in range(rng.integers(2, 6)):
                    angle = rng.uniform(0, 2 * np.pi)
                    length = rng.uniform(0.1, 0.4) * scale
                    nxt = np.clip(point + length * np.array([np.sin(angle), np.cos(angle)]),
                                  0, (height - 1, width - 1))
                    stroke |= _segment_distance(rr, cc, point, nxt) <= max(radius, 0.5)
                    point = nxt
            merged = mask | stroke
            if merged.sum() / total > hi:
                failures += 1
                continue
            mask = merged
        ratio = mask.sum() / total
        if lo <= ratio <= hi and ratio > 0:
            return mask
    raise GenerationError(f"could not draw a mask with ratio in [{lo}, {hi}] after {max_attempts} attempts")


@functools.lru_cache(maxsize=16)
def _corpus_index(corpus_dir: str, height: int, width: int, invert: bool):
    files = _list_images(Path(corpus_dir))
    if not files:
        raise DatasetIOError("mask corpus is empty", corpus_dir)
    ratios = []
    for f in files:
        ratios.append(float(load_mask_file(f, height, width, invert).mean()))
    return tuple(files), np.array(ratios)


def load_mask_file(path, height: int, width: int, invert: bool = False) -> np.ndarray:
    """Read a grayscale mask, binarize at 0.5 (white = missing) and resize by nearest neighbor."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetIOError(f"cannot read mask ({exc})", path) from exc
    binary = arr >= 0.5
    if invert:
        binary = ~binary
    if binary.shape != (height, width):
        im = Image.fromarray(binary.astype(np.uint8) * 255).resize((width, height), Image.NEAREST)
        binary = np.asarray(im) >= 128
    return binary


def sample_mask(source: MaskSource, height: int, width: int, key: Sequence[int] = ()) -> torch.Tensor:
    """Binary ``(H, W)`` float mask whose missing fraction lies in the source's bucket.

    ``key`` extends the source seed, so ``(seed, key)`` fully determines the mask.
    """
    lo, hi = source.bucket
    rng = np.random.default_rng([source.seed, *[int(k) for k in key]])
    if source.kind == "synthetic":
        mask = _synthetic_mask(rng, height, width, lo, hi, source.max_attempts)
    else:
        files, ratios = _corpus_index(str(source.corpus_dir), height, width, source.invert)
        ok = np.flatnonzero((ratios >= lo) & (ratios <= hi))
        if ok.size == 0:
            raise GenerationError(f"no corpus mask falls in bucket [{lo}, {hi}] at {height}x{width}")
        mask = load_mask_file(files[int(rng.choice(ok))], height, width, source.invert)
    return torch.from_numpy(mask.astype(np.float32))


# -- batches ---------------------------------------------------------------


@dataclass
class TrainBatch:
    images: torch.Tensor  # (B, 3, H, W), masked input
    masks: torch.Tensor  # (B, 1, H, W)
    coords: torch.Tensor  # (B, N, 2)
    targets: torch.Tensor  # (B, N, 3), ground-truth colors
    ground_truth: torch.Tensor  # (B, 3, H, W)
    labels: Optional[torch.Tensor] = None  # (B, H, W)
    pixel_index: Optional[torch.Tensor] = None  # (B, N) flat pixel ids

    def __len__(self):
        return self.images.shape[0]


def pixel_coords(height: int, width: int, flat_index: torch.Tensor) -> torch.Tensor:
    rows = cell_centers(height)[flat_index // width]
    cols = cell_centers(width)[flat_index % width]
    return torch.stack([rows, cols], dim=-1)


def make_batch(samples: Sequence[MaskedSample], masks: Sequence[torch.Tensor], query_count: int,
               rng: np.random.Generator) -> TrainBatch:
    """Masked inputs plus a random subset of pixel-center queries per image."""
    if query_count < 1:
        raise InvalidArgumentError("query_count must be >= 1")
    if len(samples) != len(masks) or not samples:
        raise ShapeError("need one mask per sample")
    masked = [s.with_mask(m) for s, m in zip(samples, masks)]
    sizes = {s.size for s in masked}
    if len(sizes) != 1:
        raise ShapeError(f"samples in a batch must share a size, got {sorted(sizes)}")
    H, W = sizes.pop()
    if query_count > H * W:
        raise InvalidArgumentError(f"query_count {query_count} exceeds the {H * W} pixels per image")
    images = torch.stack([s.masked_image for s in masked])
    mask_t = torch.stack([s.mask for s in masked])
    gt = torch.stack([s.target for s in masked])
    index = torch.stack([torch.from_numpy(rng.permutation(H * W)[:query_count]) for _ in masked])
    coords = pixel_coords(H, W, index)
    flat_gt = gt.flatten(2).transpose(1, 2)
    targets = torch.gather(flat_gt, 1, index.unsqueeze(-1).expand(-1, -1, 3))
    labels = None
    if all(s.labels is not None for s in masked):
        labels = torch.stack([s.labels for s in masked])
    return TrainBatch(images, mask_t, coords, targets, gt, labels, index)
