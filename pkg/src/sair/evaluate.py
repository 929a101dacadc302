"""Bucketed evaluation reports, comparison grids and the mIoU probe."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from . import metrics
from .config import RunConfig
from .data import BUCKETS, ImageDataset, sample_mask
from .errors import ConfigurationError
from .model import SAIRModel, reconstruct
from .semantic import naive_upsample, sir_dense
from .training import derive_seeds, model_from_checkpoint, read_checkpoint

# offsets the evaluation mask stream away from any training key
_EVAL_KEY = 7_001


@dataclass
class BucketMetrics:
    psnr: float
    ssim: float
    l1: float
    lpips: Optional[float]
    psnr_masked: float
    count: int


@dataclass
class MetricReport:
    buckets: dict
    sample_count: int
    config_hash: str
    model: str
    checkpoint: str = ""
    metadata: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "buckets": {k: asdict(v) for k, v in self.buckets.items()},
            "sample_count": self.sample_count,
            "config_hash": self.config_hash,
            "model": self.model,
            "checkpoint": self.checkpoint,
            "metadata": self.metadata,
        }

    def to_text(self) -> str:
        lines = [f"model: {self.model}   config: {self.config_hash[:10]}   samples: {self.sample_count}",
                 f"{'bucket':>8} {'PSNR':>8} {'SSIM':>7} {'L1':>8} {'LPIPS':>7} {'PSNR(m)':>8} {'n':>5}"]
        for name, b in self.buckets.items():
            lp = "-" if b.lpips is None else f"{b.lpips:.4f}"
            lines.append(f"{name:>8} {b.psnr:8.3f} {b.ssim:7.4f} {b.l1:8.5f} {lp:>7} {b.psnr_masked:8.3f} {b.count:5d}")
        notes = ", ".join(f"{k}={v}" for k, v in sorted(self.metadata.items()))
        lines.append(f"notes: {notes}")
        lines.append("")
        lines.append("# record")
        lines.append(json.dumps(self.to_record(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def read(cls, path) -> "MetricReport":
        text = Path(path).read_text()
        rec = json.loads(text.split("# record\n", 1)[1])
        rec["buckets"] = {k: BucketMetrics(**v) for k, v in rec["buckets"].items()}
        return cls(**rec)


def eval_mask(config: RunConfig, bucket: str, index: int, height: int, width: int) -> torch.Tensor:
    """The fixed test mask for image ``index`` in ``bucket``."""
    seeds = derive_seeds(config.seed)
    b = list(BUCKETS).index(bucket)
    return sample_mask(config.masks.source(bucket, seeds["mask"]), height, width, key=(_EVAL_KEY, b, index))


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    return (img.clamp(0, 1).permute(1, 2, 0).numpy() * 255 + 0.5).astype(np.uint8)


def save_grid(rows, path) -> Path:
    """Rows of ``(masked input, mask, prediction, ground truth)`` tiles as one PNG."""
    tiles = []
    for masked, mask, pred, gt in rows:
        m = mask.expand(3, -1, -1)
        tiles.append(np.concatenate([_to_uint8(t) for t in (masked, m, pred, gt)], axis=1))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.concatenate(tiles, axis=0)).save(path)
    return path


def _load(checkpoint, config: Optional[RunConfig]):
    payload = read_checkpoint(checkpoint)
    model, ck_config = model_from_checkpoint(payload)
    return model, config or ck_config, payload


def evaluate(checkpoint, config: Optional[RunConfig] = None, buckets=None, figures_dir=None,
             lpips_backend=None) -> MetricReport:
    """PSNR / SSIM / L1 / LPIPS per mask-ratio bucket over the test split.

    Every test image gets a fixed seeded mask per bucket, so reruns are
    byte-identical. Metrics use the full image; ``psnr_masked`` restricts
    PSNR to the missing pixels.
    """
    model, config, _ = _load(checkpoint, config)
    if lpips_backend is None:
        lpips_backend = metrics.load_lpips_backend(config.eval.lpips_backend)
    buckets = list(buckets or config.masks.test_buckets)
    dataset = ImageDataset(config.dataset.spec("test", config.seed))
    ceiling = config.eval.psnr_ceiling
    results = {}
    total = 0
    for bucket in buckets:
        rows, grid = [], []
        for i in range(len(dataset)):
            sample = dataset[i]
            H, W = sample.size
            s = sample.with_mask(eval_mask(config, bucket, i, H, W))
            pred = reconstruct(s, model)
            gt = s.target
            rows.append((
                metrics.psnr(pred, gt, ceiling),
                metrics.ssim(pred, gt),
                metrics.l1(pred, gt),
                metrics.lpips(pred, gt, lpips_backend),
                metrics.psnr(pred, gt, ceiling, mask=s.mask),
            ))
            if figures_dir is not None and len(grid) < config.eval.figure_count:
                grid.append((s.masked_image, s.mask, pred, gt))
        arr = np.array([[r[0], r[1], r[2], r[4]] for r in rows], dtype=np.float64)
        lp = [r[3] for r in rows]
        results[bucket] = BucketMetrics(
            psnr=float(arr[:, 0].mean()),
            ssim=float(arr[:, 1].mean()),
            l1=float(arr[:, 2].mean()),
            lpips=None if any(v is None for v in lp) else float(np.mean(lp)),
            psnr_masked=float(np.nanmean(arr[:, 3])),
            count=len(rows),
        )
        total += len(rows)
        if grid:
            save_grid(grid, Path(figures_dir) / f"grid-{bucket}.png")
    meta = {
        "psnr_ceiling_db": ceiling,
        "ssim": "gaussian11-sigma1.5-per-channel-mean",
        "lpips_backend": config.eval.lpips_backend if lpips_backend is not None else "absent",
        "region": "full-image",
    }
    return MetricReport(results, total, config.hash(), model.flags.name, Path(checkpoint).name, meta)


@dataclass
class ProbeResult:
    raw_miou: float
    sir_miou: Optional[float]
    count: int
    bucket: str

    def to_text(self) -> str:
        sir = "-" if self.sir_miou is None else f"{self.sir_miou:.4f}"
        return (f"{'variant':<24} {'mIoU':>7}\n"
                f"{'encoder (raw masked)':<24} {self.raw_miou:7.4f}\n"
                f"{'encoder + SIR':<24} {sir:>7}\n"
                f"bucket {self.bucket}, {self.count} images\n")


@torch.no_grad()
def probe(model: SAIRModel, config: RunConfig, bucket: Optional[str] = None, limit: Optional[int] = None) -> ProbeResult:
    """Zero-shot segmentation mIoU of raw masked embeddings versus SIR-completed ones."""
    if model.sem_encoder is None or model.text_anchors is None:
        raise ConfigurationError("the probe needs a model with a semantic encoder and category anchors")
    if not config.dataset.labels:
        raise ConfigurationError("the probe needs a labeled dataset")
    bucket = bucket or config.eval.probe_bucket
    dataset = ImageDataset(config.dataset.spec("test", config.seed))
    L = model.text_anchors.shape[0]
    raw_cm = metrics.ConfusionMatrix(L)
    sir_cm = metrics.ConfusionMatrix(L) if model.sir is not None else None
    model.eval()
    n = len(dataset) if limit is None else min(limit, len(dataset))
    for i in range(n):
        sample = dataset[i]
        if sample.labels is None:
            raise ConfigurationError(f"test image {sample.name} has no label map")
        H, W = sample.size
        s = sample.with_mask(eval_mask(config, bucket, i, H, W))
        sem_map = model.semantic_map(s.masked_image[None], s.mask[None])
        raw = naive_upsample(sem_map, H, W)
        raw_cm.update(metrics.segment(raw, model.text_anchors)[0], sample.labels)
        if sir_cm is not None:
            done = sir_dense(sem_map, model.sir, H, W)
            sir_cm.update(metrics.segment(done, model.text_anchors)[0], sample.labels)
    return ProbeResult(raw_cm.miou(), None if sir_cm is None else sir_cm.miou(), n, bucket)


def probe_checkpoint(checkpoint, config: Optional[RunConfig] = None, bucket=None) -> ProbeResult:
    model, config, _ = _load(checkpoint, config)
    return probe(model, config, bucket)
