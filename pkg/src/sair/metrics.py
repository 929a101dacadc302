"""Image quality metrics and the semantic segmentation probe."""
from __future__ import annotations

import logging
import math
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, ShapeError
from .sample import IGNORE_LABEL

log = logging.getLogger(__name__)

PSNR_CEILING = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(pred, gt):
    pred = torch.as_tensor(pred).double()
    gt = torch.as_tensor(gt).double()
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape")
    return pred, gt


def psnr(pred, gt, ceiling: float = PSNR_CEILING, mask: Optional[torch.Tensor] = None) -> float:
    """PSNR in dB for images in ``[0, 1]``, capped at ``ceiling``.

    With ``mask`` (broadcastable to the images) only pixels where it is
    nonzero contribute.
    """
    pred, gt = _pair(pred, gt)
    err = (pred - gt) ** 2
    if mask is not None:
        m = torch.as_tensor(mask).double().expand_as(err)
        if m.sum() == 0:
            return float("nan")
        mse = float((err * m).sum() / m.sum())
    else:
        mse = float(err.mean())
    if mse == 0:
        return float(ceiling)
    return float(min(ceiling, 10.0 * math.log10(1.0 / mse)))


def l1(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float((pred - gt).abs().mean())


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(pred, gt, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), per channel then averaged.

    Accepts ``(C, H, W)``, ``(B, C, H, W)`` or ``(H, W)`` tensors; statistics
    use the window's valid region only.
    """
    pred, gt = _pair(pred, gt)
    if pred.dim() == 2:
        pred, gt = pred[None, None], gt[None, None]
    elif pred.dim() == 3:
        pred, gt = pred[None], gt[None]
    B, C, H, W = pred.shape
    win = min(SSIM_WINDOW, H, W)
    if win % 2 == 0:
        win -= 1
    kernel = _gaussian_window(win, SSIM_SIGMA)[None, None].expand(C, 1, win, win).contiguous()

    def filt(x):
        return F.conv2d(x, kernel, groups=C)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = filt(pred), filt(gt)
    sxx = filt(pred * pred) - mu_x ** 2
    syy = filt(gt * gt) - mu_y ** 2
    sxy = filt(pred * gt) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


# -- LPIPS -----------------------------------------------------------------

LpipsBackend = Callable[[torch.Tensor, torch.Tensor], float]


def load_lpips_backend(name: str) -> Optional[LpipsBackend]:
    """The pretrained LPIPS network named ``lpips-alex`` / ``lpips-vgg``, or None.

    Returns None when the package or its pretrained weights are unavailable;
    no stand-in network is ever substituted.
    """
    if name in (None, "none"):
        return None
    net = {"lpips-alex": "alex", "lpips-vgg": "vgg"}.get(name)
    if net is None:
        raise InvalidArgumentError(f"unknown LPIPS backend {name!r}")
    try:
        import lpips as _lpips

        model = _lpips.LPIPS(net=net, verbose=False).eval()
    except Exception as exc:  # noqa: BLE001 - any failure means the backend is absent
        log.warning("LPIPS backend %s unavailable: %s", name, exc)
        return None

    @torch.no_grad()
    def backend(pred, gt):
        p = torch.as_tensor(pred).float()
        g = torch.as_tensor(gt).float()
        if p.dim() == 3:
            p, g = p[None], g[None]
        return float(model(p * 2 - 1, g * 2 - 1).mean())

    return backend


def lpips(pred, gt, backend: Optional[LpipsBackend]) -> Optional[float]:
    """Perceptual distance, or None when no backend is available."""
    _pair(pred, gt)
    if backend is None:
        return None
    return max(0.0, float(backend(pred, gt)))


# -- segmentation probe ----------------------------------------------------


def segment(sem_field: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax of cosine similarity against ``(L, c)`` anchors.

    ``sem_field`` is ``(c, H, W)`` or ``(B, c, H, W)``; ties go to the lowest
    label id.
    """
    squeeze = sem_field.dim() == 3
    if squeeze:
        sem_field = sem_field[None]
    if sem_field.shape[1] != anchors.shape[1]:
        raise ShapeError(f"semantic field has {sem_field.shape[1]} channels, anchors have {anchors.shape[1]}")
    feats = F.normalize(sem_field.double(), dim=1)
    anchors = F.normalize(anchors.double(), dim=1)
    scores = torch.einsum("bchw,lc->blhw", feats, anchors)
    labels = scores.argmax(dim=1)
    return labels[0] if squeeze else labels


class ConfusionMatrix:
    def __init__(self, num_labels: int, ignore_label: int = IGNORE_LABEL):
        self.num_labels = num_labels
        self.ignore_label = ignore_label
        self.matrix = np.zeros((num_labels, num_labels), dtype=np.int64)

    def update(self, pred, gt):
        pred = np.asarray(pred, dtype=np.int64).ravel()
        gt = np.asarray(gt, dtype=np.int64).ravel()
        if pred.shape != gt.shape:
            raise ShapeError("prediction and ground-truth label maps differ in shape")
        keep = gt != self.ignore_label
        pred, gt = pred[keep], gt[keep]
        L = self.num_labels
        if gt.size and (gt.min() < 0 or gt.max() >= L):
            raise InvalidArgumentError(f"ground-truth labels outside [0, {L})")
        if pred.size and (pred.min() < 0 or pred.max() >= L):
            raise InvalidArgumentError(f"predicted labels outside [0, {L})")
        self.matrix += np.bincount(gt * L + pred, minlength=L * L).reshape(L, L)
        return self

    def miou(self) -> float:
        inter = np.diag(self.matrix).astype(np.float64)
        gt_count = self.matrix.sum(axis=1)
        union = gt_count + self.matrix.sum(axis=0) - inter
        present = gt_count > 0
        if not present.any():
            return float("nan")
        return float(np.mean(inter[present] / union[present]))


def miou(pred, gt, num_labels: int, ignore_label: int = IGNORE_LABEL) -> float:
    """Mean IoU over the categories present in ``gt``."""
    return ConfusionMatrix(num_labels, ignore_label).update(pred, gt).miou()
