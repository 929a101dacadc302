"""Full-resolution appearance features and the color decoder (AIR)."""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn

from .errors import ShapeError
from .implicit import QueryBatch, local_ensemble_query
from .sample import MaskedSample, stack_inputs
from .semantic import MLP


def init_relu_convs(module: nn.Module, residual_scale: float = 0.1):
    """He-normal init for every conv; the second conv of each residual body is scaled down.

    PyTorch's default init shrinks activations through a deep ReLU stack
    until the decoder sees near-constant features.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, (ResBlock, _EDSRBlock)):
            last = [c for c in m.body if isinstance(c, nn.Conv2d)][-1]
            with torch.no_grad():
                last.weight.mul_(residual_scale)


def center_rgb(x: torch.Tensor) -> torch.Tensor:
    """Map known RGB from [0, 1] to [-1, 1]; missing pixels (zeroed, mask channel 1) stay at 0."""
    rgb, mask = x[:, :3], x[:, 3:4]
    return torch.cat([(2 * rgb - (1 - mask)), x[:, 3:]], dim=1)


class ResBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size, 1, pad),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size, 1, pad),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return x + self.body(x)


class AppearanceEncoder(nn.Module):
    """Encoder-decoder CNN producing ``(B, 64, H, W)`` features from RGB+mask.

    The two upsampling stages are transposed convolutions with the same
    ``(4, 2, 1)`` geometry as the downsampling ones. ``width`` sets the first
    stage's channel count (64 in the reference layout); deeper stages double
    it twice, and the output always returns to ``width`` channels.
    """

    def __init__(self, width: int = 64, n_resblocks: int = 8, in_channels: int = 4):
        super().__init__()
        w1, w2, w4 = width, width * 2, width * 4
        self.head = nn.Sequential(nn.Conv2d(in_channels, w1, 7, 1, 3), nn.ReLU(inplace=True))
        self.down1 = nn.Sequential(nn.Conv2d(w1, w2, 4, 2, 1), nn.ReLU(inplace=True))
        self.down2 = nn.Sequential(nn.Conv2d(w2, w4, 4, 2, 1), nn.ReLU(inplace=True))
        self.res = nn.Sequential(*[ResBlock(w4) for _ in range(n_resblocks)])
        self.up1 = nn.Sequential(nn.ConvTranspose2d(w4, w2, 4, 2, 1), nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(nn.ConvTranspose2d(w2, w1, 4, 2, 1), nn.ReLU(inplace=True))
        self.out_channels = w1
        self.min_divisor = 4
        init_relu_convs(self)

    def stages(self):
        return [("head", self.head), ("down1", self.down1), ("down2", self.down2),
                *[(f"res{i}", blk) for i, blk in enumerate(self.res)],
                ("up1", self.up1), ("up2", self.up2)]

    def forward(self, x, record: Optional[list] = None):
        x = center_rgb(x)
        for name, stage in self.stages():
            x = stage(x)
            if record is not None:
                record.append((name, tuple(x.shape)))
        return x


class EDSRStyleEncoder(nn.Module):
    """Residual super-resolution-style encoder (no resampling), same output shape."""

    def __init__(self, width: int = 64, n_resblocks: int = 16, in_channels: int = 4):
        super().__init__()
        self.head = nn.Conv2d(in_channels, width, 3, 1, 1)
        blocks = []
        for _ in range(n_resblocks):
            blocks.append(_EDSRBlock(width))
        blocks.append(nn.Conv2d(width, width, 3, 1, 1))
        self.body = nn.Sequential(*blocks)
        self.out_channels = width
        self.min_divisor = 1
        init_relu_convs(self)

    def forward(self, x):
        x = self.head(center_rgb(x))
        return x + self.body(x)


class _EDSRBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(width, width, 3, 1, 1), nn.ReLU(inplace=True),
                                  nn.Conv2d(width, width, 3, 1, 1))

    def forward(self, x):
        return x + self.body(x)


def build_appearance_encoder(variant: str = "table3", width: int = 64, n_resblocks: int = 8):
    if variant == "table3":
        return AppearanceEncoder(width, n_resblocks)
    if variant == "edsr-style":
        return EDSRStyleEncoder(width, n_resblocks)
    raise ValueError(f"unknown appearance encoder variant {variant!r}")


def encode_appearance(sample, encoder: nn.Module, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``Z^app = AppEncoder(I * (1 - M), M)`` as ``(B, C, H, W)``."""
    if isinstance(sample, MaskedSample):
        image, mask = stack_inputs([sample])
    elif isinstance(sample, (list, tuple)):
        image, mask = stack_inputs(sample)
    else:
        image = sample
        if mask is None:
            mask = torch.zeros(image.shape[0], 1, *image.shape[-2:], dtype=image.dtype, device=image.device)
    H, W = image.shape[-2:]
    d = getattr(encoder, "min_divisor", 1)
    if H % d or W % d:
        raise ShapeError(f"image {H}x{W} is not divisible by {d}")
    return encoder(torch.cat([image, mask], dim=1))


class AIRDecoder(nn.Module):
    """``f_beta``: ``[z_app, z_sem, offset] -> RGB``.

    Either slice may be absent (``app_channels=0`` for the semantic-only
    ablation).
    """

    def __init__(self, app_channels: int, sem_channels: int, hidden: int = 256, depth: int = 4, out_dim: int = 3):
        super().__init__()
        self.app_channels = app_channels
        self.sem_channels = sem_channels
        self.input_dim = app_channels + sem_channels + 2
        self.mlp = MLP(self.input_dim, out_dim, hidden, depth)

    def forward(self, feats, offsets):
        return self.mlp(torch.cat([feats, offsets], dim=-1))


def air_query(app_map: Optional[torch.Tensor], sem_field: Optional[torch.Tensor], decoder: AIRDecoder,
              batch: QueryBatch) -> torch.Tensor:
    """RGB ``(B, N, 3)`` at the query points.

    ``sem_field`` is the semantic field sampled at the appearance grid's cell
    centers, ``(B, c, H, W)``, so ``SIR(I, q)`` is a lookup per neighbor.
    """
    parts = []
    if app_map is not None:
        parts.append(app_map)
    if sem_field is not None:
        parts.append(sem_field)
    if not parts:
        raise ShapeError("air_query needs appearance or semantic features")
    sizes = {tuple(p.shape[-2:]) for p in parts}
    if len(sizes) != 1:
        raise ShapeError(f"appearance and semantic grids disagree: {sorted(sizes)}")
    field = parts[0] if len(parts) == 1 else torch.cat(parts, dim=1)
    if field.shape[1] + 2 != decoder.input_dim:
        raise ShapeError(f"decoder expects {decoder.input_dim - 2} feature channels, got {field.shape[1]}")
    return local_ensemble_query(field, batch, decoder)
