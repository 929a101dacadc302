from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import torch

from .errors import InvalidArgumentError, ShapeError

IGNORE_LABEL = 255


@dataclass
class MaskedSample:
    """An image with its missing-region mask.

    ``image`` is ``(3, H, W)`` in ``[0, 1]``; ``mask`` is ``(1, H, W)`` with
    1 marking missing pixels. ``labels`` is an ``(H, W)`` integer map using
    :data:`IGNORE_LABEL` for unlabeled pixels.
    """

    image: torch.Tensor
    mask: Optional[torch.Tensor] = None
    ground_truth: Optional[torch.Tensor] = None
    labels: Optional[torch.Tensor] = None
    name: str = ""

    def __post_init__(self):
        if self.image.dim() != 3 or self.image.shape[0] != 3:
            raise ShapeError(f"image must be (3, H, W), got {tuple(self.image.shape)}")
        if not torch.isfinite(self.image).all():
            raise InvalidArgumentError("image contains non-finite values")
        size = tuple(self.image.shape[-2:])
        if self.mask is not None:
            if self.mask.dim() == 2:
                self.mask = self.mask.unsqueeze(0)
            if tuple(self.mask.shape) != (1, *size):
                raise ShapeError(f"mask shape {tuple(self.mask.shape)} does not match image {size}")
            if not ((self.mask == 0) | (self.mask == 1)).all():
                raise InvalidArgumentError("mask values must be 0 or 1")
            self.mask = self.mask.to(self.image.dtype)
        if self.ground_truth is not None and tuple(self.ground_truth.shape) != tuple(self.image.shape):
            raise ShapeError("ground truth must match the image shape")
        if self.labels is not None and tuple(self.labels.shape) != size:
            raise ShapeError(f"label map shape {tuple(self.labels.shape)} does not match image {size}")

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.image.shape[-2:])

    @property
    def mask_or_zeros(self) -> torch.Tensor:
        if self.mask is None:
            return torch.zeros(1, *self.size, dtype=self.image.dtype)
        return self.mask

    @property
    def masked_image(self) -> torch.Tensor:
        return self.image * (1.0 - self.mask_or_zeros)

    @property
    def target(self) -> torch.Tensor:
        return self.image if self.ground_truth is None else self.ground_truth

    def with_mask(self, mask: torch.Tensor) -> "MaskedSample":
        return replace(self, mask=torch.as_tensor(mask, dtype=self.image.dtype))


def stack_inputs(samples) -> tuple[torch.Tensor, torch.Tensor]:
    """Masked images ``(B, 3, H, W)`` and masks ``(B, 1, H, W)``."""
    images = torch.stack([s.masked_image for s in samples])
    masks = torch.stack([s.mask_or_zeros for s in samples])
    return images, masks
