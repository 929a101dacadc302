"""Dense text-aligned embeddings and their continuous completion (SIR)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError
from .implicit import QueryBatch, build_query_batch, local_ensemble_query, make_coordinate_grid
from .sample import MaskedSample, stack_inputs


class MLP(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden: int = 256, depth: int = 4):
        super().__init__()
        layers = []
        last = in_dim
        for _ in range(depth):
            layers += [nn.Linear(last, hidden), nn.ReLU(inplace=True)]
            last = hidden
        layers.append(nn.Linear(last, out_dim))
        self.layers = nn.Sequential(*layers)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, x):
        shape = x.shape[:-1]
        return self.layers(x.reshape(-1, x.shape[-1])).view(*shape, self.out_dim)


@dataclass
class SemanticFeatureMap:
    features: torch.Tensor  # (B, c, h, w)
    mask: torch.Tensor  # (B, 1, h, w), fraction of missing pixels per cell
    downsample_factor: int

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def grid_size(self) -> tuple[int, int]:
        return tuple(self.features.shape[-2:])


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Area-average a binary mask to feature resolution."""
    squeeze = mask.dim() == 2
    if squeeze:
        mask = mask[None, None]
    elif mask.dim() == 3:
        mask = mask.unsqueeze(0)
    h, w = mask.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"mask {h}x{w} is not divisible by factor {factor}")
    pooled = F.avg_pool2d(mask.float(), factor) if factor > 1 else mask.float()
    return pooled[0, 0] if squeeze else pooled


class SurrogateSemanticEncoder(nn.Module):
    """Small strided CNN standing in for the CLIP image encoder.

    Two stride-2 stages give ``patch_factor=4``; a stack of 3x3 convolutions at
    feature resolution widens the receptive field so masked cells still see
    context, and a final 1x1 projection maps into the anchor space.
    """

    variant = "surrogate"

    def __init__(self, channels: int = 64, patch_factor: int = 4, width: int = 64, context_layers: int = 4):
        super().__init__()
        stages = int(round(math.log2(patch_factor)))
        if 2**stages != patch_factor:
            raise ConfigurationError(f"surrogate patch factor must be a power of two, got {patch_factor}")
        layers = [nn.Conv2d(3, width // 2, 3, 1, 1), nn.ReLU(inplace=True)]
        last = width // 2
        for _ in range(stages):
            layers += [nn.Conv2d(last, width, 4, 2, 1), nn.ReLU(inplace=True)]
            last = width
        for _ in range(context_layers):
            layers += [nn.Conv2d(last, width, 3, 1, 1), nn.ReLU(inplace=True)]
            last = width
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(last, channels, 1)
        self.out_channels = channels
        self.patch_factor = patch_factor
        self.frozen = False
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, image):
        return self.proj(self.body(image))

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        return self


_CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
_CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ClipSemanticEncoder(nn.Module):
    """Dense CLIP image embeddings via attention surgery.

    The last transformer block keeps only its value path: query and key
    projections are dropped, and the value embedding plus the final visual
    projection run per token as 1x1 convolutions that reuse the pretrained
    weights in place. The encoder is frozen and always in eval mode.
    """

    variant = "clip-adapter"

    def __init__(self, vision_model: nn.Module):
        super().__init__()
        # expects transformers.CLIPVisionModelWithProjection
        self.clip = vision_model
        cfg = vision_model.config
        self.patch_factor = cfg.patch_size
        self.out_channels = cfg.projection_dim
        self.register_buffer("mean", torch.tensor(_CLIP_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(_CLIP_STD).view(1, 3, 1, 1), persistent=False)
        for p in self.clip.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()

    @classmethod
    def from_pretrained(cls, path):
        if path is None or not Path(path).exists():
            raise ConfigurationError(f"clip-adapter needs pretrained CLIP weights; not found at {path!r}")
        from transformers import CLIPVisionModelWithProjection

        try:
            model = CLIPVisionModelWithProjection.from_pretrained(str(path), local_files_only=True)
        except Exception as exc:  # noqa: BLE001 - surface any loader failure as config error
            raise ConfigurationError(f"could not load CLIP weights from {path}: {exc}") from exc
        return cls(model)

    def train(self, mode: bool = True):
        return super().train(False)

    def unused_parameter_names(self) -> list[str]:
        last = len(self.clip.vision_model.encoder.layers) - 1
        prefix = f"clip.vision_model.encoder.layers.{last}."
        dropped = ("self_attn.q_proj", "self_attn.k_proj", "layer_norm2", "mlp")
        return [n for n, _ in self.named_parameters() if n.startswith(prefix) and n[len(prefix):].startswith(dropped)]

    @staticmethod
    def _conv1x1(x, linear: nn.Linear):
        bias = linear.bias
        return F.conv2d(x, linear.weight[:, :, None, None], bias)

    def forward(self, image):
        vm = self.clip.vision_model
        x = (image - self.mean) / self.std
        h, w = image.shape[-2] // self.patch_factor, image.shape[-1] // self.patch_factor
        tokens = vm.embeddings(x, interpolate_pos_encoding=True)
        tokens = vm.pre_layrnorm(tokens)
        layers = vm.encoder.layers
        for layer in layers[:-1]:
            out = layer(tokens, None)
            tokens = out[0] if isinstance(out, (tuple, list)) else out
        last = layers[-1]
        tokens = last.layer_norm1(tokens)[:, 1:]  # drop the class token
        grid = tokens.transpose(1, 2).reshape(tokens.shape[0], -1, h, w)
        grid = self._conv1x1(grid, last.self_attn.v_proj)
        grid = self._conv1x1(grid, last.self_attn.out_proj)
        grid = vm.post_layernorm(grid.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return self._conv1x1(grid, self.clip.visual_projection)


def build_semantic_encoder(variant: str, channels: int = 64, patch_factor: int = 4, clip_weights=None,
                           width: int = 64, context_layers: int = 4):
    if variant == "surrogate":
        return SurrogateSemanticEncoder(channels, patch_factor, width, context_layers)
    if variant == "clip-adapter":
        return ClipSemanticEncoder.from_pretrained(clip_weights)
    raise ConfigurationError(f"unknown semantic encoder variant {variant!r}")


def encode_semantic(sample, encoder: nn.Module, mask: Optional[torch.Tensor] = None) -> SemanticFeatureMap:
    """Encode masked images into a low-resolution embedding grid.

    ``sample`` is a :class:`MaskedSample`, a sequence of them, or a batched
    ``(B, 3, H, W)`` image tensor (already masked) paired with ``mask``.
    """
    if isinstance(sample, MaskedSample):
        image, mask = stack_inputs([sample])
    elif isinstance(sample, (list, tuple)):
        image, mask = stack_inputs(sample)
    else:
        image = sample
        if mask is None:
            mask = torch.zeros(image.shape[0], 1, *image.shape[-2:], dtype=image.dtype, device=image.device)
    pf = encoder.patch_factor
    H, W = image.shape[-2:]
    if H % pf or W % pf:
        raise ShapeError(f"image {H}x{W} is not divisible by the encoder patch factor {pf}")
    features = encoder(image)
    return SemanticFeatureMap(features, downsample_mask(mask, pf).to(features.dtype), pf)


class SIRDecoder(nn.Module):
    """``f_theta``: maps ``[z_q, M[q], offset]`` to a completed embedding.

    With ``residual`` the MLP predicts a correction added to ``z_q``; its last
    layer starts at zero, so an untrained decoder reproduces the naive upsample.
    """

    def __init__(self, channels: int, hidden: int = 256, depth: int = 4, residual: bool = True):
        super().__init__()
        self.channels = channels
        self.input_dim = channels + 1 + 2
        self.mlp = MLP(self.input_dim, channels, hidden, depth)
        self.residual = residual
        if residual:
            nn.init.zeros_(self.mlp.layers[-1].weight)
            nn.init.zeros_(self.mlp.layers[-1].bias)

    def assemble(self, feats, offsets):
        # feats carries the pooled mask as its last channel
        return torch.cat([feats, offsets], dim=-1)

    def forward(self, feats, offsets):
        out = self.mlp(self.assemble(feats, offsets))
        return out + feats[..., : self.channels] if self.residual else out


def sir_query(sem_map: SemanticFeatureMap, decoder, batch: QueryBatch) -> torch.Tensor:
    """Completed embeddings ``(B, N, c)`` at the batch's query points."""
    if tuple(batch.grid_size) != sem_map.grid_size:
        raise ShapeError(f"queries built on {batch.grid_size}, semantic map is {sem_map.grid_size}")
    field = torch.cat([sem_map.features, sem_map.mask], dim=1)
    return local_ensemble_query(field, batch, decoder)


def sir_dense(sem_map: SemanticFeatureMap, decoder, out_height: int, out_width: int) -> torch.Tensor:
    """SIR evaluated at every pixel center of an ``out_height x out_width`` grid: ``(B, c, H, W)``."""
    feats = sem_map.features
    grid = make_coordinate_grid(out_height, out_width, dtype=feats.dtype, device=feats.device)
    batch = build_query_batch(grid.flat().unsqueeze(0), sem_map.grid_size)
    out = sir_query(sem_map, decoder, batch)
    return out.transpose(1, 2).reshape(out.shape[0], -1, out_height, out_width)


def naive_upsample(sem_map: SemanticFeatureMap, out_height: int, out_width: int) -> torch.Tensor:
    """Bilinear resize of the raw (uncompleted) embeddings."""
    return F.interpolate(sem_map.features, size=(out_height, out_width), mode="bilinear", align_corners=False)


def random_text_anchors(num_labels: int, channels: int, seed: int = 0) -> torch.Tensor:
    """Fixed unit-norm category anchors for the surrogate encoder."""
    gen = torch.Generator().manual_seed(seed)
    anchors = torch.randn(num_labels, channels, generator=gen)
    return F.normalize(anchors, dim=-1)


def clip_text_anchors(path, label_names: Sequence[str], template: str = "a photo of a {}.") -> torch.Tensor:
    if path is None or not Path(path).exists():
        raise ConfigurationError(f"CLIP text encoder weights not found at {path!r}")
    from transformers import AutoTokenizer, CLIPTextModelWithProjection

    tokenizer = AutoTokenizer.from_pretrained(str(path), local_files_only=True)
    model = CLIPTextModelWithProjection.from_pretrained(str(path), local_files_only=True).eval()
    tokens = tokenizer([template.format(n) for n in label_names], padding=True, return_tensors="pt")
    with torch.no_grad():
        emb = model(**tokens).text_embeds
    return F.normalize(emb, dim=-1)
