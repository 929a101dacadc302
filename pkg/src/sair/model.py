"""Model assembly for SAIR and its ablations."""
from __future__ import annotations

import contextlib
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .appearance import AIRDecoder, air_query, build_appearance_encoder, encode_appearance
from .errors import InvalidArgumentError
from .implicit import build_query_batch, make_coordinate_grid
from .sample import MaskedSample, stack_inputs
from .semantic import SIRDecoder, build_semantic_encoder, encode_semantic, naive_upsample, sir_dense


@dataclass(frozen=True)
class AblationFlags:
    """Which branches the decoder sees.

    ``use_sir=False`` is NFS (raw masked embeddings, naively upsampled);
    ``use_appearance=False`` is OUS; ``use_semantic=False`` zeroes the
    semantic slice, giving the appearance-only baseline.
    """

    use_sir: bool = True
    use_appearance: bool = True
    use_semantic: bool = True
    encoder_variant: str = "table3"
    semantic_variant: str = "surrogate"

    def validate(self):
        if not (self.use_appearance or self.use_semantic):
            raise InvalidArgumentError("at least one of appearance or semantic features must be used")
        if self.encoder_variant not in ("table3", "edsr-style"):
            raise InvalidArgumentError(f"unknown encoder variant {self.encoder_variant!r}")
        if self.semantic_variant not in ("surrogate", "clip-adapter"):
            raise InvalidArgumentError(f"unknown semantic variant {self.semantic_variant!r}")
        return self

    @property
    def name(self) -> str:
        if not self.use_semantic:
            return "appearance-only"
        if not self.use_appearance:
            return "OUS"
        if not self.use_sir:
            return "NFS"
        return "SAIR"


@dataclass(frozen=True)
class ModelSpec:
    flags: AblationFlags = field(default_factory=AblationFlags)
    app_width: int = 64
    app_resblocks: int = 8
    sem_channels: int = 64
    sem_width: int = 64
    sem_context_layers: int = 4
    patch_factor: int = 4
    mlp_hidden: int = 256
    mlp_depth: int = 4
    clip_weights: Optional[str] = None
    freeze_semantic_encoder: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class Fields:
    """Per-image latent fields consumed by the color decoder."""

    app: Optional[torch.Tensor]  # (B, C, H, W)
    sem: Optional[torch.Tensor]  # (B, c, H, W), the semantic field on the pixel grid
    sem_map: Optional[object] = None  # SemanticFeatureMap
    size: tuple = ()


@contextlib.contextmanager
def _init_scope(seed: Optional[int], role: str):
    """Per-submodule init stream, so ablations share the initial weights of the parts they have in common."""
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed((seed ^ zlib.crc32(role.encode())) % 2**63)
        yield


class SAIRModel(nn.Module):
    def __init__(self, spec: ModelSpec, sem_encoder: Optional[nn.Module] = None, seed: Optional[int] = None):
        super().__init__()
        flags = spec.flags.validate()
        self.spec = spec
        self.flags = flags
        self.app_encoder = None
        if flags.use_appearance:
            with _init_scope(seed, "appearance"):
                self.app_encoder = build_appearance_encoder(flags.encoder_variant, spec.app_width, spec.app_resblocks)
        self.sem_encoder = None
        self.sir = None
        sem_channels = 0
        if flags.use_semantic:
            if sem_encoder is None:
                with _init_scope(seed, "semantic"):
                    sem_encoder = build_semantic_encoder(flags.semantic_variant, spec.sem_channels, spec.patch_factor,
                                                         spec.clip_weights, spec.sem_width, spec.sem_context_layers)
            self.sem_encoder = sem_encoder
            if spec.freeze_semantic_encoder and hasattr(sem_encoder, "freeze"):
                sem_encoder.freeze()
            sem_channels = sem_encoder.out_channels
            if flags.use_sir:
                with _init_scope(seed, "sir"):
                    self.sir = SIRDecoder(sem_channels, spec.mlp_hidden, spec.mlp_depth)
        elif flags.use_appearance:
            # zeroed semantic slice keeps the decoder input width of the full model
            sem_channels = spec.sem_channels
        app_channels = self.app_encoder.out_channels if self.app_encoder is not None else 0
        self.sem_channels = sem_channels
        with _init_scope(seed, "air"):
            self.air = AIRDecoder(app_channels, sem_channels, spec.mlp_hidden, spec.mlp_depth)
        self.text_anchors: Optional[torch.Tensor] = None

    def set_text_anchors(self, anchors: torch.Tensor):
        """Attach the ``(L, c)`` category anchors used by the segmentation probe."""
        anchors = F.normalize(anchors.detach().float(), dim=-1)
        if "text_anchors" in self._buffers:
            self._buffers["text_anchors"] = anchors
        else:
            del self.text_anchors
            self.register_buffer("text_anchors", anchors)
        return self

    # -- fields ---------------------------------------------------------------

    @property
    def min_divisor(self) -> int:
        d = self.app_encoder.min_divisor if self.app_encoder is not None else 1
        if self.sem_encoder is not None:
            p = self.sem_encoder.patch_factor
            d = math.lcm(d, p)
        return d

    def semantic_map(self, images, masks):
        if self.sem_encoder is None:
            return None
        if getattr(self.sem_encoder, "frozen", False):
            with torch.no_grad():
                return encode_semantic(images, self.sem_encoder, masks)
        return encode_semantic(images, self.sem_encoder, masks)

    def semantic_field(self, sem_map, height: int, width: int):
        """Semantic embeddings at every cell of a ``height x width`` grid."""
        if self.flags.use_sir:
            return sir_dense(sem_map, self.sir, height, width)
        return naive_upsample(sem_map, height, width)

    def fields(self, images: torch.Tensor, masks: torch.Tensor) -> Fields:
        """``images`` must already be masked (``I * (1 - M)``)."""
        H, W = images.shape[-2:]
        app = encode_appearance(images, self.app_encoder, masks) if self.app_encoder is not None else None
        sem_map = self.semantic_map(images, masks)
        if sem_map is not None:
            sem = self.semantic_field(sem_map, H, W)
        elif self.sem_channels:
            sem = images.new_zeros(images.shape[0], self.sem_channels, H, W)
        else:
            sem = None
        return Fields(app=app, sem=sem, sem_map=sem_map, size=(H, W))

    def query(self, fields: Fields, coords: torch.Tensor, chunk: Optional[int] = None) -> torch.Tensor:
        if chunk is None or coords.shape[-2] <= chunk:
            batch = build_query_batch(coords, fields.size)
            return air_query(fields.app, fields.sem, self.air, batch)
        outs = [self.query(fields, coords[..., i:i + chunk, :]) for i in range(0, coords.shape[-2], chunk)]
        return torch.cat(outs, dim=-2)

    def forward(self, images, masks, coords, return_fields: bool = False):
        f = self.fields(images, masks)
        rgb = self.query(f, coords)
        return (rgb, f) if return_fields else rgb

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_model(flags: AblationFlags = AblationFlags(), **spec_kwargs) -> SAIRModel:
    spec = spec_kwargs.pop("spec", None) or ModelSpec(flags=flags, **spec_kwargs)
    return SAIRModel(spec)


@torch.no_grad()
def reconstruct(sample, model: SAIRModel, out_height: Optional[int] = None, out_width: Optional[int] = None,
                composite: bool = False, chunk: int = 16384) -> torch.Tensor:
    """Predict every pixel of an ``out_height x out_width`` image.

    Returns ``(3, H', W')`` (or ``(B, 3, H', W')`` for a list of samples),
    clamped to ``[0, 1]``. With ``composite`` the known pixels of the input
    are pasted back over the prediction.
    """
    single = isinstance(sample, MaskedSample)
    samples = [sample] if single else list(sample)
    images, masks = stack_inputs(samples)
    H, W = images.shape[-2:]
    out_height = out_height or H
    out_width = out_width or W
    was_training = model.training
    model.eval()
    try:
        f = model.fields(images, masks)
        coords = make_coordinate_grid(out_height, out_width, dtype=images.dtype).flat().unsqueeze(0)
        coords = coords.expand(images.shape[0], -1, -1)
        rgb = model.query(f, coords, chunk=chunk)
    finally:
        model.train(was_training)
    out = rgb.transpose(1, 2).reshape(images.shape[0], 3, out_height, out_width).clamp(0, 1)
    if composite:
        known = images
        keep = 1.0 - masks
        if (out_height, out_width) != (H, W):
            known = F.interpolate(known, size=(out_height, out_width), mode="nearest")
            keep = F.interpolate(keep, size=(out_height, out_width), mode="nearest")
        out = keep * known + (1.0 - keep) * out
    return out[0] if single else out
