"""Encoder-decoder crack segmentation network with per-stage prior fusion.

``UNet`` is the plain five-stage baseline. ``FlexiCrackNet`` adds a frozen
generic extractor and one IGAM per encoder stage; the fused stage output
feeds both the next encoder stage and the matching skip connection. Stage 5
fused features are the decoder input; stages 1-4 are skips.
"""

from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .extractor import (
    DEFAULT_STAGE_CHANNELS,
    SIZE_DIVISOR,
    ExtractorBackend,
    check_resolution,
    extract,
    resolve_backend,
)
from .fusion import DEFAULT_GROUPS, FUSION_MODES, IGAM, Resize, resolve_groups
from .seeding import init_module_, make_generator


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 64
    fusion_mode: str = "igam"
    groups: int = DEFAULT_GROUPS
    backend: str = "stub:0"
    stub_channels: tuple[int, ...] = DEFAULT_STAGE_CHANNELS
    input_divisibility: int = SIZE_DIVISOR
    extractor: dict = field(default_factory=dict)  # header of the backend actually used

    @property
    def encoder_channels(self) -> tuple[int, ...]:
        b = self.base_channels
        return (b, 2 * b, 4 * b, 8 * b, 16 * b)

    def validate(self) -> "ModelConfig":
        if not isinstance(self.base_channels, int) or self.base_channels < 1:
            raise ConfigError(f"base_channels must be a positive integer, got {self.base_channels}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got '{self.fusion_mode}'")
        if self.input_divisibility != SIZE_DIVISOR:
            raise ConfigError(f"input_divisibility is fixed at {SIZE_DIVISOR}")
        if len(self.stub_channels) != 5:
            raise ConfigError(f"stub_channels needs 5 entries, got {list(self.stub_channels)}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stub_channels"] = list(self.stub_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "stub_channels" in d:
            d["stub_channels"] = tuple(d["stub_channels"])
        return cls(**d)


@dataclass
class SegmentationOutput:
    logits: torch.Tensor
    probabilities: torch.Tensor


class ConvBlock(nn.Sequential):
    """Two (3x3 conv, group norm, ReLU) layers. Valid for any batch size, 1x1 maps included."""

    def __init__(self, in_channels: int, out_channels: int, groups: int = DEFAULT_GROUPS):
        g = resolve_groups(out_channels, groups)
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.GroupNorm(g, out_channels),
            nn.ReLU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.GroupNorm(g, out_channels),
            nn.ReLU(),
        )


class DecoderStage(nn.Module):
    """Bilinear x2 upsampling, concat with the skip, then a ConvBlock."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, groups: int = DEFAULT_GROUPS):
        super().__init__()
        self.up = Resize()
        self.block = ConvBlock(in_channels + skip_channels, out_channels, groups)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.up(x, skip.shape[-2:])
        return self.block(torch.cat([x, skip], dim=1))


class UNet(nn.Module):
    def __init__(self, base_channels: int = 64, groups: int = DEFAULT_GROUPS):
        super().__init__()
        b = base_channels
        widths = (b, 2 * b, 4 * b, 8 * b, 16 * b)
        self.encoder_channels = widths
        self.encoder = nn.ModuleList(
            ConvBlock(c_in, c_out, groups) for c_in, c_out in zip((3,) + widths[:-1], widths)
        )
        self.pool = nn.MaxPool2d(2)
        self.decoder = nn.ModuleList(
            DecoderStage(widths[i + 1], widths[i], widths[i], groups) for i in reversed(range(4))
        )
        self.head = nn.Conv2d(widths[0], 1, kernel_size=1)
        self.activation = nn.Sigmoid()

    def fuse(self, stage: int, features: torch.Tensor, pyramid) -> torch.Tensor:
        return features

    def prior_features(self, images: torch.Tensor):
        return None

    def forward(self, images: torch.Tensor) -> SegmentationOutput:
        check_resolution(images)
        pyramid = self.prior_features(images)
        skips = []
        x = images
        for i, block in enumerate(self.encoder):
            if i:
                x = self.pool(x)
            x = self.fuse(i, block(x), pyramid)
            skips.append(x)

        x = skips.pop()
        for stage in self.decoder:
            x = stage(x, skips.pop())
        logits = self.head(x)
        return SegmentationOutput(logits=logits, probabilities=self.activation(logits))


class FlexiCrackNet(UNet):
    def __init__(self, cfg: ModelConfig, extractor: ExtractorBackend):
        super().__init__(cfg.base_channels, cfg.groups)
        self.cfg = cfg
        self.fusion_mode = cfg.fusion_mode
        self.extractor = extractor
        self.fusion = nn.ModuleList(
            IGAM(src, tgt, cfg.fusion_mode, cfg.groups)
            for src, tgt in zip(extractor.stage_channels, self.encoder_channels)
        )

    def prior_features(self, images: torch.Tensor):
        if self.fusion_mode == "none":
            return None
        return extract(self.extractor, images)

    def fuse(self, stage: int, features: torch.Tensor, pyramid) -> torch.Tensor:
        return self.fusion[stage](pyramid[stage] if pyramid is not None else None, features)


def build_model(
    cfg: ModelConfig, seed: int = 0, extractor: ExtractorBackend | None = None
) -> FlexiCrackNet:
    """Build and seed-initialize a model.

    The extractor comes from ``cfg.backend`` unless one is passed in; its
    header is echoed into the returned model's config.
    """
    cfg.validate()
    if extractor is None:
        extractor = resolve_backend(cfg.backend, stage_channels=cfg.stub_channels)
    if len(extractor.stage_channels) != 5:
        raise ConfigError(f"extractor must have 5 stages, has {len(extractor.stage_channels)}")

    cfg = replace(cfg, extractor=extractor.metadata())
    model = FlexiCrackNet(cfg, extractor)
    gen = make_generator(seed)
    init_module_(model.encoder, gen)
    init_module_(model.fusion, gen)
    init_module_(model.decoder, gen)
    init_module_(model.head, gen)
    return model


def trainable_parameters(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    """Named parameters that training may update; the extractor never is."""
    return [
        (name, p)
        for name, p in model.named_parameters()
        if not name.startswith("extractor.") and p.requires_grad
    ]


def pad_to_multiple(images: torch.Tensor, multiple: int = SIZE_DIVISOR) -> tuple[torch.Tensor, tuple[int, int]]:
    """Zero-pad right/bottom to the next multiple; returns the native (H, W)."""
    h, w = images.shape[-2:]
    pad_h, pad_w = (-h) % multiple, (-w) % multiple
    if pad_h or pad_w:
        images = F.pad(images, (0, pad_w, 0, pad_h))
    return images, (h, w)


@torch.no_grad()
def predict_probabilities(model: nn.Module, images: torch.Tensor, pad: bool = False) -> torch.Tensor:
    """Eval-mode probabilities (B, 1, H, W); ``pad`` enables pad-and-crop."""
    model.eval()
    if pad:
        padded, (h, w) = pad_to_multiple(images)
        return model(padded).probabilities[..., :h, :w]
    return model(images).probabilities


def predict_mask(
    model: nn.Module, images: torch.Tensor, threshold: float = 0.5, pad: bool = False
) -> torch.Tensor:
    """Binary uint8 mask: 1 where probability >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return binarize(predict_probabilities(model, images, pad=pad), threshold)


def binarize(probabilities: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (probabilities >= threshold).to(torch.uint8)
