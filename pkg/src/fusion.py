"""Per-stage fusion of generic prior features into crack-specific features.

Three pieces:

  - ScalingModule: bilinear resize to the target stage's spatial size, then a
    pointwise convolution to its channel count.
  - IIM: produces two sigmoid attention masks from the channel-concatenated
    pair (scaled general, crack-specific).
  - IGAM: ``f_crack + mask_general * f_scaled + mask_crack * f_crack``.

IGAM also runs in ``concat`` mode (pointwise 2C -> C projection of the
concatenation) and ``none`` mode (identity on the crack features, no
parameters at all).
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ChannelMismatch, ConfigError

FUSION_MODES = ("igam", "concat", "none")
DEFAULT_GROUPS = 4


def resolve_groups(channels: int, groups: int = DEFAULT_GROUPS) -> int:
    """Group count for GroupNorm over ``channels``; falls back to 1."""
    return groups if groups > 0 and channels % groups == 0 else 1


class Resize(nn.Module):
    """Bilinear resize (half-pixel centers); identity when sizes already match."""

    def forward(self, x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        if tuple(x.shape[-2:]) == tuple(size):
            return x
        return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class GatedSum(nn.Module):
    """Residual plus two gated terms."""

    def forward(self, f_crack, f_scaled, mask_general, mask_crack) -> torch.Tensor:
        return f_crack + mask_general * f_scaled + mask_crack * f_crack


class ScalingModule(nn.Module):
    def __init__(self, source_channels: int, target_channels: int):
        super().__init__()
        self.source_channels = source_channels
        self.target_channels = target_channels
        self.resize = Resize()
        self.proj = nn.Conv2d(source_channels, target_channels, kernel_size=1)

    @property
    def pointwise_kernel(self) -> torch.Tensor:
        return self.proj.weight

    @property
    def bias(self) -> torch.Tensor:
        return self.proj.bias

    def forward(self, f_general: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
        if f_general.shape[1] != self.source_channels:
            raise ChannelMismatch(
                f"scaler expects {self.source_channels} channels, got {f_general.shape[1]}"
            )
        return self.proj(self.resize(f_general, target_hw))


def scale_general(
    s: ScalingModule, f_general: torch.Tensor, target_hw: tuple[int, int]
) -> torch.Tensor:
    return s(f_general, target_hw)


class IIM(nn.Module):
    """Information interaction module: (B, 2C, H, W) -> two (B, C, H, W) masks."""

    def __init__(self, channels: int, groups: int = DEFAULT_GROUPS):
        super().__init__()
        self.channels = channels
        self.groups = resolve_groups(channels, groups)
        self.reduce = nn.Sequential(
            nn.Conv2d(2 * channels, channels, kernel_size=1),
            nn.GroupNorm(self.groups, channels),
            nn.ReLU(),
        )
        self.branch_general = self._branch()
        self.branch_crack = self._branch()

    def _branch(self) -> nn.Sequential:
        return nn.Sequential(
            nn.Conv2d(self.channels, self.channels, kernel_size=1),
            nn.GroupNorm(self.groups, self.channels),
            nn.Sigmoid(),
        )

    def forward(self, concat_features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        got = concat_features.shape[1]
        if got % 2 or got != 2 * self.channels:
            raise ChannelMismatch(f"IIM expects {2 * self.channels} channels, got {got}")
        shared = self.reduce(concat_features)
        return self.branch_general(shared), self.branch_crack(shared)


def iim_forward(m: IIM, concat_features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return m(concat_features)


@dataclass
class FusionParts:
    """Intermediate tensors of one IGAM forward pass."""

    f_scaled: torch.Tensor
    mask_general: torch.Tensor
    mask_crack: torch.Tensor


class IGAM(nn.Module):
    def __init__(
        self,
        source_channels: int,
        target_channels: int,
        mode: str = "igam",
        groups: int = DEFAULT_GROUPS,
    ):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got '{mode}'")
        self.mode = mode
        self.target_channels = target_channels
        if mode == "none":
            return
        self.scaler = ScalingModule(source_channels, target_channels)
        if mode == "igam":
            self.iim = IIM(target_channels, groups)
            self.combine = GatedSum()
        else:
            self.project = nn.Conv2d(2 * target_channels, target_channels, kernel_size=1)

    def parts(self, f_general: torch.Tensor, f_crack: torch.Tensor) -> FusionParts:
        """Scaled general features and both attention masks (igam mode only)."""
        if self.mode != "igam":
            raise ConfigError(f"attention masks only exist in igam mode, not '{self.mode}'")
        f_scaled = self.scaler(f_general, f_crack.shape[-2:])
        mask_general, mask_crack = self.iim(torch.cat([f_scaled, f_crack], dim=1))
        return FusionParts(f_scaled, mask_general, mask_crack)

    def forward(self, f_general: torch.Tensor | None, f_crack: torch.Tensor) -> torch.Tensor:
        if self.mode == "none":
            return f_crack
        if f_crack.shape[1] != self.target_channels:
            raise ChannelMismatch(
                f"fusion expects {self.target_channels} crack channels, got {f_crack.shape[1]}"
            )
        if self.mode == "concat":
            f_scaled = self.scaler(f_general, f_crack.shape[-2:])
            return self.project(torch.cat([f_scaled, f_crack], dim=1))
        p = self.parts(f_general, f_crack)
        return self.combine(f_crack, p.f_scaled, p.mask_general, p.mask_crack)


def igam_fuse(g: IGAM, f_general: torch.Tensor | None, f_crack: torch.Tensor) -> torch.Tensor:
    return g(f_general, f_crack)
