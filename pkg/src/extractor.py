"""Frozen five-stage generic feature extractor with pluggable backends.

Two ways to get a backend:

  - ``make_stub_backend(seed)``: small seeded convolutional pyramid, used in
    CI and whenever no pretrained weights are around.
  - ``load_pretrained_backend(path)``: weights in the container format (see
    ``src/container.py``) with a stage-metadata header. Converting official
    releases into this format is a manual, offline step.

Backend specs on the command line: ``stub:<seed>`` or
``pretrained:<path-or-url>``. URLs are downloaded once into a cache directory.
"""

import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import urlparse

import httpx
import numpy as np
import torch
from PIL import Image
from torch import nn

from .container import read_container, tensor_digest, write_container
from .errors import BackendUnavailable, BadResolution, ChannelMismatch, ConfigError, CorruptWeights
from .seeding import init_module_, make_generator

NUM_STAGES = 5
DEFAULT_STAGE_CHANNELS = (32, 64, 128, 256, 320)
STUB_STRIDES = (1, 2, 4, 8, 16)
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)
SIZE_DIVISOR = 16
DEFAULT_CACHE_DIR = Path(os.environ.get("FLEXICRACK_CACHE", Path.home() / ".cache" / "flexicrack"))


# --- Data types -------------------------------------------------------------


@dataclass
class FeaturePyramid:
    """Five feature maps (B, C_i, H / s_i, W / s_i), shallow to deep."""

    stages: list[torch.Tensor]
    stage_channels: tuple[int, ...]
    stage_strides: tuple[int, ...]

    def __post_init__(self):
        if len(self.stages) != NUM_STAGES:
            raise ValueError(f"pyramid needs {NUM_STAGES} stages, got {len(self.stages)}")
        for i, (stage, channels) in enumerate(zip(self.stages, self.stage_channels)):
            if stage.shape[1] != channels:
                raise ChannelMismatch(
                    f"stage {i + 1} has {stage.shape[1]} channels, declared {channels}"
                )

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.stages[index]


def _validate_geometry(stage_channels, stage_strides) -> tuple[tuple[int, ...], tuple[int, ...]]:
    channels = tuple(int(c) for c in stage_channels)
    strides = tuple(int(s) for s in stage_strides)
    if len(channels) != NUM_STAGES or len(strides) != NUM_STAGES:
        raise ConfigError(
            f"extractor needs {NUM_STAGES} stages, got channels={list(channels)} "
            f"strides={list(strides)}"
        )
    if any(c <= 0 for c in channels):
        raise ConfigError(f"stage channels must be positive, got {list(channels)}")
    previous = 1
    for s in strides:
        if s < previous or s % previous:
            raise ConfigError(
                f"stage strides must be nondecreasing integer multiples, got {list(strides)}"
            )
        previous = s
    if SIZE_DIVISOR % strides[-1]:
        raise ConfigError(f"deepest stride {strides[-1]} must divide {SIZE_DIVISOR}")
    return channels, strides


class ExtractorBackend(nn.Module):
    """Frozen convolutional pyramid.

    Stage i: 2D average pooling by stride_i / stride_{i-1} (skipped when 1),
    then 3x3 convolution and ReLU. Inputs in [0, 1] are normalized with the
    backend's own mean/std. Parameters never require gradients and the module
    stays in eval mode whatever ``train()`` is asked.
    """

    def __init__(
        self,
        name: str,
        stage_channels=DEFAULT_STAGE_CHANNELS,
        stage_strides=STUB_STRIDES,
        mean=DEFAULT_MEAN,
        std=DEFAULT_STD,
    ):
        super().__init__()
        self.name = name
        self.stage_channels, self.stage_strides = _validate_geometry(stage_channels, stage_strides)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

        stages = []
        in_channels, previous = 3, 1
        for channels, stride in zip(self.stage_channels, self.stage_strides):
            factor = stride // previous
            layers: list[nn.Module] = [nn.AvgPool2d(factor)] if factor > 1 else []
            layers += [nn.Conv2d(in_channels, channels, 3, padding=1), nn.ReLU()]
            stages.append(nn.Sequential(*layers))
            in_channels, previous = channels, stride
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)
        self.train(False)

    @property
    def frozen(self) -> bool:
        return True

    def train(self, mode: bool = True) -> "ExtractorBackend":
        return super().train(False)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        x = (images - self.mean) / self.std
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return FeaturePyramid(outputs, self.stage_channels, self.stage_strides)

    def metadata(self) -> dict:
        return {
            "kind": "extractor",
            "name": self.name,
            "stage_channels": list(self.stage_channels),
            "stage_strides": list(self.stage_strides),
            "mean": self.mean.flatten().tolist(),
            "std": self.std.flatten().tolist(),
        }

    def digest(self) -> str:
        return tensor_digest(self.named_parameters())


# --- Operations -------------------------------------------------------------


def check_resolution(images: torch.Tensor) -> None:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected images of shape (B, 3, H, W), got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % SIZE_DIVISOR or w % SIZE_DIVISOR:
        raise BadResolution(f"input {h}x{w} is not divisible by {SIZE_DIVISOR}")


def extract(backend: ExtractorBackend, images: torch.Tensor) -> FeaturePyramid:
    """Run the frozen backend on (B, 3, H, W) images with H, W divisible by 16."""
    check_resolution(images)
    with torch.no_grad():
        return backend(images)


def make_stub_backend(seed: int = 0, stage_channels=DEFAULT_STAGE_CHANNELS) -> ExtractorBackend:
    backend = ExtractorBackend(f"stub:{seed}", stage_channels, STUB_STRIDES)
    init_module_(backend, make_generator(seed))
    # biases get small seeded values, not zeros
    gen = make_generator(seed, 1)
    with torch.no_grad():
        for stage in backend.stages:
            stage[-2].bias.uniform_(-0.1, 0.1, generator=gen)
    return backend


def save_backend(backend: ExtractorBackend, path: str | Path) -> Path:
    tensors = {name: p for name, p in backend.named_parameters()}
    return write_container(path, tensors, backend.metadata())


def load_pretrained_backend(weights_path: str | Path) -> ExtractorBackend:
    """Load a backend whose architecture is described by the file header.

    Raises:
        BackendUnavailable: If the file does not exist.
        CorruptWeights: If the header is not a five-stage extractor or the
            tensor table does not match the declared architecture.
        VersionMismatch: If the container version is unsupported.
    """
    path = Path(weights_path)
    if not path.is_file():
        raise BackendUnavailable(f"extractor weights not found: {path}")
    tensors, meta = read_container(path)

    if meta.get("kind") != "extractor":
        raise CorruptWeights(f"{path}: header kind is {meta.get('kind')!r}, expected 'extractor'")
    try:
        backend = ExtractorBackend(
            name=meta.get("name", path.stem),
            stage_channels=meta["stage_channels"],
            stage_strides=meta["stage_strides"],
            mean=meta.get("mean", DEFAULT_MEAN),
            std=meta.get("std", DEFAULT_STD),
        )
    except (KeyError, ConfigError) as exc:
        raise CorruptWeights(f"{path}: bad stage header ({exc})") from exc

    expected = dict(backend.named_parameters())
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CorruptWeights(f"{path}: tensor table mismatch (missing={missing}, extra={extra})")
    with torch.no_grad():
        for name, param in expected.items():
            if tuple(tensors[name].shape) != tuple(param.shape):
                raise CorruptWeights(
                    f"{path}: tensor {name} has shape {tuple(tensors[name].shape)}, "
                    f"header implies {tuple(param.shape)}"
                )
            param.copy_(tensors[name])
    return backend


def fetch_weights(
    url: str,
    cache_dir: str | Path = DEFAULT_CACHE_DIR,
    client: httpx.Client | None = None,
    timeout: float = 60.0,
    retries: int = 2,
) -> Path:
    """Download ``url`` into ``cache_dir`` unless already cached.

    Retries transport errors and 5xx responses; any other failure status
    raises BackendUnavailable.
    """
    target = Path(cache_dir) / (Path(urlparse(url).path).name or "weights.fcnt")
    if target.is_file():
        return target

    own_client = client is None
    if own_client:
        client = httpx.Client(follow_redirects=True, timeout=timeout)
    try:
        last_error = "unknown"
        for attempt in range(1 + retries):
            try:
                with client.stream("GET", url) as resp:
                    if resp.status_code >= 500:
                        last_error = f"HTTP {resp.status_code}"
                        continue
                    if resp.status_code >= 400:
                        raise BackendUnavailable(f"cannot fetch {url}: HTTP {resp.status_code}")
                    target.parent.mkdir(parents=True, exist_ok=True)
                    partial = target.with_name(target.name + ".part")
                    with open(partial, "wb") as f:
                        for chunk in resp.iter_bytes():
                            f.write(chunk)
                    os.replace(partial, target)
                    return target
            except httpx.HTTPError as exc:
                last_error = str(exc) or type(exc).__name__
                if attempt < retries:
                    time.sleep(0.5 * (attempt + 1))
        raise BackendUnavailable(f"cannot fetch {url}: {last_error}")
    finally:
        if own_client:
            client.close()


def resolve_backend(
    spec: str,
    cache_dir: str | Path | None = None,
    stage_channels=DEFAULT_STAGE_CHANNELS,
) -> ExtractorBackend:
    """Build a backend from ``stub:<seed>`` or ``pretrained:<path-or-url>``."""
    kind, _, value = spec.partition(":")
    if kind == "stub":
        try:
            seed = int(value)
        except ValueError as exc:
            raise ConfigError(f"backend spec '{spec}': stub seed must be an integer") from exc
        return make_stub_backend(seed, stage_channels)
    if kind == "pretrained" and value:
        if urlparse(value).scheme in ("http", "https"):
            value = str(fetch_weights(value, cache_dir or DEFAULT_CACHE_DIR))
        return load_pretrained_backend(value)
    raise ConfigError(f"backend spec '{spec}' must be 'stub:<seed>' or 'pretrained:<path>'")


# --- Visualization ----------------------------------------------------------


def _normalize_channel(fmap: np.ndarray) -> np.ndarray:
    lo, hi = float(fmap.min()), float(fmap.max())
    if hi - lo <= 0.0:
        return np.full(fmap.shape, 128, dtype=np.uint8)
    return np.round((fmap - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render_grid(maps: np.ndarray, pad: int = 2) -> Image.Image:
    """Tile (N, H, W) maps into a near-square grayscale grid."""
    n, h, w = maps.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    canvas = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = (
            _normalize_channel(maps[i])
        )
    return Image.fromarray(canvas)


def visualize_pyramid(
    pyramid: FeaturePyramid, n_maps: int, out_dir: str | Path, batch_index: int = 0
) -> list[Path]:
    """Write ``stage<k>.png`` grids of the first ``n_maps`` channels per stage.

    Each channel is min-max scaled to 0..255 on its own; a constant channel
    renders as uniform 128.
    """
    if n_maps < 1:
        raise ValueError(f"n_maps must be >= 1, got {n_maps}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, stage in enumerate(pyramid.stages, start=1):
        count = min(n_maps, stage.shape[1])
        maps = stage[batch_index, :count].detach().cpu().to(torch.float64).numpy()
        path = out / f"stage{k}.png"
        render_grid(maps).save(path)
        written.append(path)
    return written
