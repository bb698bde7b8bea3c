"""Image/mask pair datasets: scanning, loading, augmentation, batching.

Expected layout::

    <root>/images/<stem>.{png,jpg,jpeg}
    <root>/masks/<stem>.{png,jpg,jpeg}      (8-bit, single channel)

Pairs are matched by filename stem and kept in lexicographic stem order.
"""

from collections.abc import Iterator
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from torch.utils.data import DataLoader, Dataset

from .errors import (
    AmbiguousStem,
    BadTargetSize,
    DatasetError,
    DecodeError,
    EmptyDataset,
    MissingMask,
    ShapeMismatch,
)
from .seeding import derive_seed, make_generator

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_THRESHOLD = 127
SIZE_DIVISOR = 16
ROTATIONS = (0, 90, 180, 270)


# --- Data types -------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    """Matched image/mask pairs of one dataset directory."""

    root: Path
    pairs: tuple[tuple[Path, Path], ...]
    target_size: tuple[int, int]

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def stems(self) -> list[str]:
        return [image.stem for image, _ in self.pairs]

    def subset(self, indices: list[int]) -> "DatasetManifest":
        return replace(self, pairs=tuple(self.pairs[i] for i in indices))


@dataclass
class SegmentationSample:
    """One image (3, H, W) in [0, 1] and its binary mask (1, H, W)."""

    image: torch.Tensor
    mask: torch.Tensor
    id: str


@dataclass(frozen=True)
class AugmentPolicy:
    """Random flips and right-angle rotations applied jointly to image and mask."""

    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    rotation_choices: tuple[int, ...] = ROTATIONS
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_h_prob", "flip_v_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if not self.rotation_choices:
            raise ValueError("rotation_choices must not be empty")
        bad = [r for r in self.rotation_choices if r not in ROTATIONS]
        if bad:
            raise ValueError(f"rotation_choices must be a subset of {ROTATIONS}, got {bad}")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(flip_h_prob=0.0, flip_v_prob=0.0, rotation_choices=(0,), seed=seed)


@dataclass
class Batch:
    images: torch.Tensor
    masks: torch.Tensor
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


# --- Scanning ---------------------------------------------------------------


def check_target_size(target_size) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in target_size)
    except (TypeError, ValueError) as exc:
        raise BadTargetSize(f"target_size must be (H, W), got {target_size!r}") from exc
    if h <= 0 or w <= 0 or h % SIZE_DIVISOR or w % SIZE_DIVISOR:
        raise BadTargetSize(
            f"target_size {h}x{w} must be positive multiples of {SIZE_DIVISOR}"
        )
    return h, w


def _index_by_stem(directory: Path) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for path in sorted(directory.iterdir()):
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if path.stem in found:
            raise AmbiguousStem(
                f"stem '{path.stem}' appears twice in {directory}: "
                f"{found[path.stem].name}, {path.name}"
            )
        found[path.stem] = path
    return found


def scan_dataset(
    root: str | Path,
    target_size: tuple[int, int],
    images_dir: str = "images",
    masks_dir: str = "masks",
) -> DatasetManifest:
    """Pair images with masks by stem under ``root``.

    Masks without an image are ignored; an image without a mask is an error.

    Raises:
        FileNotFoundError: If root or one of its subdirectories is missing.
        BadTargetSize: If a target dimension is not a positive multiple of 16.
        MissingMask: If an image stem has no mask.
        EmptyDataset: If no pairs are found.
    """
    size = check_target_size(target_size)
    root = Path(root)
    image_root, mask_root = root / images_dir, root / masks_dir
    for directory in (root, image_root, mask_root):
        if not directory.is_dir():
            raise FileNotFoundError(f"Dataset directory not found: {directory}")

    images = _index_by_stem(image_root)
    masks = _index_by_stem(mask_root)

    pairs = []
    for stem in sorted(images):
        if stem not in masks:
            raise MissingMask(f"image '{stem}' has no mask in {mask_root}")
        pairs.append((images[stem], masks[stem]))

    if not pairs:
        raise EmptyDataset(f"No image/mask pairs found under {root}")
    return DatasetManifest(root=root, pairs=tuple(pairs), target_size=size)


def split_manifest(
    manifest: DatasetManifest, val_fraction: float = 0.1, seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded disjoint train/validation split.

    With fewer than two samples there is nothing to hold out, and the
    validation manifest is the training manifest.
    """
    n = len(manifest)
    if n < 2 or val_fraction <= 0:
        return manifest, manifest
    n_val = min(n - 1, max(1, round(n * val_fraction)))
    order = torch.randperm(n, generator=make_generator(seed, 0x5EED)).tolist()
    val_idx = sorted(order[:n_val])
    train_idx = sorted(order[n_val:])
    return manifest.subset(train_idx), manifest.subset(val_idx)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write ``<stem>\\t<image_path>\\t<mask_path>`` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{image.stem}\t{image}\t{mask}" for image, mask in manifest.pairs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path, target_size: tuple[int, int]) -> DatasetManifest:
    path = Path(path)
    pairs = []
    for line_num, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"{path}:{line_num}: expected 3 tab-separated fields")
        pairs.append((Path(parts[1]), Path(parts[2])))
    if not pairs:
        raise EmptyDataset(f"Manifest {path} lists no pairs")
    return DatasetManifest(
        root=path.parent, pairs=tuple(pairs), target_size=check_target_size(target_size)
    )


# --- Loading ----------------------------------------------------------------


def _decode(path: Path, mode: str) -> Image.Image:
    try:
        with Image.open(path) as img:
            img.load()
            return img.convert(mode)
    except (OSError, UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def resize_image(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a (C, H, W) float tensor with half-pixel centers."""
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    out = F.interpolate(image[None], size=size, mode="bilinear", align_corners=False)
    return out[0].clamp_(0.0, 1.0)


def binarize_mask(mask: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Map 8-bit intensities to {0, 1}: values above 127 become 1."""
    mask = torch.as_tensor(mask)
    return (mask > MASK_THRESHOLD).to(torch.float32)


def load_image(path: str | Path) -> torch.Tensor:
    """Decode an RGB image into a (3, H, W) float tensor in [0, 1]."""
    array = np.asarray(_decode(Path(path), "RGB"), dtype=np.uint8)
    return torch.from_numpy(array.copy()).permute(2, 0, 1).to(torch.float32) / 255.0


def load_sample(
    manifest: DatasetManifest, index: int, resize: bool = True
) -> SegmentationSample:
    """Load pair ``index``, resized to the manifest's target size.

    The image is resized bilinearly; the mask with nearest-neighbor on raw
    intensities, then binarized, so it never holds intermediate values.
    ``resize=False`` keeps native resolution.
    """
    if not 0 <= index < len(manifest):
        raise IndexError(f"sample index {index} out of range (0..{len(manifest) - 1})")
    image_path, mask_path = manifest.pairs[index]

    image = load_image(image_path)
    mask_raw = np.asarray(_decode(mask_path, "L"), dtype=np.uint8)
    if tuple(image.shape[-2:]) != mask_raw.shape:
        raise ShapeMismatch(
            f"{image_path.stem}: image is {tuple(image.shape[-2:])}, "
            f"mask is {mask_raw.shape}"
        )

    mask = torch.from_numpy(mask_raw.copy()).to(torch.float32)[None]
    if resize and tuple(image.shape[-2:]) != manifest.target_size:
        image = resize_image(image, manifest.target_size)
        mask = F.interpolate(mask[None], size=manifest.target_size, mode="nearest-exact")[0]

    return SegmentationSample(image=image, mask=binarize_mask(mask), id=image_path.stem)


# --- Augmentation -----------------------------------------------------------


def augment(
    sample: SegmentationSample, policy: AugmentPolicy, draw: torch.Generator
) -> SegmentationSample:
    """Apply one random flip/rotation draw identically to image and mask.

    Three values are always drawn from ``draw`` so the stream stays aligned
    whatever the policy. 90/270 degree rotations are skipped for non-square
    samples.
    """
    u_h, u_v = torch.rand(2, generator=draw).tolist()
    choices = list(policy.rotation_choices)
    if sample.image.shape[-2] != sample.image.shape[-1]:
        choices = [r for r in choices if r in (0, 180)] or [0]
    rotation = choices[int(torch.randint(len(choices), (1,), generator=draw))]

    image, mask = sample.image, sample.mask
    if u_h < policy.flip_h_prob:
        image, mask = image.flip(-1), mask.flip(-1)
    if u_v < policy.flip_v_prob:
        image, mask = image.flip(-2), mask.flip(-2)
    if rotation:
        k = rotation // 90
        image = torch.rot90(image, k, dims=(-2, -1))
        mask = torch.rot90(mask, k, dims=(-2, -1))
    return SegmentationSample(image=image.contiguous(), mask=mask.contiguous(), id=sample.id)


# --- Batching ---------------------------------------------------------------


class CrackDataset(Dataset):
    """Map-style dataset over a manifest.

    Augmentation for sample ``index`` in ``epoch`` draws from a generator
    seeded by (policy.seed, epoch, index), so results do not depend on
    worker count or iteration order.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        policy: AugmentPolicy | None = None,
        epoch: int = 0,
        resize: bool = True,
    ):
        self.manifest = manifest
        self.policy = policy
        self.epoch = epoch
        self.resize = resize

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, index: int) -> SegmentationSample:
        sample = load_sample(self.manifest, index, resize=self.resize)
        if self.policy is not None:
            sample = augment(
                sample, self.policy, make_generator(self.policy.seed, self.epoch, index)
            )
        return sample


def collate_samples(samples: list[SegmentationSample]) -> Batch:
    return Batch(
        images=torch.stack([s.image for s in samples]),
        masks=torch.stack([s.mask for s in samples]),
        ids=[s.id for s in samples],
    )


def epoch_order(n: int, shuffle_seed: int | None, epoch: int = 0) -> list[int]:
    if shuffle_seed is None:
        return list(range(n))
    gen = torch.Generator()
    gen.manual_seed(derive_seed(shuffle_seed, epoch))
    return torch.randperm(n, generator=gen).tolist()


def batch_iter(
    manifest: DatasetManifest,
    batch_size: int,
    shuffle_seed: int | None = None,
    policy: AugmentPolicy | None = None,
    epoch: int = 0,
    num_workers: int = 0,
) -> Iterator[Batch]:
    """Yield batches of stacked images (B, 3, H, W) and masks (B, 1, H, W).

    The last batch may be smaller. Order is manifest order when
    ``shuffle_seed`` is None, else a permutation fixed by (shuffle_seed, epoch).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    loader = DataLoader(
        CrackDataset(manifest, policy=policy, epoch=epoch),
        batch_size=batch_size,
        sampler=epoch_order(len(manifest), shuffle_seed, epoch),
        num_workers=num_workers,
        collate_fn=collate_samples,
    )
    yield from loader
