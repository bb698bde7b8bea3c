"""Training loop: AdamW, per-epoch cosine learning rate, checkpoints, resume.

Only the encoder, fusion and decoder weights are handed to the optimizer;
the extractor is never updated. Data order and augmentation are pure
functions of (seed, epoch, index), and checkpoints carry optimizer moments,
so resuming from ``last.ckpt`` continues exactly where the run stopped.

Outputs in ``out_dir``:
    train.log   one tab-separated line per epoch:
                epoch, lr, train_bce, train_dice_loss, train_total, val_dice
    last.ckpt   every ``checkpoint_every`` epochs and after the final epoch
    best.ckpt   whenever validation micro-Dice improves
"""

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn
from tqdm import tqdm

from .container import read_container, write_container
from .dataset import AugmentPolicy, Batch, DatasetManifest, batch_iter
from .errors import ConfigError, CorruptWeights, NonFiniteLoss
from .evaluator import evaluate_manifest, micro_dice
from .extractor import ExtractorBackend
from .losses import LossValue, total_loss
from .model import FlexiCrackNet, ModelConfig, build_model, trainable_parameters
from .seeding import set_deterministic

LOG_COLUMNS = ("epoch", "lr", "train_bce", "train_dice_loss", "train_total", "val_dice")


@dataclass
class TrainConfig:
    lr0: float = 3e-4
    epochs: int = 100
    batch_size: int = 2
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_every: int = 1
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    num_workers: int = 0
    deterministic: bool = True
    device: str = "cpu"
    threshold: float = 0.5

    def validate(self) -> "TrainConfig":
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["augment"]["rotation_choices"] = list(self.augment.rotation_choices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        augment = dict(d.pop("augment", {}))
        if "rotation_choices" in augment:
            augment["rotation_choices"] = tuple(augment["rotation_choices"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(augment=AugmentPolicy(**augment), **d)


@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    step: int = 0
    best_val_dice: float = -1.0
    history: list[dict] = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None
    rng_state: torch.Tensor | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "best_val_dice": self.best_val_dice,
            "history": self.history,
        }


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """lr0 * 0.5 * (1 + cos(pi * epoch / epochs)); no warmup, floor 0."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch == cfg.epochs:
        return 0.0
    return max(0.0, cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs)))


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [p for _, p in trainable_parameters(model)],
        lr=cfg.lr0,
        betas=tuple(cfg.betas),
        weight_decay=cfg.weight_decay,
    )


def _check_finite(model: nn.Module, loss: LossValue) -> None:
    for name in ("bce", "dice_loss"):
        value = getattr(loss, name)
        if not torch.isfinite(value):
            raise NonFiniteLoss(f"loss component '{name}' is {float(value)}")
    for name, p in trainable_parameters(model):
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteLoss(f"gradient of '{name}' is not finite")


def train_step(
    model: nn.Module, batch: Batch, optimizer: torch.optim.Optimizer, device: str = "cpu"
) -> LossValue:
    """One AdamW step on ``total_loss``; returns detached loss components."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(batch.images.to(device))
    loss = total_loss(out.probabilities, batch.masks.to(device))
    if not torch.isfinite(loss.total):
        _check_finite(model, loss)
    loss.total.backward()
    _check_finite(model, loss)
    optimizer.step()
    return LossValue(loss.bce.detach(), loss.dice_loss.detach(), loss.total.detach())


def _write_log(path: Path, history: list[dict]) -> None:
    lines = [
        "\t".join(
            str(row["epoch"]) if key == "epoch" else f"{row[key]:.8g}" for key in LOG_COLUMNS
        )
        for row in history
    ]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def fit(
    model: FlexiCrackNet,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    cfg: TrainConfig,
    out_dir: str | Path,
    state: TrainState | None = None,
    stop_after_epoch: int | None = None,
    progress: bool = False,
) -> TrainState:
    """Train for ``cfg.epochs`` epochs (or until ``stop_after_epoch``).

    Pass a ``state`` from ``load_checkpoint`` to continue an earlier run.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    set_deterministic(cfg.deterministic)
    model.to(cfg.device)

    if state is None:
        torch.manual_seed(cfg.seed)
        state = TrainState()
    elif state.rng_state is not None:
        torch.set_rng_state(state.rng_state)
    if state.optimizer is None:
        state.optimizer = make_optimizer(model, cfg)

    log_path = out / "train.log"
    _write_log(log_path, state.history)
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

    for epoch in range(state.epoch, last_epoch):
        lr = lr_schedule(cfg, epoch)
        for group in state.optimizer.param_groups:
            group["lr"] = lr

        sums = {"bce": 0.0, "dice_loss": 0.0, "total": 0.0}
        seen = 0
        batches = batch_iter(
            train_manifest,
            cfg.batch_size,
            shuffle_seed=cfg.seed,
            policy=cfg.augment,
            epoch=epoch,
            num_workers=cfg.num_workers,
        )
        for batch in tqdm(batches, desc=f"epoch {epoch + 1}", disable=not progress, leave=False):
            loss = train_step(model, batch, state.optimizer, cfg.device)
            n = len(batch)
            for key, value in loss.to_dict().items():
                sums[key] += value * n
            seen += n
            state.step += 1

        results = evaluate_manifest(model, val_manifest, cfg.threshold, device=cfg.device)
        val_dice = micro_dice(results)
        state.epoch = epoch + 1
        state.rng_state = torch.get_rng_state()
        state.history.append(
            {
                "epoch": state.epoch,
                "lr": lr,
                "train_bce": sums["bce"] / seen,
                "train_dice_loss": sums["dice_loss"] / seen,
                "train_total": sums["total"] / seen,
                "val_dice": val_dice,
            }
        )
        _write_log(log_path, state.history)

        if val_dice > state.best_val_dice:
            state.best_val_dice = val_dice
            save_checkpoint(out / "best.ckpt", model, state, cfg)
        if state.epoch % cfg.checkpoint_every == 0 or state.epoch == last_epoch:
            save_checkpoint(out / "last.ckpt", model, state, cfg)

    return state


def resume(
    checkpoint_path: str | Path,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    out_dir: str | Path,
    stop_after_epoch: int | None = None,
    progress: bool = False,
) -> tuple[FlexiCrackNet, TrainState]:
    model, state, cfg = load_checkpoint(checkpoint_path)
    state = fit(
        model, train_manifest, val_manifest, cfg, out_dir,
        state=state, stop_after_epoch=stop_after_epoch, progress=progress,
    )
    return model, state


# --- Checkpoints ------------------------------------------------------------


def save_checkpoint(
    path: str | Path, model: FlexiCrackNet, state: TrainState, cfg: TrainConfig
) -> Path:
    """Model tensors, optimizer moments, RNG state and both configs in one file."""
    tensors = {f"model/{name}": t for name, t in model.state_dict().items()}
    optimizer_meta = None
    if state.optimizer is not None:
        sd = state.optimizer.state_dict()
        for index, slots in sd["state"].items():
            for key, value in slots.items():
                tensors[f"optim/{index}/{key}"] = torch.as_tensor(value)
        groups = []
        for group in sd["param_groups"]:
            group = dict(group)
            group["betas"] = list(group["betas"])
            groups.append(group)
        optimizer_meta = {"param_groups": groups}
    if state.rng_state is not None:
        tensors["rng/torch"] = state.rng_state

    metadata = {
        "kind": "checkpoint",
        "model_config": model.cfg.to_dict(),
        "train_config": cfg.to_dict(),
        "state": state.to_dict(),
        "optimizer": optimizer_meta,
    }
    return write_container(path, tensors, metadata)


def load_checkpoint(
    path: str | Path, device: str = "cpu"
) -> tuple[FlexiCrackNet, TrainState, TrainConfig]:
    """Rebuild model, training state and config from a checkpoint.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        CorruptWeights: If the file is truncated or does not describe this model.
        VersionMismatch: If the container version is unsupported.
    """
    tensors, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise CorruptWeights(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")
    try:
        model_cfg = ModelConfig.from_dict(meta["model_config"])
        train_cfg = TrainConfig.from_dict(meta["train_config"])
        header = model_cfg.extractor
        extractor = ExtractorBackend(
            name=header["name"],
            stage_channels=header["stage_channels"],
            stage_strides=header["stage_strides"],
            mean=header["mean"],
            std=header["std"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptWeights(f"{path}: bad checkpoint header ({exc})") from exc

    model = build_model(model_cfg, extractor=extractor)
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    try:
        model.load_state_dict(model_state, strict=True)
    except RuntimeError as exc:
        raise CorruptWeights(f"{path}: model tensors do not match header ({exc})") from exc
    model.to(device)

    saved = meta.get("state", {})
    state = TrainState(
        epoch=saved.get("epoch", 0),
        step=saved.get("step", 0),
        best_val_dice=saved.get("best_val_dice", -1.0),
        history=saved.get("history", []),
        rng_state=tensors.get("rng/torch"),
    )
    optimizer_meta = meta.get("optimizer")
    if optimizer_meta is not None:
        state.optimizer = make_optimizer(model, train_cfg)
        slots: dict[int, dict] = {}
        for key, value in tensors.items():
            if key.startswith("optim/"):
                _, index, slot = key.split("/", 2)
                slots.setdefault(int(index), {})[slot] = value
        groups = [
            {**g, "betas": tuple(g["betas"])} for g in optimizer_meta["param_groups"]
        ]
        try:
            state.optimizer.load_state_dict({"state": slots, "param_groups": groups})
        except (ValueError, KeyError) as exc:
            raise CorruptWeights(f"{path}: optimizer state does not match model ({exc})") from exc
    return model, state, train_cfg
