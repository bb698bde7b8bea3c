"""Run configuration: a flat YAML mapping validated against RUN_CONFIG_SCHEMA.

Every key has a type, optional constraints and a default. A run config is
the defaults, updated by the YAML file, updated by command-line overrides,
in that order. Unknown keys are rejected.
"""

import re
from pathlib import Path

import torch
import yaml

from .dataset import AugmentPolicy, ROTATIONS
from .errors import ConfigError
from .extractor import DEFAULT_STAGE_CHANNELS
from .fusion import FUSION_MODES
from .model import ModelConfig
from .profiler import MIN_REPEATS, MIN_WARMUP
from .trainer import TrainConfig

RESOLVED_CONFIG_NAME = "config.resolved.yaml"
INPUT_SIZE_PATTERN = re.compile(r"^\s*(\d+)\s*[xX]\s*(\d+)\s*$")

RUN_CONFIG_SCHEMA: dict[str, dict] = {
    # data
    "train_root": {"type": "string", "nullable": True, "default": None},
    "val_root": {"type": "string", "nullable": True, "default": None},
    "eval_roots": {"type": "list", "item_type": "string", "default": []},
    "images_dir": {"type": "string", "min_length": 1, "default": "images"},
    "masks_dir": {"type": "string", "min_length": 1, "default": "masks"},
    "out_dir": {"type": "string", "min_length": 1, "default": "runs/flexicrack"},
    "input_size": {"type": "list", "item_type": "integer", "length": 2, "item_min": 16, "default": [512, 512]},
    "eval_resize": {"type": "boolean", "default": True},
    # model
    "base_channels": {"type": "integer", "min": 1, "default": 64},
    "fusion_mode": {"type": "string", "enum": list(FUSION_MODES), "default": "igam"},
    "groups": {"type": "integer", "min": 1, "default": 4},
    "backend": {"type": "string", "pattern": r"^(stub:-?\d+|pretrained:.+)$", "default": "stub:0"},
    "stub_channels": {
        "type": "list", "item_type": "integer", "length": 5, "item_min": 1,
        "default": list(DEFAULT_STAGE_CHANNELS),
    },
    "weights_cache": {"type": "string", "nullable": True, "default": None},
    # training
    "seed": {"type": "integer", "default": 0},
    "deterministic": {"type": "boolean", "default": True},
    "lr0": {"type": "number", "min_exclusive": 0, "default": 3e-4},
    "epochs": {"type": "integer", "min": 1, "default": 100},
    "batch_size": {"type": "integer", "min": 1, "default": 2},
    "weight_decay": {"type": "number", "min": 0, "default": 0.01},
    "betas": {"type": "list", "item_type": "number", "length": 2, "default": [0.9, 0.999]},
    "checkpoint_every": {"type": "integer", "min": 1, "default": 1},
    "val_fraction": {"type": "number", "min": 0, "max": 0.9, "default": 0.1},
    "num_workers": {"type": "integer", "min": 0, "default": 0},
    "flip_h_prob": {"type": "number", "min": 0, "max": 1, "default": 0.5},
    "flip_v_prob": {"type": "number", "min": 0, "max": 1, "default": 0.5},
    "rotation_choices": {
        "type": "list", "item_type": "integer", "item_enum": list(ROTATIONS), "min_items": 1,
        "default": list(ROTATIONS),
    },
    "augment_seed": {"type": "integer", "nullable": True, "default": None},
    "device": {"type": "string", "min_length": 1, "default": "cpu"},
    # evaluation / tools
    "threshold": {"type": "number", "min_exclusive": 0, "max_exclusive": 1, "default": 0.5},
    "n_maps": {"type": "integer", "min": 1, "default": 9},
    "warmup": {"type": "integer", "min": MIN_WARMUP, "default": MIN_WARMUP},
    "repeats": {"type": "integer", "min": MIN_REPEATS, "default": MIN_REPEATS},
}


def default_config() -> dict:
    return {
        key: (list(spec["default"]) if isinstance(spec["default"], list) else spec["default"])
        for key, spec in RUN_CONFIG_SCHEMA.items()
    }


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(value, spec: dict):
    """YAML reads ``3e-4`` as a string; numbers given that way are accepted."""
    if spec.get("type") == "number" and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if spec.get("type") == "list" and spec.get("item_type") == "number" and isinstance(value, list):
        return [_coerce(v, {"type": "number"}) for v in value]
    return value


def _check_scalar(value, field_type: str) -> str | None:
    if field_type == "string" and not isinstance(value, str):
        return f"expected string, got {type(value).__name__}"
    if field_type == "integer" and (not isinstance(value, int) or isinstance(value, bool)):
        return f"expected integer, got {type(value).__name__}"
    if field_type == "number" and not _is_number(value):
        return f"expected number, got {type(value).__name__}"
    if field_type == "boolean" and not isinstance(value, bool):
        return f"expected boolean, got {type(value).__name__}"
    return None


def validate_field(field_name: str, value, spec: dict) -> list[str]:
    """Validate a single value against its schema entry.

    Returns a list of error strings (empty if valid).
    """
    if value is None:
        return [] if spec.get("nullable") else ["must not be null"]

    field_type = spec.get("type")
    errors = []

    if field_type == "list":
        if not isinstance(value, list):
            return [f"expected list, got {type(value).__name__}"]
        if "length" in spec and len(value) != spec["length"]:
            errors.append(f"expected {spec['length']} items, got {len(value)}")
        if "min_items" in spec and len(value) < spec["min_items"]:
            errors.append(f"too few items ({len(value)}, min {spec['min_items']})")
        for i, item in enumerate(value):
            problem = _check_scalar(item, spec.get("item_type", "string"))
            if problem:
                errors.append(f"item [{i}] {problem}")
            elif "item_min" in spec and item < spec["item_min"]:
                errors.append(f"item [{i}] value {item} below minimum {spec['item_min']}")
            elif "item_enum" in spec and item not in spec["item_enum"]:
                errors.append(f"item [{i}] must be one of {spec['item_enum']}, got {item}")
        return errors

    problem = _check_scalar(value, field_type)
    if problem:
        return [problem]

    if field_type == "string":
        if "enum" in spec and value not in spec["enum"]:
            errors.append(f"must be one of {spec['enum']}, got '{value}'")
        if "min_length" in spec and len(value) < spec["min_length"]:
            errors.append(f"too short ({len(value)} chars, min {spec['min_length']})")
        if "pattern" in spec and not re.match(spec["pattern"], value):
            errors.append(f"does not match pattern {spec['pattern']}")
    elif field_type in ("integer", "number"):
        if "min" in spec and value < spec["min"]:
            errors.append(f"value {value} below minimum {spec['min']}")
        if "min_exclusive" in spec and value <= spec["min_exclusive"]:
            errors.append(f"value {value} must be greater than {spec['min_exclusive']}")
        if "max" in spec and value > spec["max"]:
            errors.append(f"value {value} above maximum {spec['max']}")
        if "max_exclusive" in spec and value >= spec["max_exclusive"]:
            errors.append(f"value {value} must be less than {spec['max_exclusive']}")
    return errors


def validate_run_config(cfg: dict) -> list[str]:
    errors = []
    for key in sorted(cfg):
        spec = RUN_CONFIG_SCHEMA.get(key)
        if spec is None:
            errors.append(f"unknown key '{key}' is not allowed")
            continue
        for err in validate_field(key, cfg[key], spec):
            errors.append(f"key '{key}': {err}")
    return errors


def parse_input_size(text: str) -> list[int]:
    """``"512x384"`` -> ``[512, 384]`` (height first)."""
    match = INPUT_SIZE_PATTERN.match(str(text))
    if not match:
        raise ConfigError(f"input_size must look like HxW, got '{text}'")
    return [int(match.group(1)), int(match.group(2))]


def parse_overrides(tokens: list[str]) -> dict:
    """Turn ``["--key", "value", "--other=1"]`` into ``{"key": "value", "other": 1}``.

    Values are parsed as YAML scalars, so ``true``, ``16`` and ``[1, 2]``
    arrive typed. Dashes in key names become underscores.
    """
    overrides = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or token == "--":
            raise ConfigError(f"expected --key, got '{token}'")
        key, sep, raw = token[2:].partition("=")
        if not sep:
            if i + 1 >= len(tokens) or tokens[i + 1].startswith("--"):
                raise ConfigError(f"override --{key} has no value")
            raw = tokens[i + 1]
            i += 1
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        overrides[key.replace("-", "_")] = value
        i += 1
    return overrides


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file at ``path``, then ``overrides``; validated.

    Raises:
        FileNotFoundError: If ``path`` is given and does not exist.
        ConfigError: If the file is not a mapping or any key fails validation.
    """
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a key-value mapping")
        cfg.update(loaded)
    cfg.update(overrides or {})

    if isinstance(cfg.get("input_size"), str):
        cfg["input_size"] = parse_input_size(cfg["input_size"])
    for key, spec in RUN_CONFIG_SCHEMA.items():
        if key in cfg:
            cfg[key] = _coerce(cfg[key], spec)

    errors = validate_run_config(cfg)
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def check_device(name: str) -> str:
    """Raise ConfigError unless torch can place tensors on ``name`` on this host."""
    try:
        device = torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"device '{name}' is not a torch device: {exc}") from exc
    if device.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError(f"device '{name}' requested but CUDA is not available")
    if device.type == "mps" and not torch.backends.mps.is_available():
        raise ConfigError(f"device '{name}' requested but MPS is not available")
    return name


def write_resolved_config(cfg: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_CONFIG_NAME
    path.write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
    return path


def to_model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        base_channels=cfg["base_channels"],
        fusion_mode=cfg["fusion_mode"],
        groups=cfg["groups"],
        backend=cfg["backend"],
        stub_channels=tuple(cfg["stub_channels"]),
    ).validate()


def to_augment_policy(cfg: dict) -> AugmentPolicy:
    seed = cfg["seed"] if cfg["augment_seed"] is None else cfg["augment_seed"]
    return AugmentPolicy(
        flip_h_prob=cfg["flip_h_prob"],
        flip_v_prob=cfg["flip_v_prob"],
        rotation_choices=tuple(cfg["rotation_choices"]),
        seed=seed,
    )


def to_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr0=cfg["lr0"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        weight_decay=cfg["weight_decay"],
        betas=tuple(cfg["betas"]),
        seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"],
        augment=to_augment_policy(cfg),
        num_workers=cfg["num_workers"],
        deterministic=cfg["deterministic"],
        device=cfg["device"],
        threshold=cfg["threshold"],
    ).validate()
