"""Command-line entry point: train, eval, predict, visualize, profile, ablate.

CLI: flexicrack train --config run.yaml --train_root data/deepcrack
     flexicrack eval runs/igam/last.ckpt data/deepcrack_test data/cfd --out runs/igam/eval
     flexicrack predict runs/igam/last.ckpt photos/ --out runs/igam/pred
     flexicrack visualize photo.png --backend stub:0 --out runs/features
     flexicrack profile --input_size 512x512 --fusion_mode none
     flexicrack ablate --config run.yaml

Any run-config key can be overridden with ``--key value``; every command
writes ``config.resolved.yaml`` into its output directory.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import (
    RUN_CONFIG_SCHEMA,
    check_device,
    load_run_config,
    parse_input_size,
    parse_overrides,
    to_model_config,
    to_train_config,
    write_resolved_config,
)
from .dataset import (
    IMAGE_SUFFIXES,
    DatasetManifest,
    load_image,
    scan_dataset,
    split_manifest,
    write_manifest,
)
from .errors import DecodeError, EmptyDataset, FlexiCrackError
from .evaluator import evaluate_manifest, write_evaluation
from .extractor import extract, resolve_backend, visualize_pyramid
from .fusion import FUSION_MODES
from .metrics import compute_metrics, write_report
from .model import FlexiCrackNet, build_model, pad_to_multiple, predict_mask, trainable_parameters
from .profiler import profile_model
from .trainer import fit, load_checkpoint, resume

OVERLAY_COLOR = (255, 0, 0)
OVERLAY_ALPHA = 0.5
ABLATION_MODES = ("none", "concat", "igam")
SUMMARY_COLUMNS = ("dataset", "aggregation", "n_images", "precision", "recall", "f1", "iou", "dice")

# Flags argparse owns; any other --key is a run-config override.
RESERVED_FLAGS = {
    "config", "out", "seed", "deterministic", "no-deterministic", "fusion_mode",
    "backend", "input_size", "resume", "stop_after_epoch", "help",
}


# --- Shared helpers ---------------------------------------------------------


def split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Separate ``--key value`` config overrides from argparse's own arguments."""
    parsed, overrides = [], []
    i = 0
    while i < len(argv):
        token = argv[i]
        name = token[2:].partition("=")[0]
        if token.startswith("--") and name and name not in RESERVED_FLAGS:
            overrides.append(token)
            if "=" not in token and i + 1 < len(argv):
                overrides.append(argv[i + 1])
                i += 1
        else:
            parsed.append(token)
        i += 1
    return parsed, overrides


def resolve_config(args: argparse.Namespace, extra: list[str]) -> dict:
    overrides = parse_overrides(extra)
    flags = {
        "seed": args.seed,
        "deterministic": args.deterministic,
        "fusion_mode": args.fusion_mode,
        "backend": args.backend,
        "out_dir": args.out,
        "input_size": parse_input_size(args.input_size) if args.input_size else None,
    }
    overrides.update({k: v for k, v in flags.items() if v is not None})
    cfg = load_run_config(args.config, overrides)
    check_device(cfg["device"])
    return cfg


def _backend(cfg: dict):
    return resolve_backend(
        cfg["backend"], cache_dir=cfg["weights_cache"], stage_channels=tuple(cfg["stub_channels"])
    )


def _build(cfg: dict, fusion_mode: str | None = None) -> FlexiCrackNet:
    model_cfg = to_model_config(cfg)
    if fusion_mode is not None:
        model_cfg = replace(model_cfg, fusion_mode=fusion_mode)
    return build_model(model_cfg, seed=cfg["seed"], extractor=_backend(cfg))


def _scan(cfg: dict, root: str | Path) -> DatasetManifest:
    return scan_dataset(
        root, tuple(cfg["input_size"]), images_dir=cfg["images_dir"], masks_dir=cfg["masks_dir"]
    )


def _train_val(cfg: dict, out: Path) -> tuple[DatasetManifest, DatasetManifest]:
    if not cfg["train_root"]:
        raise EmptyDataset("train_root is not set; pass --train_root or set it in the config")
    train = _scan(cfg, cfg["train_root"])
    if cfg["val_root"]:
        val = _scan(cfg, cfg["val_root"])
    else:
        train, val = split_manifest(train, cfg["val_fraction"], cfg["seed"])
    write_manifest(train, out / "train.manifest.tsv")
    write_manifest(val, out / "val.manifest.tsv")
    return train, val


def _dataset_names(roots: list[str]) -> list[str]:
    names, seen = [], {}
    for root in roots:
        name = Path(root).resolve().name or "dataset"
        seen[name] = seen.get(name, 0) + 1
        names.append(name if seen[name] == 1 else f"{name}_{seen[name]}")
    return names


# --- Commands ---------------------------------------------------------------


def cmd_train(args: argparse.Namespace, cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    write_resolved_config(cfg, out)
    train, val = _train_val(cfg, out)
    if args.resume:
        _, state = resume(args.resume, train, val, out, stop_after_epoch=args.stop_after_epoch, progress=True)
    else:
        model = _build(cfg)
        state = fit(
            model, train, val, to_train_config(cfg), out,
            stop_after_epoch=args.stop_after_epoch, progress=True,
        )
    print(
        f"Trained {state.epoch} epochs on {len(train)} images "
        f"(best val Dice {state.best_val_dice:.4f}) -> {out / 'last.ckpt'}"
    )
    return 0


def cmd_eval(args: argparse.Namespace, cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    write_resolved_config(cfg, out)
    roots = args.dataset_roots or cfg["eval_roots"]
    if not roots:
        raise EmptyDataset("no dataset roots given; pass them after the checkpoint or set eval_roots")
    model, _, _ = load_checkpoint(args.checkpoint, device=cfg["device"])

    summary = ["\t".join(SUMMARY_COLUMNS)]
    for root, name in zip(roots, _dataset_names(roots)):
        manifest = _scan(cfg, root)
        results = evaluate_manifest(
            model, manifest, cfg["threshold"], resize=cfg["eval_resize"],
            device=cfg["device"], progress=True,
        )
        reports = write_evaluation(results, out / name, cfg["threshold"])
        for aggregation, report in reports.items():
            row = [name, aggregation, report["n_images"]]
            row += [f"{report[k]:.6f}" for k in SUMMARY_COLUMNS[3:]]
            summary.append("\t".join(str(v) for v in row))
        micro = reports["micro"]
        print(f"Evaluated {name}: {len(results)} images, F1 {micro['f1']:.4f}, "
              f"IoU {micro['iou']:.4f}, Dice {micro['dice']:.4f}")
    (out / "eval_summary.tsv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    return 0


def render_overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend OVERLAY_COLOR at OVERLAY_ALPHA over ``image`` (H, W, 3 uint8) where mask is 1."""
    blended = image.astype(np.float64)
    color = np.array(OVERLAY_COLOR, dtype=np.float64)
    hit = mask.astype(bool)
    blended[hit] = (1.0 - OVERLAY_ALPHA) * blended[hit] + OVERLAY_ALPHA * color
    return np.round(blended).astype(np.uint8)


def _image_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise EmptyDataset(f"No images found in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"Input not found: {path}")
    return [path]


def cmd_predict(args: argparse.Namespace, cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    write_resolved_config(cfg, out)
    files = _image_files(Path(args.input))
    model, _, _ = load_checkpoint(args.checkpoint, device=cfg["device"])

    failed = 0
    for path in files:
        try:
            image = load_image(path)
        except DecodeError as exc:
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            failed += 1
            continue
        batch = image[None].to(cfg["device"])
        mask = predict_mask(model, batch, cfg["threshold"], pad=True)[0, 0].cpu().numpy()
        rgb = np.round(image.permute(1, 2, 0).numpy() * 255.0).astype(np.uint8)
        Image.fromarray(mask * 255).save(out / f"{path.stem}_mask.png")
        Image.fromarray(render_overlay(rgb, mask)).save(out / f"{path.stem}_overlay.png")

    done = len(files) - failed
    print(f"Predicted {done}/{len(files)} images -> {out}")
    return 0 if failed == 0 else 1


def cmd_visualize(args: argparse.Namespace, cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    write_resolved_config(cfg, out)
    backend = _backend(cfg)
    images, _ = pad_to_multiple(load_image(args.image)[None])
    written = visualize_pyramid(extract(backend, images), cfg["n_maps"], out)
    print(f"Wrote {len(written)} stage grids -> {out}")
    return 0


def cmd_profile(args: argparse.Namespace, cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    write_resolved_config(cfg, out)
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    else:
        model = _build(cfg)
    report = profile_model(
        model, tuple(cfg["input_size"]), warmup=cfg["warmup"], repeats=cfg["repeats"],
        device=cfg["device"],
    ).to_dict()
    report["fusion_mode"] = model.fusion_mode
    path = write_report(report, out / "profile.json")
    print(
        f"Profiled {model.fusion_mode}: {report['params_millions']:.3f}M params, "
        f"{report['gflops']:.3f} GFLOPs, {report['latency_ms_mean']:.1f} ms -> {path}"
    )
    return 0


def cmd_ablate(args: argparse.Namespace, cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    write_resolved_config(cfg, out)
    train, val = _train_val(cfg, out)
    splits = [("val", val)]
    eval_roots = cfg["eval_roots"]
    splits += [(name, _scan(cfg, root)) for root, name in zip(eval_roots, _dataset_names(eval_roots))]
    train_cfg = to_train_config(cfg)

    header = ["fusion_mode", "params_millions"]
    for name, _ in splits:
        header += [f"{name}_f1", f"{name}_iou", f"{name}_dice"]
    rows = ["\t".join(header)]
    for mode in ABLATION_MODES:
        model = _build(cfg, fusion_mode=mode)
        fit(model, train, val, train_cfg, out / mode, progress=True)
        params = sum(p.numel() for _, p in trainable_parameters(model)) / 1e6
        row = [mode, f"{params:.6f}"]
        for name, manifest in splits:
            results = evaluate_manifest(
                model, manifest, cfg["threshold"], resize=cfg["eval_resize"], device=cfg["device"]
            )
            write_evaluation(results, out / mode / "eval" / name, cfg["threshold"])
            report = compute_metrics([r.counts for r in results], "micro")
            row += [f"{report.f1:.6f}", f"{report.iou:.6f}", f"{report.dice:.6f}"]
        rows.append("\t".join(row))
        print(f"Ablated {mode}: " + ", ".join(f"{h}={v}" for h, v in zip(header[2:], row[2:])))
    (out / "ablation.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "visualize": cmd_visualize,
    "profile": cmd_profile,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", default=None, help="Path to run config YAML")
    common.add_argument("--out", default=None, help="Output directory (config key out_dir)")
    common.add_argument("--seed", type=int, default=None, help="Global seed")
    common.add_argument(
        "--deterministic", action=argparse.BooleanOptionalAction, default=None,
        help="Force deterministic kernels",
    )
    common.add_argument("--fusion_mode", choices=FUSION_MODES, default=None)
    common.add_argument("--backend", default=None, help="stub:<seed> or pretrained:<path|url>")
    common.add_argument("--input_size", default=None, help="HxW, e.g. 512x512")

    parser = argparse.ArgumentParser(
        prog="flexicrack",
        description="Crack segmentation with frozen-extractor feature fusion",
        allow_abbrev=False,
        epilog=f"Config keys usable as --key value: {', '.join(sorted(RUN_CONFIG_SCHEMA))}",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], allow_abbrev=False, help="Train a model")
    p.add_argument("--resume", default=None, help="Continue from a last.ckpt")
    p.add_argument("--stop_after_epoch", type=int, default=None, help="End the run early")

    p = sub.add_parser("eval", parents=[common], allow_abbrev=False, help="Evaluate on datasets")
    p.add_argument("checkpoint")
    p.add_argument("dataset_roots", nargs="*", help="Dataset roots (default: eval_roots)")

    p = sub.add_parser("predict", parents=[common], allow_abbrev=False, help="Write masks and overlays")
    p.add_argument("checkpoint")
    p.add_argument("input", help="Image file or directory")

    p = sub.add_parser("visualize", parents=[common], allow_abbrev=False, help="Extractor feature grids")
    p.add_argument("image")

    p = sub.add_parser("profile", parents=[common], allow_abbrev=False, help="Params, GFLOPs, latency")
    p.add_argument("checkpoint", nargs="?", default=None)

    sub.add_parser("ablate", parents=[common], allow_abbrev=False, help="Compare fusion modes")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parsed, extra = split_overrides(argv)
    args = build_parser().parse_args(parsed)
    if not hasattr(args, "stop_after_epoch"):
        args.stop_after_epoch = None
    try:
        cfg = resolve_config(args, extra)
        return COMMANDS[args.command](args, cfg)
    except (FlexiCrackError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
