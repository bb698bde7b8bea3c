"""Per-image evaluation of a model over a dataset manifest."""

from dataclasses import dataclass
from pathlib import Path

from torch import nn
from tqdm import tqdm

from .dataset import DatasetManifest, load_sample
from .metrics import ConfusionCounts, compute_metrics, confusion, scores, write_report
from .model import predict_mask

TABLE_COLUMNS = ("id", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "iou", "dice")


@dataclass
class ImageResult:
    id: str
    counts: ConfusionCounts


def evaluate_manifest(
    model: nn.Module,
    manifest: DatasetManifest,
    threshold: float = 0.5,
    resize: bool = True,
    device: str = "cpu",
    progress: bool = False,
) -> list[ImageResult]:
    """Confusion counts per image, in manifest order.

    With ``resize=False`` images are evaluated at native size using
    pad-and-crop, so sizes need not be multiples of 16.
    """
    results = []
    indices = range(len(manifest))
    for index in tqdm(indices, desc="eval", disable=not progress, leave=False):
        sample = load_sample(manifest, index, resize=resize)
        images = sample.image[None].to(device)
        pred = predict_mask(model, images, threshold, pad=not resize)[0].cpu()
        results.append(ImageResult(id=sample.id, counts=confusion(pred, sample.mask)))
    return results


def micro_dice(results: list[ImageResult]) -> float:
    return compute_metrics([r.counts for r in results], "micro").dice


def write_per_image_table(results: list[ImageResult], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(TABLE_COLUMNS)]
    for r in results:
        s = scores(r.counts)
        c = r.counts
        row = [r.id, c.tp, c.fp, c.fn, c.tn] + [f"{s[k]:.6f}" for k in TABLE_COLUMNS[5:]]
        lines.append("\t".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_evaluation(results: list[ImageResult], out_dir: str | Path, threshold: float) -> dict:
    """Write micro and macro reports plus the per-image table; return both reports."""
    out = Path(out_dir)
    counts = [r.counts for r in results]
    reports = {}
    for aggregation in ("micro", "macro"):
        report = compute_metrics(counts, aggregation).to_dict()
        report["threshold"] = threshold
        write_report(report, out / f"metrics_{aggregation}.json")
        reports[aggregation] = report
    write_per_image_table(results, out / "per_image.tsv")
    return reports
