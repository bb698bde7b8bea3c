"""Pixel confusion counts, F1 / IoU / Dice with micro and macro aggregation,
and the report writers shared by evaluation and profiling.

Ratio convention: a 0/0 ratio is 1 when prediction and ground truth are both
empty (perfect agreement on absence), otherwise 0.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .errors import EmptyInput, NonBinaryInput, ShapeMismatch

AGGREGATIONS = ("micro", "macro")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"confusion counts must be nonnegative: {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def both_empty(self) -> bool:
        return self.tp == 0 and self.fp == 0 and self.fn == 0


@dataclass(frozen=True)
class MetricReport:
    f1: float
    iou: float
    dice: float
    aggregation: str
    n_images: int
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return asdict(self)


def _as_binary(mask, name: str) -> torch.Tensor:
    t = torch.as_tensor(mask)
    if t.numel() and not torch.all((t == 0) | (t == 1)):
        raise NonBinaryInput(f"{name} holds values other than 0 and 1")
    return t.bool()


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    """Pixel tallies of a binary prediction against a binary ground truth."""
    pred = _as_binary(pred_mask, "prediction")
    gt = _as_binary(gt_mask, "ground truth")
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ")
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=pred.numel() - tp - fp - fn)


def _ratio(num: float, den: float, empty: bool) -> float:
    if den == 0:
        return 1.0 if empty else 0.0
    return num / den


def scores(c: ConfusionCounts) -> dict[str, float]:
    """precision, recall, f1, iou, dice for one set of counts."""
    empty = c.both_empty
    precision = _ratio(c.tp, c.tp + c.fp, empty)
    recall = _ratio(c.tp, c.tp + c.fn, empty)
    return {
        "precision": precision,
        "recall": recall,
        "f1": _ratio(2 * precision * recall, precision + recall, empty),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, empty),
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, empty),
    }


def compute_metrics(
    counts_per_image: list[ConfusionCounts], aggregation: str = "micro"
) -> MetricReport:
    """Micro: pool counts, then score once. Macro: score per image, then average."""
    if not counts_per_image:
        raise EmptyInput("compute_metrics needs at least one image")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got '{aggregation}'")

    if aggregation == "micro":
        pooled = ConfusionCounts()
        for c in counts_per_image:
            pooled = pooled + c
        s = scores(pooled)
    else:
        per_image = [scores(c) for c in counts_per_image]
        s = {k: sum(d[k] for d in per_image) / len(per_image) for k in per_image[0]}

    return MetricReport(
        f1=s["f1"],
        iou=s["iou"],
        dice=s["dice"],
        aggregation=aggregation,
        n_images=len(counts_per_image),
        precision=s["precision"],
        recall=s["recall"],
    )


# --- Report files -----------------------------------------------------------


def format_report_text(payload: dict) -> str:
    """``key: value`` lines followed by a fenced JSON block of the same payload."""
    lines = [f"{key}: {value}" for key, value in payload.items()]
    lines += ["", "```json", json.dumps(payload, indent=2, ensure_ascii=False), "```"]
    return "\n".join(lines) + "\n"


def write_report(payload: dict, path: str | Path) -> Path:
    """Write ``payload`` as ``<path>.json`` plus a ``<path>.txt`` companion."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    path.with_suffix(".txt").write_text(format_report_text(payload))
    return json_path
