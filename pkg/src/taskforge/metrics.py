"""Evaluation measures: palette snapping, IoU/F-1/MAE/RMSE/PSNR, and
per-position scoring of predicted output chains."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ImageRaster, Palette, SegMap
from .errors import EvaluationError, MetricError

PSNR_SENTINEL = 99.0  # reported for zero MSE so aggregates stay finite


class MetricKind(Enum):
    IOU = "iou"
    F1 = "f1"
    MAE = "mae"
    RMSE = "rmse"
    PSNR = "psnr"


def snap_to_palette(image: ImageRaster, palette: Palette) -> SegMap:
    """Assign each pixel to the class whose palette color is nearest (Euclidean).

    Ties break toward the lowest class id, and background loses ties to any
    class. Distances use exact integer arithmetic, so tie behavior is stable.
    """
    ordered = sorted(palette.colors.items())  # ascending class id
    candidates = [rgb for _, rgb in ordered] + [palette.background]
    ids = [cid for cid, _ in ordered] + [0]
    colors = np.asarray(candidates, dtype=np.int64)
    px = image.pixels.astype(np.int64)
    d2 = ((px[:, :, None, :] - colors[None, None, :, :]) ** 2).sum(axis=-1)
    best = np.argmin(d2, axis=-1)  # first minimum wins: lowest class, bg last
    lut = np.asarray(ids, dtype=np.uint8)
    return SegMap(lut[best])


def _check_dims(a, b):
    if (a.height, a.width) != (b.height, b.width):
        raise MetricError(f"dimension mismatch: {a.height}x{a.width} vs {b.height}x{b.width}")


def _mse01(pred: ImageRaster, gt: ImageRaster) -> float:
    diff = pred.pixels.astype(np.float64) / 255.0 - gt.pixels.astype(np.float64) / 255.0
    return float(np.mean(diff * diff))


def compute_metric(pred, gt, kind: MetricKind) -> float:
    """Score a prediction against ground truth.

    IoU and F1 take SegMaps and average over the non-background classes
    present in gt; MAE/RMSE/PSNR take ImageRasters on a [0, 1] value scale.
    """
    if kind in (MetricKind.IOU, MetricKind.F1):
        if not isinstance(pred, SegMap) or not isinstance(gt, SegMap):
            raise MetricError(f"{kind.value} requires SegMap operands")
        _check_dims(pred, gt)
        classes = sorted(gt.present)
        if not classes:
            return 1.0 if not pred.present else 0.0
        scores = []
        for c in classes:
            p = pred.classes == c
            g = gt.classes == c
            inter = int(np.count_nonzero(p & g))
            if kind is MetricKind.IOU:
                union = int(np.count_nonzero(p | g))
                scores.append(inter / union)
            else:
                denom = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
                scores.append(2.0 * inter / denom if denom else 0.0)
        return float(np.mean(scores))

    if not isinstance(pred, ImageRaster) or not isinstance(gt, ImageRaster):
        raise MetricError(f"{kind.value} requires ImageRaster operands")
    _check_dims(pred, gt)
    if kind is MetricKind.MAE:
        diff = pred.pixels.astype(np.float64) - gt.pixels.astype(np.float64)
        return float(np.mean(np.abs(diff)) / 255.0)
    if kind is MetricKind.RMSE:
        return float(np.sqrt(_mse01(pred, gt)))
    if kind is MetricKind.PSNR:
        mse = _mse01(pred, gt)
        if mse == 0.0:
            return PSNR_SENTINEL
        return float(10.0 * np.log10(1.0 / mse))
    raise MetricError(f"unknown metric kind {kind!r}")


HIGHER_IS_BETTER = {
    MetricKind.IOU: True,
    MetricKind.F1: True,
    MetricKind.PSNR: True,
    MetricKind.MAE: False,
    MetricKind.RMSE: False,
}


@dataclass(frozen=True)
class ReportRow:
    position: int  # index within the output chain
    family: str  # generative | image | transform | discriminative
    label: str
    metric: MetricKind
    value: float


@dataclass(frozen=True)
class TaskReport:
    rows: tuple[ReportRow, ...]

    def aggregates(self) -> dict[tuple[str, str], float]:
        """Mean value keyed by (family, metric)."""
        groups: dict[tuple[str, str], list[float]] = {}
        for row in self.rows:
            groups.setdefault((row.family, row.metric.value), []).append(row.value)
        return {key: float(np.mean(vals)) for key, vals in sorted(groups.items())}

    def by_label(self) -> dict[tuple[str, str], float]:
        groups: dict[tuple[str, str], list[float]] = {}
        for row in self.rows:
            groups.setdefault((row.label, row.metric.value), []).append(row.value)
        return {key: float(np.mean(vals)) for key, vals in sorted(groups.items())}

    def to_json(self) -> str:
        payload = {
            "rows": [
                {
                    "position": r.position,
                    "family": r.family,
                    "label": r.label,
                    "metric": r.metric.value,
                    "value": r.value,
                }
                for r in self.rows
            ],
            "aggregates": {f"{fam}/{met}": v for (fam, met), v in self.aggregates().items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'pos':>4}  {'family':<14} {'task':<18} {'metric':<6} {'value':>10}"]
        for r in self.rows:
            lines.append(
                f"{r.position:>4}  {r.family:<14} {r.label:<18} {r.metric.value:<6} {r.value:>10.4f}"
            )
        lines.append("-" * 58)
        for (fam, met), v in self.aggregates().items():
            lines.append(f"{'':>4}  {fam:<14} {'(mean)':<18} {met:<6} {v:>10.4f}")
        return "\n".join(lines)


def metric_for_position(family: str, label: str) -> MetricKind:
    """Metric convention per task family.

    Photometric restorations score PSNR; value remaps (invert/equalize/
    brightness) and geometric transforms score RMSE; the raw-image position
    scores MAE; segmentation scores IoU and thin structures pixelwise F-1.
    """
    if family == "generative":
        base = label.split("_")[0]
        if base in ("invert", "equalize", "brightness"):
            return MetricKind.RMSE
        return MetricKind.PSNR
    if family == "image":
        return MetricKind.MAE
    if family == "transform":
        return MetricKind.RMSE
    if family == "discriminative":
        return MetricKind.IOU if label.startswith("segmentation") else MetricKind.F1
    raise MetricError(f"unknown task family {family!r}")


def evaluate_output_sequence(pred, gt, structure, palette: Palette) -> TaskReport:
    """Score a predicted output chain against ground truth, position by position.

    Discriminative positions are snapped to the shared palette before IoU/F-1;
    everything else is scored directly in pixel space.
    """
    from .sampler import chain_layout  # local import to avoid a module cycle

    pred_images = list(pred.images) if hasattr(pred, "images") else list(pred)
    gt_images = list(gt.images) if hasattr(gt, "images") else list(gt)
    if len(pred_images) != len(gt_images):
        raise EvaluationError(
            f"prediction length {len(pred_images)} != ground truth length {len(gt_images)}"
        )
    keep = sorted(getattr(gt, "keep", ()))
    layout = chain_layout(structure, keep)[1:]  # output chain excludes the query slot
    if len(layout) != len(gt_images):
        raise EvaluationError(
            f"chain length {len(gt_images)} does not match structure layout {len(layout)}"
        )

    rows = []
    for pos, (slot, p_img, g_img) in enumerate(zip(layout, pred_images, gt_images)):
        metric = metric_for_position(slot.family, slot.label)
        if metric in (MetricKind.IOU, MetricKind.F1):
            value = compute_metric(
                snap_to_palette(p_img, palette), snap_to_palette(g_img, palette), metric
            )
        else:
            value = compute_metric(p_img, g_img, metric)
        rows.append(ReportRow(pos, slot.family, slot.label, metric, value))
    return TaskReport(rows=tuple(rows))
