"""Overlap and distance metrics with per-image, per-fold and pooled reporting.

Distances are in pixels. Hausdorff distances use all foreground pixels of the
binarized prediction and the ground truth as point sets.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DataError, ShapeError

CSV_COLUMNS = ("id", "fold", "dice", "jac", "sen", "spe", "hd", "hd95")
METRIC_NAMES = ("dice", "jac", "sen", "spe", "hd", "hd95")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _to_numpy(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def binarize(pred, threshold=0.5) -> np.ndarray:
    return _to_numpy(pred) >= threshold


def confusion(pred, g, threshold=0.5) -> ConfusionCounts:
    """Count pixels of ``pred >= threshold`` against the binary mask ``g``."""
    p = binarize(pred, threshold)
    t = _to_numpy(g) >= 0.5
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and mask {t.shape} differ in shape")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, int(p.size) - tp - fp - fn, fn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def jaccard(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def sensitivity(c: ConfusionCounts) -> float:
    """NaN when the ground truth is empty (undefined recall)."""
    denom = c.tp + c.fn
    return math.nan if denom == 0 else c.tp / denom


def specificity(c: ConfusionCounts) -> float:
    denom = c.tn + c.fp
    return math.nan if denom == 0 else c.tn / denom


def directed_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance from every point of ``a`` to its nearest point of ``b``."""
    dist, _ = cKDTree(np.asarray(b, dtype=np.float64)).query(np.asarray(a, dtype=np.float64), k=1)
    return np.atleast_1d(dist)


def _require_points(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Hausdorff distance needs two non-empty point sets")
    return a.reshape(len(a), -1), b.reshape(len(b), -1)


def hausdorff(a, b) -> float:
    a, b = _require_points(a, b)
    return float(max(directed_distances(a, b).max(), directed_distances(b, a).max()))


def hausdorff95(a, b) -> float:
    """Max of the two directed 95th-percentile distances."""
    a, b = _require_points(a, b)
    return float(
        max(np.percentile(directed_distances(a, b), 95), np.percentile(directed_distances(b, a), 95))
    )


def mask_distances(pred_mask, g_mask) -> tuple[float, float, bool]:
    """``(hd, hd95, degenerate)`` for two binary masks.

    Both empty gives 0; exactly one empty gives the image diagonal. Either
    case is flagged degenerate so aggregation can exclude it.
    """
    p = np.argwhere(np.asarray(pred_mask, dtype=bool))
    g = np.argwhere(np.asarray(g_mask, dtype=bool))
    if len(p) == 0 and len(g) == 0:
        return 0.0, 0.0, True
    if len(p) == 0 or len(g) == 0:
        h, w = np.shape(pred_mask)[-2:]
        diag = math.hypot(h, w)
        return diag, diag, True
    return hausdorff(p, g), hausdorff95(p, g), False


@dataclass
class ImageMetrics:
    id: str
    fold: int
    dice: float
    jac: float
    sen: float
    spe: float
    hd: float
    hd95: float
    hd_degenerate: bool = False


def evaluate_image(pred, g, *, id="", fold=0, threshold=0.5) -> ImageMetrics:
    pred = np.squeeze(_to_numpy(pred))
    g = np.squeeze(_to_numpy(g))
    c = confusion(pred, g, threshold)
    hd, hd95, degenerate = mask_distances(pred >= threshold, g >= 0.5)
    return ImageMetrics(
        str(id), int(fold), dice(c), jaccard(c), sensitivity(c), specificity(c), hd, hd95, degenerate
    )


def _summary(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {"mean": math.nan, "std": math.nan, "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


@dataclass
class MetricReport:
    rows: list
    per_fold: dict = field(default_factory=dict)
    pooled: dict = field(default_factory=dict)
    across_folds: dict = field(default_factory=dict)
    exclusions: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "per_fold": {str(k): v for k, v in self.per_fold.items()},
            "pooled": self.pooled,
            "across_folds": self.across_folds,
            "exclusions": self.exclusions,
            "n_images": len(self.rows),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow([getattr(r, c) for c in CSV_COLUMNS])

    def write_json(self, path):
        Path(path).write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _usable(row: ImageMetrics, name: str) -> bool:
    if name in ("hd", "hd95"):
        return not row.hd_degenerate
    return not math.isnan(getattr(row, name))


def aggregate(rows) -> MetricReport:
    """Mean/std per fold, pooled over all images, and across fold means.

    Undefined sensitivities/specificities (NaN) and degenerate Hausdorff
    values are left out of their metric's statistics and tallied in
    ``exclusions``. Standard deviations are population (ddof=0).
    """
    rows = sorted(rows, key=lambda r: (r.fold, r.id))
    if not rows:
        raise DataError("cannot aggregate an empty set of metric rows")
    by_fold = defaultdict(list)
    for r in rows:
        by_fold[r.fold].append(r)
    report = MetricReport(rows=rows)
    for fold, fold_rows in sorted(by_fold.items()):
        report.per_fold[fold] = {
            m: _summary([getattr(r, m) for r in fold_rows if _usable(r, m)]) for m in METRIC_NAMES
        }
    report.pooled = {m: _summary([getattr(r, m) for r in rows if _usable(r, m)]) for m in METRIC_NAMES}
    report.across_folds = {
        m: _summary([s[m]["mean"] for s in report.per_fold.values() if s[m]["n"]]) for m in METRIC_NAMES
    }
    report.exclusions = {
        m: sum(1 for r in rows if not _usable(r, m)) for m in METRIC_NAMES
    }
    return report


def rows_from_dicts(items) -> list[ImageMetrics]:
    return [ImageMetrics(**{k: v for k, v in d.items() if k in ImageMetrics.__dataclass_fields__}) for d in items]


def rows_to_dicts(rows) -> list[dict]:
    return [asdict(r) for r in rows]
