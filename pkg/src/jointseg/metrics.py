"""Evaluation metrics for saliency / camouflage maps.

All metrics take a prediction in [0, 1] and a binary ground truth as 2-D
numpy arrays of equal shape and return a float in [0, 1]. The threshold
sweeps use 255 cut points evenly spaced in the open interval (0, 1).
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

_EPS = 1e-8
_N_THRESHOLDS = 255
_THRESHOLDS = np.arange(1, _N_THRESHOLDS + 1) / (_N_THRESHOLDS + 1)


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"pred/gt must be equal-shape 2-D maps, got {pred.shape} vs {gt.shape}")
    if pred.min() < 0 or pred.max() > 1:
        raise ValueError("pred values must lie in [0, 1]")
    if not np.logical_or(gt == 0, gt == 1).all():
        raise ValueError("gt must be binary {0, 1}")
    return pred, gt


def mae(pred, gt):
    """Mean absolute error over pixels."""
    pred, gt = _check_pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def mean_f(pred, gt, beta2=0.3, adaptive=False):
    """F-measure averaged over the threshold sweep (0/0 counts as 0).

    With `adaptive` the single cut point 2*mean(pred) (clipped to 1) is
    used instead of the sweep.
    """
    pred, gt = _check_pair(pred, gt)
    thresholds = np.array([min(2 * pred.mean(), 1.0)]) if adaptive else _THRESHOLDS
    n_gt = gt.sum()
    scores = np.zeros(len(thresholds))
    for i, t in enumerate(thresholds):
        binarized = pred >= t
        tp = np.logical_and(binarized, gt == 1).sum(dtype=np.float64)
        n_pos = binarized.sum(dtype=np.float64)
        precision = tp / n_pos if n_pos > 0 else 0.0
        recall = tp / n_gt if n_gt > 0 else 0.0
        if precision + recall > 0:
            scores[i] = (1 + beta2) * precision * recall / (beta2 * precision + recall)
    return float(scores.mean())


def e_measure(pred, gt):
    """Enhanced-alignment measure, averaged over the threshold sweep.

    Degenerate ground truths follow the reference conventions: an empty gt
    scores 1 - mean(binarized pred), a full gt scores mean(binarized pred).
    """
    pred, gt = _check_pair(pred, gt)
    gt_empty = gt.sum() == 0
    gt_full = (1 - gt).sum() == 0
    phi_g = gt - gt.mean()
    scores = np.zeros(len(_THRESHOLDS))
    for i, t in enumerate(_THRESHOLDS):
        binarized = (pred >= t).astype(np.float64)
        if gt_empty:
            enhanced = 1.0 - binarized
        elif gt_full:
            enhanced = binarized
        else:
            phi_p = binarized - binarized.mean()
            align = 2.0 * phi_p * phi_g / (phi_p**2 + phi_g**2 + _EPS)
            enhanced = (align + 1.0) ** 2 / 4.0
        scores[i] = enhanced.mean()
    return float(scores.mean())


def _object_score(values):
    if values.size == 0:
        return 0.0
    x_mean = values.mean()
    x_std = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x_mean / (x_mean**2 + 1.0 + x_std + _EPS)


def _s_object(pred, gt):
    mu = gt.mean()
    o_fg = _object_score(pred[gt == 1])
    o_bg = _object_score((1.0 - pred)[gt == 0])
    return mu * o_fg + (1.0 - mu) * o_bg


def _centroid(gt):
    rows, cols = np.where(gt == 1)
    r = int(np.round(rows.mean())) + 1
    c = int(np.round(cols.mean())) + 1
    return r, c


def _quadrant_ssim(pred_q, gt_q):
    n = pred_q.size
    x, y = pred_q.mean(), gt_q.mean()
    denom = max(n - 1, 1)
    sigma_x = ((pred_q - x) ** 2).sum() / denom
    sigma_y = ((gt_q - y) ** 2).sum() / denom
    sigma_xy = ((pred_q - x) * (gt_q - y)).sum() / denom
    alpha = 4.0 * x * y * sigma_xy
    beta = (x**2 + y**2) * (sigma_x + sigma_y)
    if alpha != 0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0 else 0.0


def _s_region(pred, gt):
    r, c = _centroid(gt)
    total = gt.size
    score = 0.0
    for rows, columns in (
        (slice(0, r), slice(0, c)),
        (slice(0, r), slice(c, None)),
        (slice(r, None), slice(0, c)),
        (slice(r, None), slice(c, None)),
    ):
        gt_q = gt[rows, columns]
        if gt_q.size == 0:
            continue
        score += (gt_q.size / total) * _quadrant_ssim(pred[rows, columns], gt_q)
    return score


def s_measure(pred, gt, alpha=0.5):
    """Structure measure: object-aware plus region-aware similarity."""
    pred, gt = _check_pair(pred, gt)
    mu = gt.mean()
    if mu == 0:
        score = 1.0 - pred.mean()
    elif mu == 1:
        score = pred.mean()
    else:
        score = alpha * _s_object(pred, gt) + (1.0 - alpha) * _s_region(pred, gt)
    return float(np.clip(score, 0.0, 1.0))


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def load_grayscale(path):
    """8-bit grayscale raster scaled to [0, 1]."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read raster {path}: {exc}") from exc


@dataclass
class ImageRecord:
    name: str
    mae: float
    mean_f: float
    e_measure: float
    s_measure: float


@dataclass
class MetricReport:
    records: list[ImageRecord] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def means(self):
        if not self.records:
            return {"mae": 0.0, "mean_f": 0.0, "e_measure": 0.0, "s_measure": 0.0}
        return {
            key: float(np.mean([getattr(rec, key) for rec in self.records]))
            for key in ("mae", "mean_f", "e_measure", "s_measure")
        }

    def to_dict(self):
        return {
            "records": [vars(rec) for rec in self.records],
            "means": self.means,
            "errors": list(self.errors),
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "mae", "mean_f", "e_measure", "s_measure"])
            for rec in self.records:
                writer.writerow([rec.name, rec.mae, rec.mean_f, rec.e_measure, rec.s_measure])
            means = self.means
            writer.writerow(["MEAN", means["mae"], means["mean_f"], means["e_measure"], means["s_measure"]])


def _resize_bilinear(arr, shape):
    if arr.shape == shape:
        return arr
    img = Image.fromarray((arr * 255.0).astype(np.uint8))
    resized = img.resize((shape[1], shape[0]), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64) / 255.0


def evaluate_dirs(pred_dir, gt_dir):
    """Pair prediction/ground-truth rasters by filename stem and score them.

    Unmatched or unreadable files land in `report.errors` and are excluded
    from the means.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    preds = {p.stem: p for p in sorted(pred_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    gts = {p.stem: p for p in sorted(gt_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}

    report = MetricReport()
    for stem in sorted(set(preds) - set(gts)):
        report.errors.append(f"no ground truth for prediction {preds[stem].name}")
    for stem in sorted(set(gts) - set(preds)):
        report.errors.append(f"no prediction for ground truth {gts[stem].name}")

    for stem in sorted(set(preds) & set(gts)):
        try:
            pred = load_grayscale(preds[stem])
            gt = (load_grayscale(gts[stem]) >= 0.5).astype(np.float64)
            pred = _resize_bilinear(pred, gt.shape)
        except OSError as exc:
            report.errors.append(str(exc))
            continue
        report.records.append(
            ImageRecord(
                name=stem,
                mae=mae(pred, gt),
                mean_f=mean_f(pred, gt),
                e_measure=e_measure(pred, gt),
                s_measure=s_measure(pred, gt),
            )
        )
    return report
