"""Depth and photometric evaluation.

Depth metrics are computed per image over valid ground-truth pixels
(gt > 0) and averaged over images by :func:`evaluate_depths`.
"""

from dataclasses import asdict, dataclass, field
import csv
import json
import math

import numpy as np

from .errors import InputError

PSNR_CAP = 99.0
DEPTH_KEYS = ("abs_rel", "sq_rel", "rmse", "rmse_log")


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    psnr: float = float("nan")
    valid_pixel_fraction: float = 1.0
    per_image: list = field(default_factory=list)

    def summary(self):
        d = asdict(self)
        d.pop("per_image")
        return d


def depth_metrics(gt, pred, valid_mask=None):
    """Returns ``(abs_rel, sq_rel, rmse, rmse_log)`` over the mask.

    ``rmse_log`` is NaN-free only when pred > 0 on the mask; otherwise it
    raises after the other three are known, via :class:`InputError`.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise InputError(f"shape mismatch {gt.shape} vs {pred.shape}")
    mask = gt > 0 if valid_mask is None else np.asarray(valid_mask, dtype=bool) & (gt > 0)
    if not mask.any():
        raise InputError("no valid pixels")
    g, p = gt[mask], pred[mask]
    diff = p - g
    abs_rel = float(np.mean(np.abs(diff) / g))
    sq_rel = float(np.mean(diff**2 / g))
    rmse = float(np.sqrt(np.mean(diff**2)))
    if (p <= 0).any():
        raise InputError("rmse_log needs positive predictions", (abs_rel, sq_rel, rmse))
    rmse_log = float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))
    return abs_rel, sq_rel, rmse, rmse_log


def psnr(rendered, gt):
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise InputError(f"shape mismatch {rendered.shape} vs {gt.shape}")
    mse = float(np.mean((rendered - gt) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def align_scale_mean(gt, pred, valid_mask=None):
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if valid_mask is not None:
        gt, pred = gt[valid_mask], pred[valid_mask]
    mg, mp = float(np.mean(gt)), float(np.mean(pred))
    if mg <= 0 or mp <= 0:
        raise InputError("mean depths must be positive for scale alignment")
    return mg / mp


def evaluate_depths(gts, preds, rgbs=None, gt_rgbs=None, masks=None, align=False):
    """Mean of per-image metrics; ``align`` rescales each prediction by the
    mean-depth ratio first (prior evaluation only)."""
    rows = []
    valid_total = count_total = 0
    for k, (gt, pred) in enumerate(zip(gts, preds)):
        gt = np.asarray(gt, dtype=np.float64)
        pred = np.asarray(pred, dtype=np.float64)
        mask = gt > 0
        if masks is not None:
            mask &= np.asarray(masks[k], dtype=bool)
        if align:
            pred = pred * align_scale_mean(gt, pred, mask)
        row = dict(zip(DEPTH_KEYS, depth_metrics(gt, pred, mask)))
        if rgbs is not None:
            row["psnr"] = psnr(rgbs[k], gt_rgbs[k])
        rows.append(row)
        valid_total += int(mask.sum())
        count_total += mask.size
    if not rows:
        raise InputError("no images to evaluate")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return MetricsReport(
        abs_rel=mean["abs_rel"], sq_rel=mean["sq_rel"], rmse=mean["rmse"], rmse_log=mean["rmse_log"],
        psnr=mean.get("psnr", float("nan")), valid_pixel_fraction=valid_total / count_total, per_image=rows,
    )


def write_report(report, csv_path, json_path):
    keys = list(report.per_image[0].keys())
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image"] + keys)
        for i, row in enumerate(report.per_image):
            w.writerow([i] + [repr(float(row[k])) for k in keys])
    with open(json_path, "w") as fh:
        json.dump(report.summary(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def aligned_error_map(gt, pred):
    """Per-pixel |s * pred - gt| with ``s`` the mean-depth ratio over valid pixels."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    mask = gt > 0
    err = np.abs(pred * align_scale_mean(gt, pred, mask) - gt)
    return np.where(mask, err, 0.0)
