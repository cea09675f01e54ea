"""Evaluation metrics: DSC (percent) and HD95 (pixels).

Conventions (fixed here because toolkits disagree):
  - DSC: 100 * 2|P&G| / (|P|+|G|); both masks empty -> 100, exactly one
    empty -> 0.
  - HD95: boundary pixels are foreground pixels with a 4-neighborhood
    background neighbor or lying on the image edge. Directed distances use
    Euclidean pixel-center distance; HD95 is the max of the two directed
    95th percentiles (linear interpolation). Identical masks -> 0; exactly
    one mask empty -> the image diagonal hypot(H, W); both empty -> 0.
  - Summary std is the population standard deviation.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dataio
from .errors import ValidationError


@dataclass
class EvalResult:
    image_id: str
    dsc: float
    hd95: float


@dataclass
class EvalSummary:
    n: int
    dsc_mean: float
    dsc_std: float
    hd95_mean: float
    hd95_std: float
    skipped_missing_gt: int = 0


def _check_pair(pred, gt):
    dataio.validate_mask(pred)
    dataio.validate_mask(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")


def dsc(pred, gt):
    """Dice similarity coefficient in percent."""
    _check_pair(pred, gt)
    p = int(pred.sum())
    g = int(gt.sum())
    if p == 0 and g == 0:
        return 100.0
    if p == 0 or g == 0:
        return 0.0
    inter = int((pred & gt).sum())
    return 100.0 * 2.0 * inter / (p + g)


def boundary_pixels(mask):
    """Foreground pixels with a 4-neighbor background or an image-edge side."""
    padded = np.pad(mask, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere((mask == 1) & (interior == 0))


def hd95(pred, gt):
    """95th-percentile symmetric Hausdorff distance in pixels."""
    _check_pair(pred, gt)
    p_empty = not pred.any()
    g_empty = not gt.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        return float(math.hypot(*pred.shape))
    bp = boundary_pixels(pred)
    bg = boundary_pixels(gt)
    # exact EDT: distance from every pixel to the nearest boundary pixel
    dist_to_g = ndimage.distance_transform_edt(_not_boundary(gt.shape, bg))
    dist_to_p = ndimage.distance_transform_edt(_not_boundary(pred.shape, bp))
    d_pg = dist_to_g[bp[:, 0], bp[:, 1]]
    d_gp = dist_to_p[bg[:, 0], bg[:, 1]]
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


def _not_boundary(shape, coords):
    m = np.ones(shape, dtype=bool)
    m[coords[:, 0], coords[:, 1]] = False
    return m


def _population_std(values, mean):
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def summarize(results, skipped=0):
    if not results:
        raise ValidationError("no evaluable images (all lacked gt masks?)")
    dscs = [r.dsc for r in results]
    hds = [r.hd95 for r in results]
    dm = sum(dscs) / len(dscs)
    hm = sum(hds) / len(hds)
    return EvalSummary(len(results), dm, _population_std(dscs, dm),
                       hm, _population_std(hds, hm), skipped)


def write_eval_csv(path, results):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "dsc", "hd95"])
        for r in sorted(results, key=lambda r: r.image_id):
            w.writerow([r.image_id, repr(r.dsc), repr(r.hd95)])


def write_summary(path, summary):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"n={summary.n}",
        f"dsc_mean={summary.dsc_mean!r}",
        f"dsc_std={summary.dsc_std!r}",
        f"hd95_mean={summary.hd95_mean!r}",
        f"hd95_std={summary.hd95_std!r}",
        f"skipped_missing_gt={summary.skipped_missing_gt}",
        f"dsc={summary.dsc_mean:.1f}+-{summary.dsc_std:.1f} "
        f"hd95={summary.hd95_mean:.1f}+-{summary.hd95_std:.1f}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def evaluate(ckpt_dir, entries, mode="ensemble", image_size=None, out_dir=None):
    """Run inference on every entry with a gt mask and score it.

    Images (and gt) are nearest-resized to image_size when given; entries
    without gt are skipped with a warning count in the summary. Writes
    eval.csv and summary.txt when out_dir is set. Returns (results, summary).
    """
    from .trainer import load_infer_models, infer  # local import, avoids cycle

    models = load_infer_models(ckpt_dir, mode)
    results = []
    skipped = 0
    for e in entries:
        if e.gt_mask_path is None:
            skipped += 1
            continue
        img = dataio.load_image(e.image_path, e.image_id)
        gt = dataio.load_mask(e.gt_mask_path, expected_shape=img.pixels.shape)
        pixels = img.pixels
        if image_size is not None:
            pixels = dataio.resize_nearest(pixels, (image_size, image_size))
            gt = dataio.resize_nearest(gt, (image_size, image_size))
        pred = infer(models, pixels, mode)
        results.append(EvalResult(e.image_id, dsc(pred, gt), hd95(pred, gt)))
    summary = summarize(results, skipped)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_eval_csv(out_dir / "eval.csv", results)
        write_summary(out_dir / "summary.txt", summary)
    return results, summary
