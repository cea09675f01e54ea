"""Synthetic ultrasound-like phantoms with derived aspect-ratio annotations.

Each scene is a star-convex blob (rotated ellipse whose polar radius is
modulated by a bounded low-frequency perturbation) rendered darker than a
speckled background, the way nodules present in B-mode images. Because the
blob is generated analytically we also know its exact mask, from which a
clinical-style annotation is derived the way a sonographer would place it:

  diameter A: the boundary pixel pair at maximum Euclidean distance
              (brute force over boundary pixels)
  diameter B: the longest chord perpendicular to A, found by binning
              foreground pixels into 1-px slabs along the A axis

Scene i uses its own spawned stream default_rng([seed, i]), so scenes are
independent of generation order and count.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dataio
from .errors import ConfigError, NumericalError
from .metrics import boundary_pixels


@dataclass
class SynthConfig:
    count: int
    image_size: int = 128
    r_min: float = 10.0
    r_max: float = 24.0
    perturb_amp: float = 0.15
    speckle: float = 0.18
    contrast: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if not 4 <= self.r_min <= self.r_max:
            raise ConfigError(f"need 4 <= r_min <= r_max, got ({self.r_min}, {self.r_max})")
        if self.r_max >= self.image_size / 2:
            raise ConfigError(
                f"r_max {self.r_max} must be < image_size/2 = {self.image_size / 2}"
            )
        if not 0 <= self.perturb_amp <= 0.3:
            raise ConfigError(f"perturb_amp must be in [0, 0.3], got {self.perturb_amp}")
        if self.speckle < 0:
            raise ConfigError(f"speckle must be >= 0, got {self.speckle}")
        if not 0 < self.contrast <= 1:
            raise ConfigError(f"contrast must be in (0, 1], got {self.contrast}")


def _draw_blob_mask(cfg, rng):
    """Rasterize one star-convex blob fully inside the frame."""
    size = cfg.image_size
    a = rng.uniform(cfg.r_min, cfg.r_max)
    b = rng.uniform(max(cfg.r_min * 0.8, 0.55 * a), a)
    theta = rng.uniform(0.0, np.pi)
    # low-frequency radial modulation, total amplitude bounded by perturb_amp
    w2 = rng.uniform(0.0, 1.0)
    phases = rng.uniform(0.0, 2 * np.pi, size=2)
    margin = a * (1.0 + cfg.perturb_amp) + 3.0
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)

    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - cx
    dy = yy - cy
    phi = np.arctan2(dy, dx)
    rel = phi - theta
    r_ellipse = a * b / np.sqrt((b * np.cos(rel)) ** 2 + (a * np.sin(rel)) ** 2)
    pert = cfg.perturb_amp * (w2 * np.cos(2 * phi + phases[0])
                              + (1.0 - w2) * np.cos(3 * phi + phases[1]))
    radius = r_ellipse * (1.0 + pert)
    return (dx * dx + dy * dy <= radius * radius).astype(np.uint8)


def _mask_is_sound(mask, size):
    if not mask.any():
        return False
    if mask[0, :].any() or mask[-1, :].any() or mask[:, 0].any() or mask[:, -1].any():
        return False
    _, n_comp = ndimage.label(mask, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    if n_comp != 1:
        return False
    fill = mask.mean()
    return 0.01 <= fill <= 0.40


def derive_annotation(image_id, mask):
    """Clinical-style two-diameter annotation computed from an exact mask."""
    bnd = boundary_pixels(mask)  # (M, 2) rows of (row, col)
    pts = bnd[:, ::-1].astype(np.float64)  # -> (x, y)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)
    p1, p2 = tuple(pts[i]), tuple(pts[j])

    fg = np.argwhere(mask == 1)[:, ::-1].astype(np.float64)  # (x, y)
    v = np.array(p2) - np.array(p1)
    v /= np.linalg.norm(v)
    w = np.array([-v[1], v[0]])
    center = (np.array(p1) + np.array(p2)) / 2.0
    s = (fg - center) @ v
    t = (fg - center) @ w
    bins = np.rint(s).astype(np.int64)
    best_len, best = -1.0, None
    for b in np.unique(bins):
        sel = bins == b
        tb = t[sel]
        length = float(tb.max() - tb.min())
        if length > best_len:
            lo = fg[sel][int(np.argmin(tb))]
            hi = fg[sel][int(np.argmax(tb))]
            best_len, best = length, (tuple(lo), tuple(hi))
    p3, p4 = best
    return dataio.AspectRatioAnnotation(
        image_id, p1, p2, p3, p4,
        crossing=dataio._segments_cross_strictly(p1, p2, p3, p4),
    )


def generate_scene(cfg, rng, image_id="scene"):
    """One (Image, gt_mask, annotation) triple; deterministic in rng state."""
    size = cfg.image_size
    mask = None
    for _ in range(8):
        candidate = _draw_blob_mask(cfg, rng)
        if _mask_is_sound(candidate, size):
            mask = candidate
            break
    if mask is None:
        raise NumericalError(
            f"could not draw a sound nodule mask for {image_id!r} "
            f"(config too extreme?)"
        )

    base = 0.62 + 0.12 * ndimage.gaussian_filter(
        rng.standard_normal((size, size)), sigma=size / 8.0, mode="nearest"
    )
    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.5)
    clean = base * (1.0 - cfg.contrast * soft)
    speckled = clean * (1.0 + cfg.speckle * rng.standard_normal((size, size)))
    pixels = np.clip(speckled, 0.0, 1.0).astype(np.float32)

    ann = derive_annotation(image_id, mask)
    return dataio.Image(image_id, pixels), mask, ann


def generate_dataset(cfg, out_dir):
    """Write images/, gt_masks/, annotations.csv, split.csv under out_dir.

    The split is a seeded 4:1 shuffle (count//5 test images). Regeneration
    with the same config is byte-identical.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt_masks").mkdir(parents=True, exist_ok=True)

    ids = []
    ann_rows = []
    for i in range(cfg.count):
        image_id = f"synth_{i:04d}"
        rng = np.random.default_rng([cfg.seed, i])
        image, mask, ann = generate_scene(cfg, rng, image_id)
        dataio.save_image(image.pixels, out_dir / "images" / f"{image_id}.png")
        dataio.save_mask(mask, out_dir / "gt_masks" / f"{image_id}.png")
        ann_rows.append([image_id] + [repr(float(c))
                                      for p in ann.points() for c in p])
        ids.append(image_id)

    with open(out_dir / "annotations.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(dataio.ANNOTATION_HEADER)
        w.writerows(ann_rows)

    test_n = cfg.count // 5
    perm = np.random.default_rng([cfg.seed, 555]).permutation(cfg.count)
    test_ids = {ids[i] for i in perm[:test_n]}
    with open(out_dir / "split.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "split"])
        for image_id in ids:
            w.writerow([image_id, "test" if image_id in test_ids else "train"])
    return ids
