"""Promptable segmenter backends.

The first pipeline stage needs a foundation-style segmenter that turns a box
prompt into a binary mask. Running one in-process is out of scope; instead
three interchangeable backends cover testing and offline integration:

  oracle        gt_mask clipped to the box (synthetic scenes only)
  noisy-oracle  oracle output eroded or dilated by a disk, the direction
                chosen by a deterministic hash of (image_id, box, seed) --
                gives the three prompts controlled disagreement
  recorded      reads externally produced masks from preds/<id>__b<k>.png

All backends guarantee: output has image dimensions, all foreground lies
inside the rasterized box, and repeated calls are bit-identical.
"""

import hashlib
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dataio
from .errors import MissingPredictionError, ValidationError
from .geometry import BOX_NAMES


def _rasterized(box, height, width):
    rs, cs = box.to_slices(height, width)
    if rs.stop <= rs.start or cs.stop <= cs.start:
        raise ValidationError(
            f"box {box} rasterizes to an empty region on a {height}x{width} image"
        )
    return rs, cs


def disk_structure(radius):
    """Boolean disk: offsets with dx^2+dy^2 <= radius^2."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r


def _normalize_gt(gt_lookup):
    if callable(gt_lookup):
        return gt_lookup
    return lambda image_id: gt_lookup[image_id]


class PromptableSegmenter:
    """Interface: segment(image, box) -> binary mask of image dimensions."""

    def segment(self, image, box, box_name="b1"):
        raise NotImplementedError

    def segment_all(self, image, prompts):
        """Apply segment() to b1, b2, b3; returns (m1, m2, m3) in that order."""
        return tuple(self.segment(image, prompts[name], name) for name in BOX_NAMES)


class OracleSegmenter(PromptableSegmenter):
    """Ground truth clipped to the prompt box."""

    def __init__(self, gt_lookup):
        self._gt = _normalize_gt(gt_lookup)

    def segment(self, image, box, box_name="b1"):
        gt = self._gt(image.id)
        if gt.shape != image.pixels.shape:
            raise ValidationError(
                f"gt mask shape {gt.shape} does not match image {image.id!r} "
                f"shape {image.pixels.shape}"
            )
        rs, cs = _rasterized(box, *image.pixels.shape)
        out = np.zeros_like(gt)
        out[rs, cs] = gt[rs, cs]
        return out


class NoisyOracleSegmenter(OracleSegmenter):
    """Oracle output perturbed by erosion or dilation with a disk of radius
    ``radius``; even hash -> erosion, odd -> dilation. The hash covers the
    integer-rasterized box so the perturbation is stable per (image, box,
    seed) but differs across the three prompts of one image.
    """

    def __init__(self, gt_lookup, seed=0, radius=2):
        super().__init__(gt_lookup)
        if radius < 0:
            raise ValidationError(f"noise radius must be >= 0, got {radius}")
        self.seed = int(seed)
        self.radius = int(radius)
        self._structure = disk_structure(self.radius)

    def _erode_not_dilate(self, image_id, box):
        ix0, iy0 = math.floor(box.x_min), math.floor(box.y_min)
        ix1, iy1 = math.ceil(box.x_max), math.ceil(box.y_max)
        key = f"{image_id}|{ix0},{iy0},{ix1},{iy1}|{self.seed}"
        return hashlib.sha256(key.encode("utf-8")).digest()[0] % 2 == 0

    def segment(self, image, box, box_name="b1"):
        base = super().segment(image, box, box_name)
        if self.radius == 0:
            return base
        if self._erode_not_dilate(image.id, box):
            morphed = ndimage.binary_erosion(base, structure=self._structure)
        else:
            morphed = ndimage.binary_dilation(base, structure=self._structure)
        out = morphed.astype(np.uint8)
        clip = np.zeros_like(out)
        rs, cs = _rasterized(box, *image.pixels.shape)
        clip[rs, cs] = out[rs, cs]
        return clip


class RecordedSegmenter(PromptableSegmenter):
    """Passthrough for externally generated predictions.

    Expects ``<pred_dir>/<image_id>__<box_name>.png``. Files are validated
    against the box-confinement contract so a mask recorded for the wrong
    image or box fails loudly instead of poisoning the pseudo-labels.
    """

    def __init__(self, pred_dir):
        self.pred_dir = Path(pred_dir)

    def segment(self, image, box, box_name="b1"):
        if box_name not in BOX_NAMES:
            raise ValidationError(f"unknown box name {box_name!r}")
        path = self.pred_dir / f"{image.id}__{box_name}.png"
        if not path.is_file():
            raise MissingPredictionError(
                f"recorded prediction not found: {path.name} (looked in {self.pred_dir})"
            )
        mask = dataio.load_mask(path, expected_shape=image.pixels.shape)
        rs, cs = _rasterized(box, *image.pixels.shape)
        inside = np.zeros_like(mask)
        inside[rs, cs] = mask[rs, cs]
        if (mask != inside).any():
            raise ValidationError(
                f"{path.name}: foreground outside the prompt box {box_name} {box}"
            )
        return mask


def make_segmenter(kind, gt_lookup=None, seed=0, radius=2, pred_dir=None):
    """Factory used by the CLI; kind in {oracle, noisy-oracle, recorded}."""
    if kind == "oracle":
        if gt_lookup is None:
            raise ValidationError("oracle segmenter needs ground-truth masks")
        return OracleSegmenter(gt_lookup)
    if kind == "noisy-oracle":
        if gt_lookup is None:
            raise ValidationError("noisy-oracle segmenter needs ground-truth masks")
        return NoisyOracleSegmenter(gt_lookup, seed=seed, radius=radius)
    if kind == "recorded":
        if pred_dir is None:
            raise ValidationError("recorded segmenter needs --preds directory")
        return RecordedSegmenter(pred_dir)
    raise ValidationError(f"unknown segmenter kind {kind!r}")


def gt_lookup_from_dataset(index):
    """Build a caching image_id -> gt mask lookup from a DatasetIndex."""
    paths = {}
    for e in index.entries:
        if e.gt_mask_path is None:
            raise ValidationError(
                f"image {e.image_id!r} has no gt mask; oracle backends need gt_masks/"
            )
        paths[e.image_id] = e.gt_mask_path
    cache = {}

    def lookup(image_id):
        if image_id not in cache:
            if image_id not in paths:
                raise ValidationError(f"no gt mask known for image {image_id!r}")
            cache[image_id] = dataio.load_mask(paths[image_id])
        return cache[image_id]

    return lookup
