"""Pseudo-label selection and uncertainty maps.

From the three prompt-conditioned masks (m1, m2, m3) we keep the pixel-wise
intersection y_int (high-precision label) and union y_uni (high-recall
label); their XOR is the uncertainty map u marking pixels the prompts
disagree on. Training later restricts cross-teaching to u.

Bundles are persisted as three PNGs per image so the training stage never
re-queries the segmenter:

    <id>__yint.png  <id>__yuni.png  <id>__unc.png

plus bundles_manifest.csv (image_id,n_yint,n_yuni,n_unc) with foreground
pixel counts per mask.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .errors import MissingArtifactError, ValidationError

MANIFEST_HEADER = ["image_id", "n_yint", "n_yuni", "n_unc"]
_SUFFIXES = {"y_int": "__yint.png", "y_uni": "__yuni.png", "u": "__unc.png"}


@dataclass
class PseudoLabelBundle:
    image_id: str
    y_int: np.ndarray
    y_uni: np.ndarray
    u: np.ndarray
    m1: np.ndarray | None = None
    m2: np.ndarray | None = None
    m3: np.ndarray | None = None


def select_pseudo_labels(m1, m2, m3):
    """Per-pixel AND / OR of the three masks -> (y_int, y_uni)."""
    for m in (m1, m2, m3):
        dataio.validate_mask(m)
    if not (m1.shape == m2.shape == m3.shape):
        raise ValidationError(
            f"mask dimension mismatch: {m1.shape}, {m2.shape}, {m3.shape}"
        )
    y_int = m1 & m2 & m3
    y_uni = m1 | m2 | m3
    return y_int, y_uni


def uncertainty_map(y_int, y_uni):
    """Pixel-wise XOR; requires y_int to be nested inside y_uni."""
    dataio.validate_mask(y_int)
    dataio.validate_mask(y_uni)
    if y_int.shape != y_uni.shape:
        raise ValidationError(
            f"mask dimension mismatch: {y_int.shape} vs {y_uni.shape}"
        )
    if (y_int & ~y_uni).any():
        raise ValidationError("y_int is not a subset of y_uni (corrupted inputs?)")
    return y_int ^ y_uni


def build_bundle(image, prompts, segmenter):
    """Segment all three prompts and reduce them to one bundle."""
    m1, m2, m3 = segmenter.segment_all(image, prompts)
    y_int, y_uni = select_pseudo_labels(m1, m2, m3)
    u = uncertainty_map(y_int, y_uni)
    return PseudoLabelBundle(image.id, y_int, y_uni, u, m1, m2, m3)


def save_bundle(bundle, out_dir):
    out_dir = Path(out_dir)
    dataio.save_mask(bundle.y_int, out_dir / f"{bundle.image_id}{_SUFFIXES['y_int']}")
    dataio.save_mask(bundle.y_uni, out_dir / f"{bundle.image_id}{_SUFFIXES['y_uni']}")
    dataio.save_mask(bundle.u, out_dir / f"{bundle.image_id}{_SUFFIXES['u']}")


def load_bundle(bundles_dir, image_id, expected_shape=None):
    """Load the three persisted masks and re-check the bundle invariants."""
    bundles_dir = Path(bundles_dir)
    masks = {}
    for key, suffix in _SUFFIXES.items():
        path = bundles_dir / f"{image_id}{suffix}"
        if not path.is_file():
            raise MissingArtifactError(
                f"pseudo-label mask not found: {path} (run gen-pseudolabels first)"
            )
        masks[key] = dataio.load_mask(path, expected_shape=expected_shape)
    if (masks["y_int"] & ~masks["y_uni"]).any():
        raise ValidationError(f"bundle {image_id!r}: y_int not nested in y_uni")
    if ((masks["y_int"] ^ masks["y_uni"]) != masks["u"]).any():
        raise ValidationError(f"bundle {image_id!r}: uncertainty map is not y_int XOR y_uni")
    return PseudoLabelBundle(image_id, masks["y_int"], masks["y_uni"], masks["u"])


def write_manifest(path, bundles):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for b in sorted(bundles, key=lambda b: b.image_id):
            w.writerow([b.image_id, int(b.y_int.sum()), int(b.y_uni.sum()),
                        int(b.u.sum())])
