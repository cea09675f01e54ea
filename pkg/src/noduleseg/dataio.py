"""Dataset formats and loaders.

On-disk layout of a dataset directory::

    images/<id>.png       8-bit grayscale, intensities 0-255
    annotations.csv       header: image_id,x1,y1,x2,y2,x3,y3,x4,y4
    gt_masks/<id>.png     optional, foreground=255 background=0
    split.csv             optional, header: image_id,split

Annotation coordinates are real-valued pixel positions (sub-pixel allowed);
(x1,y1)-(x2,y2) is one clinical diameter, (x3,y3)-(x4,y4) the other. Lines
starting with ``#`` are comments. Binary masks are represented in memory as
uint8 arrays with values in {0,1}.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import MissingArtifactError, ParseError, ValidationError

ANNOTATION_HEADER = ["image_id", "x1", "y1", "x2", "y2", "x3", "y3", "x4", "y4"]


@dataclass
class Image:
    """Grayscale image with intensities in [0, 1]."""

    id: str
    pixels: np.ndarray  # (H, W) float32

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class AspectRatioAnnotation:
    """Four endpoints of the two crossing clinical diameters of one nodule.

    ``crossing`` is False when the two segments do not strictly intersect;
    such records are accepted but downstream ellipse construction falls back
    to the centroid of the four points.
    """

    image_id: str
    p1: tuple
    p2: tuple
    p3: tuple
    p4: tuple
    crossing: bool = True

    def points(self):
        return [self.p1, self.p2, self.p3, self.p4]


@dataclass
class DatasetEntry:
    image_id: str
    image_path: Path
    annotation: AspectRatioAnnotation
    gt_mask_path: Path | None = None


@dataclass
class DatasetIndex:
    root: Path
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [e.image_id for e in self.entries]


def _segments_cross_strictly(p1, p2, p3, p4):
    """True when the open segments p1p2 and p3p4 share an interior point."""
    d1x, d1y = p2[0] - p1[0], p2[1] - p1[1]
    d2x, d2y = p4[0] - p3[0], p4[1] - p3[1]
    den = d1x * d2y - d1y * d2x
    if abs(den) < 1e-12:
        return False
    rx, ry = p3[0] - p1[0], p3[1] - p1[1]
    s = (rx * d2y - ry * d2x) / den
    t = (rx * d1y - ry * d1x) / den
    eps = 1e-12
    return eps < s < 1 - eps and eps < t < 1 - eps


def load_annotations(path):
    """Parse an annotations CSV into a list of AspectRatioAnnotation.

    Raises ParseError (naming the 1-based line number) on malformed lines and
    ValidationError on zero-length diameters. Point-in-image validation needs
    the image dimensions and happens in load_dataset.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"annotation file not found: {path}")
    anns = []
    with open(path, newline="", encoding="utf-8") as fh:
        header_seen = False
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if not header_seen:
                if fields != ANNOTATION_HEADER:
                    raise ParseError(
                        f"{path}:{lineno}: expected header "
                        f"{','.join(ANNOTATION_HEADER)!r}, got {line!r}"
                    )
                header_seen = True
                continue
            if len(fields) != 9:
                raise ParseError(
                    f"{path}:{lineno}: expected 9 fields (image_id + 8 coordinates), "
                    f"got {len(fields)}"
                )
            image_id = fields[0]
            try:
                coords = [float(v) for v in fields[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric coordinate ({exc})") from exc
            p1, p2 = (coords[0], coords[1]), (coords[2], coords[3])
            p3, p4 = (coords[4], coords[5]), (coords[6], coords[7])
            if p1 == p2 or p3 == p4:
                raise ValidationError(
                    f"annotation for {image_id!r}: zero-length diameter"
                )
            anns.append(
                AspectRatioAnnotation(
                    image_id, p1, p2, p3, p4,
                    crossing=_segments_cross_strictly(p1, p2, p3, p4),
                )
            )
        if not header_seen:
            raise ParseError(f"{path}: missing header line")
    return anns


def validate_annotation_bounds(ann, width, height):
    """All four endpoints must lie inside [0, W) x [0, H)."""
    for p in ann.points():
        if not (0 <= p[0] < width and 0 <= p[1] < height):
            raise ValidationError(
                f"annotation for {ann.image_id!r}: point {p} outside "
                f"image bounds {width}x{height}"
            )


def validate_mask(mask):
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype != np.uint8 or not np.isin(mask, (0, 1)).all():
        raise ValidationError("mask values must be uint8 in {0, 1}")


def load_mask(path, expected_shape=None):
    """Load an 8-bit grayscale PNG as a {0,1} mask (threshold at 128)."""
    img = PILImage.open(path)
    if img.mode != "L":
        raise ValidationError(f"{path}: expected 8-bit grayscale PNG, got mode {img.mode!r}")
    arr = np.asarray(img)
    if expected_shape is not None and arr.shape != tuple(expected_shape):
        raise ValidationError(
            f"{path}: mask shape {arr.shape} does not match expected {tuple(expected_shape)}"
        )
    return (arr >= 128).astype(np.uint8)


def save_mask(mask, path):
    """Write a {0,1} mask as PNG with foreground 255; inverse of load_mask."""
    validate_mask(mask)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(mask * np.uint8(255), mode="L").save(path)


def load_image(path, image_id=None):
    path = Path(path)
    img = PILImage.open(path)
    if img.mode != "L":
        raise ValidationError(f"{path}: expected 8-bit grayscale PNG, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.shape[0] < 16 or arr.shape[1] < 16:
        raise ValidationError(f"{path}: image smaller than 16x16")
    return Image(image_id or path.stem, arr)


def save_image(pixels, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_dataset(root):
    """Index a dataset directory; entries come back sorted by image id.

    Validates id uniqueness, image existence, and annotation bounds against
    the actual image dimensions (header only, pixels are not decoded).
    """
    root = Path(root)
    anns = load_annotations(root / "annotations.csv")
    seen = set()
    entries = []
    for ann in anns:
        if ann.image_id in seen:
            raise ValidationError(f"duplicate image id {ann.image_id!r} in annotations")
        seen.add(ann.image_id)
        image_path = root / "images" / f"{ann.image_id}.png"
        if not image_path.is_file():
            raise ValidationError(
                f"annotation references missing image {ann.image_id!r} "
                f"(expected {image_path})"
            )
        with PILImage.open(image_path) as img:
            width, height = img.size
        validate_annotation_bounds(ann, width, height)
        gt_path = root / "gt_masks" / f"{ann.image_id}.png"
        entries.append(
            DatasetEntry(ann.image_id, image_path, ann,
                         gt_path if gt_path.is_file() else None)
        )
    entries.sort(key=lambda e: e.image_id)
    return DatasetIndex(root, entries)


def load_split(root):
    """Read split.csv into {image_id: 'train'|'test'}."""
    path = Path(root) / "split.csv"
    if not path.is_file():
        raise MissingArtifactError(f"split file not found: {path} (run synth-data first)")
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_id", "split"]:
            raise ParseError(f"{path}: expected header image_id,split")
        for row in reader:
            if len(row) != 2 or row[1] not in ("train", "test"):
                raise ParseError(f"{path}: bad split row {row!r}")
            out[row[0]] = row[1]
    return out


def resize_nearest(arr, out_hw):
    """Nearest-neighbor resize; exact for binary label maps."""
    h, w = arr.shape[:2]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return arr
    rows = np.minimum((np.arange(oh) + 0.5) * h / oh, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(ow) + 0.5) * w / ow, w - 1).astype(np.intp)
    return arr[rows][:, cols]
