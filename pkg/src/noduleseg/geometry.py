"""Box prompt construction from aspect-ratio annotations.

From the four endpoints of the two clinical diameters we derive three box
prompts for the promptable segmenter:

  b1  tight axis-aligned bounding box of the four endpoints
  b2  bounding box of an approximate ellipse through the endpoints
  b3  bounding box of the minimum enclosing circle of the endpoints

The approximate ellipse is stitched from four quarter-ellipse arcs sharing a
common center (the diameter intersection point) but with per-quadrant radii,
so it passes through all four endpoints exactly even when the measured
diameters are asymmetric or non-perpendicular.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError, ParseError, ValidationError

BOX_NAMES = ("b1", "b2", "b3")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous pixel coordinates (min/max corners)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValidationError(f"degenerate box: {self}")

    def contains_point(self, x, y, tol=0.0):
        return (self.x_min - tol <= x <= self.x_max + tol
                and self.y_min - tol <= y <= self.y_max + tol)

    def to_slices(self, height, width):
        """Rasterize to half-open row/col slices clipped to an HxW grid.

        Covers every pixel whose index lies in [floor(min), ceil(max)) per
        axis; a box fully outside the grid yields empty slices.
        """
        x0 = max(0, int(math.floor(self.x_min)))
        y0 = max(0, int(math.floor(self.y_min)))
        x1 = min(width, int(math.ceil(self.x_max)))
        y1 = min(height, int(math.ceil(self.y_max)))
        return slice(y0, max(y0, y1)), slice(x0, max(x0, x1))

    def pixel_mask(self, height, width):
        m = np.zeros((height, width), dtype=np.uint8)
        rs, cs = self.to_slices(height, width)
        m[rs, cs] = 1
        return m


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float


def _bbox_of_points(xs, ys):
    return Box(float(np.min(xs)), float(np.min(ys)),
               float(np.max(xs)), float(np.max(ys)))


def tight_box(ann):
    xs = [p[0] for p in ann.points()]
    ys = [p[1] for p in ann.points()]
    return _bbox_of_points(np.array(xs), np.array(ys))


def segment_intersection(p1, p2, p3, p4):
    """Interior intersection point of segments p1p2 and p3p4, or None."""
    d1x, d1y = p2[0] - p1[0], p2[1] - p1[1]
    d2x, d2y = p4[0] - p3[0], p4[1] - p3[1]
    den = d1x * d2y - d1y * d2x
    if abs(den) < 1e-12:
        return None
    rx, ry = p3[0] - p1[0], p3[1] - p1[1]
    s = (rx * d2y - ry * d2x) / den
    t = (rx * d1y - ry * d1x) / den
    eps = 1e-12
    if eps < s < 1 - eps and eps < t < 1 - eps:
        return (p1[0] + s * d1x, p1[1] + s * d1y)
    return None


def ellipse_center(ann):
    """Arc center: diameter intersection, else centroid of the endpoints."""
    c = segment_intersection(ann.p1, ann.p2, ann.p3, ann.p4)
    if c is not None:
        return c
    xs = [p[0] for p in ann.points()]
    ys = [p[1] for p in ann.points()]
    return (sum(xs) / 4.0, sum(ys) / 4.0)


def ellipse_arc_points(ann, samples_per_arc=256):
    """Sample the four quarter-ellipse arcs; (4*samples, 2) float64 array.

    Each quadrant pairs one endpoint of the first diameter with one of the
    second: arc(t) = c + ra*cos(t)*ua + rb*sin(t)*ub, t in [0, pi/2], where
    ua/ub are unit vectors from the center toward the paired endpoints and
    ra/rb their distances. Endpoints with zero distance to the center (only
    possible in the centroid fallback) contribute a degenerate radius of 0.
    """
    cx, cy = ellipse_center(ann)
    t = np.linspace(0.0, math.pi / 2.0, samples_per_arc)
    ct, st = np.cos(t), np.sin(t)
    pts = []
    for pa in (ann.p1, ann.p2):
        vax, vay = pa[0] - cx, pa[1] - cy
        for pb in (ann.p3, ann.p4):
            vbx, vby = pb[0] - cx, pb[1] - cy
            xs = cx + ct * vax + st * vbx
            ys = cy + ct * vay + st * vby
            pts.append(np.stack([xs, ys], axis=1))
    return np.concatenate(pts, axis=0)


def ellipse_box(ann, samples_per_arc=256):
    pts = ellipse_arc_points(ann, samples_per_arc)
    return _bbox_of_points(pts[:, 0], pts[:, 1])


def _circle_from_two(p, q):
    cx, cy = (p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0
    return Circle(cx, cy, math.hypot(p[0] - cx, p[1] - cy))


def _circumcircle(a, b, c):
    d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    if abs(d) < 1e-12:
        return None
    a2 = a[0] * a[0] + a[1] * a[1]
    b2 = b[0] * b[0] + b[1] * b[1]
    c2 = c[0] * c[0] + c[1] * c[1]
    ux = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d
    uy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d
    return Circle(ux, uy, math.hypot(a[0] - ux, a[1] - uy))


def min_enclosing_circle(points):
    """Smallest circle containing all points (exhaustive pairs + triples).

    Point counts here are tiny (4 endpoints), so the O(n^4) scan is cheaper
    and more robust than an incremental construction.
    """
    pts = [(float(p[0]), float(p[1])) for p in points]
    if not pts:
        raise ValidationError("minimum enclosing circle of empty point set")
    scale = max(1.0, max(abs(v) for p in pts for v in p))
    tol = 1e-9 * scale

    def covers(circ):
        rr = circ.r + tol
        return all(math.hypot(p[0] - circ.cx, p[1] - circ.cy) <= rr for p in pts)

    best = Circle(pts[0][0], pts[0][1], 0.0)
    if not covers(best):
        best = None
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            c = _circle_from_two(pts[i], pts[j])
            if covers(c) and (best is None or c.r < best.r):
                best = c
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                c = _circumcircle(pts[i], pts[j], pts[k])
                if c is not None and covers(c) and (best is None or c.r < best.r):
                    best = c
    if best is None:
        raise ValidationError("no enclosing circle found (degenerate input)")
    return best


def circle_box(ann):
    c = min_enclosing_circle(ann.points())
    return Box(c.cx - c.r, c.cy - c.r, c.cx + c.r, c.cy + c.r)


def generate_prompts(ann, samples_per_arc=256):
    """All three box prompts for one annotation, keyed b1/b2/b3."""
    return {
        "b1": tight_box(ann),
        "b2": ellipse_box(ann, samples_per_arc),
        "b3": circle_box(ann),
    }


PROMPTS_HEADER = ["image_id", "box", "x_min", "y_min", "x_max", "y_max"]


def write_prompts(path, prompts_by_image):
    """Write {image_id: {box_name: Box}} sorted by (image_id, box)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PROMPTS_HEADER)
        for image_id in sorted(prompts_by_image):
            boxes = prompts_by_image[image_id]
            for name in BOX_NAMES:
                b = boxes[name]
                w.writerow([image_id, name,
                            repr(b.x_min), repr(b.y_min),
                            repr(b.x_max), repr(b.y_max)])


def read_prompts(path):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"prompts file not found: {path} (run gen-prompts first)")
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PROMPTS_HEADER:
            raise ParseError(f"{path}: expected header {','.join(PROMPTS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise ParseError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            image_id, name = row[0], row[1]
            if name not in BOX_NAMES:
                raise ParseError(f"{path}:{lineno}: unknown box name {name!r}")
            try:
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric coordinate ({exc})") from exc
            d = out.setdefault(image_id, {})
            if name in d:
                raise ParseError(f"{path}:{lineno}: duplicate box {name} for {image_id!r}")
            d[name] = Box(*vals)
    for image_id, boxes in out.items():
        missing = [n for n in BOX_NAMES if n not in boxes]
        if missing:
            raise ParseError(f"{path}: image {image_id!r} is missing boxes {missing}")
    return out
