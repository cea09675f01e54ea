"""Prompt-geometry tests: boxes, ellipse arcs, minimum enclosing circles."""

import numpy as np
import pytest

from conftest import random_annotation
from noduleseg.dataio import AspectRatioAnnotation
from noduleseg.errors import ParseError, ValidationError
from noduleseg.geometry import (
    Box,
    circle_box,
    ellipse_arc_points,
    ellipse_box,
    ellipse_center,
    generate_prompts,
    min_enclosing_circle,
    read_prompts,
    segment_intersection,
    tight_box,
    write_prompts,
)


def welzl_mec(points, rng):
    """Independent reference: Welzl's randomized recursion."""
    def circle_two(a, b):
        c = (a + b) / 2.0
        return c, float(np.linalg.norm(a - c))

    def circle_three(a, b, c):
        # circumcenter via the 2x2 linear system of perpendicular bisectors
        m = np.array([b - a, c - a], dtype=float)
        rhs = 0.5 * np.array([b @ b - a @ a, c @ c - a @ a])
        try:
            ctr = np.linalg.solve(m, rhs)
        except np.linalg.LinAlgError:
            return None
        return ctr, float(np.linalg.norm(a - ctr))

    def trivial(boundary):
        if not boundary:
            return np.zeros(2), 0.0
        if len(boundary) == 1:
            return boundary[0].copy(), 0.0
        if len(boundary) == 2:
            return circle_two(boundary[0], boundary[1])
        for i in range(3):  # one of the pairs may already cover the third
            ctr, r = circle_two(boundary[i], boundary[(i + 1) % 3])
            if np.linalg.norm(boundary[(i + 2) % 3] - ctr) <= r * (1 + 1e-12):
                return ctr, r
        out = circle_three(*boundary)
        if out is None:  # collinear triple: widest pair
            best = max(((a, b) for a in boundary for b in boundary),
                       key=lambda ab: np.linalg.norm(ab[0] - ab[1]))
            return circle_two(*best)
        return out

    def recurse(pts, boundary):
        if not pts or len(boundary) == 3:
            return trivial(boundary)
        p = pts[0]
        ctr, r = recurse(pts[1:], boundary)
        if np.linalg.norm(p - ctr) <= r + 1e-9 * max(1.0, r):
            return ctr, r
        return recurse(pts[1:], boundary + [p])

    order = list(rng.permutation(len(points)))
    return recurse([np.asarray(points[i], dtype=float) for i in order], [])


# --- Box primitive ---------------------------------------------------------

def test_box_rejects_inverted_bounds():
    with pytest.raises(ValidationError):
        Box(5.0, 0.0, 1.0, 4.0)


def test_box_slices_are_clipped_half_open():
    b = Box(1.2, -3.0, 4.8, 2.1)
    rs, cs = b.to_slices(10, 10)
    assert (rs.start, rs.stop) == (0, 3)
    assert (cs.start, cs.stop) == (1, 5)


def test_box_pixel_mask_matches_slices():
    b = Box(2.4, 1.0, 6.6, 5.5)
    m = b.pixel_mask(8, 8)
    ref = np.zeros((8, 8), dtype=np.uint8)
    rs, cs = b.to_slices(8, 8)
    ref[rs, cs] = 1
    assert np.array_equal(m, ref)


# --- segment intersection --------------------------------------------------

def test_segment_intersection_plain_cross():
    p = segment_intersection((0, 0), (2, 2), (0, 2), (2, 0))
    assert p is not None
    assert p == pytest.approx((1.0, 1.0))


def test_segment_intersection_parallel_is_none():
    assert segment_intersection((0, 0), (1, 0), (0, 1), (1, 1)) is None


def test_segment_intersection_meeting_at_endpoint_is_none():
    # shared endpoints are not interior crossings
    assert segment_intersection((0, 0), (1, 1), (1, 1), (2, 0)) is None


def test_ellipse_center_falls_back_to_centroid():
    ann = AspectRatioAnnotation("a", (0, 0), (1, 0), (3, 1), (3, 2),
                                crossing=False)
    cx, cy = ellipse_center(ann)
    assert (cx, cy) == pytest.approx((7 / 4, 3 / 4))


# --- boxes from annotations ------------------------------------------------

def test_tight_box_is_endpoint_bbox():
    ann = AspectRatioAnnotation("a", (2, 7), (9, 3), (4, 1), (5, 8))
    b = tight_box(ann)
    assert (b.x_min, b.y_min, b.x_max, b.y_max) == (2, 1, 9, 8)


def test_arcs_pass_through_all_endpoints():
    rng = np.random.default_rng(0)
    ann = random_annotation(rng)
    pts = ellipse_arc_points(ann, samples_per_arc=64)
    for p in (ann.p1, ann.p2, ann.p3, ann.p4):
        d = np.min(np.linalg.norm(pts - np.asarray(p), axis=1))
        assert d < 1e-9


def test_ellipse_box_matches_analytic_aabb_for_true_ellipse():
    # perpendicular diameters bisecting each other => the four arcs form an
    # exact rotated ellipse whose AABB half-widths are hypot(ra*u, rb*w)
    rng = np.random.default_rng(7)
    for _ in range(50):
        c = rng.uniform(30, 90, size=2)
        t = rng.uniform(0, np.pi)
        ra, rb = rng.uniform(5, 25, size=2)
        u = np.array([np.cos(t), np.sin(t)])
        w = np.array([-np.sin(t), np.cos(t)])
        ann = AspectRatioAnnotation(
            "e", tuple(c + ra * u), tuple(c - ra * u),
            tuple(c + rb * w), tuple(c - rb * w))
        b = ellipse_box(ann, samples_per_arc=512)
        hx = np.hypot(ra * u[0], rb * w[0])
        hy = np.hypot(ra * u[1], rb * w[1])
        assert b.x_min == pytest.approx(c[0] - hx, abs=1e-2)
        assert b.x_max == pytest.approx(c[0] + hx, abs=1e-2)
        assert b.y_min == pytest.approx(c[1] - hy, abs=1e-2)
        assert b.y_max == pytest.approx(c[1] + hy, abs=1e-2)


def test_boxes_contain_endpoints_and_nest_b1():
    rng = np.random.default_rng(11)
    for _ in range(300):
        ann = random_annotation(rng)
        boxes = generate_prompts(ann)
        for p in (ann.p1, ann.p2, ann.p3, ann.p4):
            for b in boxes.values():
                assert b.contains_point(*p)
        b1, b2, b3 = boxes["b1"], boxes["b2"], boxes["b3"]
        assert b2.x_min <= b1.x_min and b2.x_max >= b1.x_max
        assert b2.y_min <= b1.y_min and b2.y_max >= b1.y_max
        assert b3.x_min <= b1.x_min and b3.x_max >= b1.x_max
        assert b3.y_min <= b1.y_min and b3.y_max >= b1.y_max


# --- minimum enclosing circle ----------------------------------------------

def test_mec_two_points():
    c = min_enclosing_circle([(0.0, 0.0), (4.0, 0.0)])
    assert (c.cx, c.cy, c.r) == pytest.approx((2.0, 0.0, 2.0))


def test_mec_equilateral_triangle_uses_circumcircle():
    pts = [(0.0, 0.0), (1.0, 0.0), (0.5, np.sqrt(3) / 2)]
    c = min_enclosing_circle(pts)
    assert c.r == pytest.approx(1 / np.sqrt(3), abs=1e-12)


def test_mec_obtuse_triangle_uses_diameter():
    pts = [(0.0, 0.0), (10.0, 0.0), (5.0, 0.5)]
    c = min_enclosing_circle(pts)
    assert c.r == pytest.approx(5.0, abs=1e-12)
    assert (c.cx, c.cy) == pytest.approx((5.0, 0.0), abs=1e-12)


def test_mec_collinear_and_duplicate_points():
    c = min_enclosing_circle([(0, 0), (1, 1), (2, 2), (1, 1)])
    assert c.r == pytest.approx(np.sqrt(2), abs=1e-12)
    c = min_enclosing_circle([(3, 4), (3, 4)])
    assert c.r == 0.0


def test_mec_matches_welzl_reference():
    rng = np.random.default_rng(42)
    for _ in range(500):
        pts = rng.uniform(-50, 50, size=(4, 2))
        mine = min_enclosing_circle([tuple(p) for p in pts])
        _, r_ref = welzl_mec(pts, rng)
        assert mine.r == pytest.approx(r_ref, abs=1e-6)
        d = np.linalg.norm(pts - [mine.cx, mine.cy], axis=1)
        assert d.max() <= mine.r + 1e-9 * max(1.0, mine.r)


def test_circle_box_is_square_around_circle():
    ann = AspectRatioAnnotation("a", (0, 0), (4, 0), (2, 1), (2, -1))
    b = circle_box(ann)
    assert (b.x_min, b.y_min, b.x_max, b.y_max) == pytest.approx((0, -2, 4, 2))


# --- prompts file round-trip ------------------------------------------------

def test_prompts_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    prompts = {f"im{i}": generate_prompts(random_annotation(rng, image_id=f"im{i}"))
               for i in range(4)}
    path = tmp_path / "prompts.csv"
    write_prompts(path, prompts)
    back = read_prompts(path)
    assert sorted(back) == sorted(prompts)
    for iid, boxes in prompts.items():
        for name, b in boxes.items():
            r = back[iid][name]
            assert (r.x_min, r.y_min, r.x_max, r.y_max) == \
                   (b.x_min, b.y_min, b.x_max, b.y_max)


def test_read_prompts_rejects_incomplete_triplet(tmp_path):
    path = tmp_path / "prompts.csv"
    rng = np.random.default_rng(6)
    boxes = generate_prompts(random_annotation(rng))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("image_id,box,x_min,y_min,x_max,y_max\n")
        b = boxes["b1"]
        fh.write(f"im0,b1,{b.x_min},{b.y_min},{b.x_max},{b.y_max}\n")
    with pytest.raises(ParseError, match="missing boxes"):
        read_prompts(path)
