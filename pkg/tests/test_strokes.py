"""Stroke-5 codec, rasterization, span-fill masks and aspect ratios."""

import numpy as np
import pytest

from sketchchat.errors import (
    DegenerateCorpusError,
    DegenerateGeometryError,
    EmptySketchError,
)
from sketchchat.strokes import (
    Bitmap,
    SketchDrawing,
    aspect_ratio,
    build_mask,
    flip_horizontal,
    from_raw,
    mask_from_clipart,
    normalize_offsets,
    render,
    to_absolute,
)


def brute_force_mask(bits: np.ndarray) -> np.ndarray:
    """Direct per-pixel evaluation of the span predicate: pixel (x, y) is set
    when some ink pixels bracket it on its row or on its column."""
    h, w = bits.shape
    out = np.zeros_like(bits)
    for y in range(h):
        for x in range(w):
            row_hit = any(bits[y, x1] for x1 in range(0, x + 1)) and any(
                bits[y, x2] for x2 in range(x, w)
            )
            col_hit = any(bits[y1, x] for y1 in range(0, y + 1)) and any(
                bits[y2, x] for y2 in range(y, h)
            )
            out[y, x] = 1 if (row_hit or col_hit) else 0
    return out


def random_polylines(rng: np.random.Generator, anchored: bool = True) -> list[np.ndarray]:
    n_lines = int(rng.integers(1, 4))
    lines = []
    for _ in range(n_lines):
        n_pts = int(rng.integers(2, 6))
        pts = rng.integers(-20, 21, size=(n_pts, 2)).astype(np.float64)
        # zero-length segments are outside the codec's domain: drop consecutive dupes
        keep = [0] + [i for i in range(1, n_pts) if not np.array_equal(pts[i], pts[i - 1])]
        lines.append(pts[keep])
    if anchored:
        lines = [p - lines[0][0] for p in lines]
    return lines


def random_drawing(rng: np.random.Generator) -> SketchDrawing:
    return from_raw(random_polylines(rng))


class TestFromRaw:
    def test_single_segment(self):
        d = from_raw([np.array([[0.0, 0.0], [3.0, 4.0]])])
        expected = np.array(
            [
                [0, 0, 1, 0, 0],
                [3, 4, 1, 0, 0],
                [0, 0, 0, 0, 1],
            ],
            dtype=np.float32,
        )
        np.testing.assert_array_equal(d.strokes, expected)
        d.validate()

    def test_round_trip_1000(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            lines = random_polylines(rng)
            back = to_absolute(from_raw(lines))
            assert len(back) == len(lines)
            for a, b in zip(lines, back):
                np.testing.assert_allclose(b, a, atol=1e-6)

    def test_two_polylines_single_pen_up(self):
        lines = [np.array([[0.0, 0.0], [3.0, 4.0]]), np.array([[10.0, 10.0], [11.0, 12.0]])]
        d = from_raw(lines)
        pen_up = np.flatnonzero(d.strokes[:, 3] == 1.0)
        assert len(pen_up) == 1
        # the pen_up stroke is the one arriving at the first polyline's last point
        assert pen_up[0] == 1
        d.validate()

    def test_empty_input(self):
        with pytest.raises(EmptySketchError):
            from_raw([])
        with pytest.raises(EmptySketchError):
            from_raw([np.zeros((0, 2))])

    def test_invariants_hold(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            random_drawing(rng).validate()

    def test_single_point_polyline(self):
        lines = [np.array([[0.0, 0.0]]), np.array([[5.0, 5.0], [6.0, 6.0]])]
        back = to_absolute(from_raw(lines))
        assert len(back) == 2
        np.testing.assert_allclose(back[0], lines[0])
        np.testing.assert_allclose(back[1], lines[1])


class TestNormalize:
    def test_unit_sigma(self):
        # offsets are exactly {-1, +1}: population std 1, output unchanged
        d = SketchDrawing(
            strokes=np.array(
                [
                    [0, 0, 1, 0, 0],
                    [1, -1, 1, 0, 0],
                    [-1, 1, 1, 0, 0],
                    [0, 0, 0, 0, 1],
                ],
                dtype=np.float32,
            )
        )
        out, sigma = normalize_offsets([d])
        assert sigma == pytest.approx(1.0)
        np.testing.assert_array_equal(out[0].strokes, d.strokes)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(9)
        drawings = [random_drawing(rng) for _ in range(10)]
        out1, sigma1 = normalize_offsets(drawings)
        scaled = [
            SketchDrawing(strokes=np.concatenate([d.strokes[:, :2] * 10.0, d.strokes[:, 2:]], axis=1))
            for d in drawings
        ]
        out2, sigma2 = normalize_offsets(scaled)
        assert sigma2 == pytest.approx(10.0 * sigma1, rel=1e-6)
        for a, b in zip(out1, out2):
            np.testing.assert_allclose(a.strokes, b.strokes, atol=1e-5)

    def test_zero_variance(self):
        d = from_raw([np.array([[0.0, 0.0], [0.0, 0.0]])])
        with pytest.raises(DegenerateCorpusError):
            normalize_offsets([d])


class TestRender:
    def test_horizontal_segment_single_row(self):
        d = from_raw([np.array([[0.0, 0.0], [10.0, 0.0]])])
        bmp = render(d, 8, 8)
        rows_with_ink = np.flatnonzero(bmp.bits.any(axis=1))
        assert len(rows_with_ink) == 1

    def test_empty_movement_single_pixel(self):
        d = from_raw([np.array([[0.0, 0.0]])])
        bmp = render(d, 8, 8)
        assert bmp.bits.sum() == 1

    def test_diagonal_pixel_count(self):
        # an 8-connected diagonal of k steps sets at least k+1 pixels
        d = from_raw([np.array([[0.0, 0.0], [30.0, 30.0]])])
        bmp = render(d, 64, 64)
        assert bmp.bits.sum() >= 60

    def test_margin_respected(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            bmp = render(random_drawing(rng), 32, 32)
            assert not bmp.bits[0].any() and not bmp.bits[-1].any()
            assert not bmp.bits[:, 0].any() and not bmp.bits[:, -1].any()


class TestBuildMask:
    def test_hollow_rectangle_fills(self):
        bits = np.zeros((10, 10), dtype=np.uint8)
        bits[2, 2:8] = 1
        bits[7, 2:8] = 1
        bits[2:8, 2] = 1
        bits[2:8, 7] = 1
        mask = build_mask(Bitmap(bits=bits))
        expected = np.zeros_like(bits)
        expected[2:8, 2:8] = 1
        np.testing.assert_array_equal(mask.bitmap.bits, expected)

    def test_single_pixel(self):
        bits = np.zeros((5, 5), dtype=np.uint8)
        bits[2, 3] = 1
        mask = build_mask(Bitmap(bits=bits))
        np.testing.assert_array_equal(mask.bitmap.bits, bits)

    def test_matches_brute_force_on_random_drawings(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            bmp = render(random_drawing(rng), 24, 24)
            mask = build_mask(bmp)
            np.testing.assert_array_equal(mask.bitmap.bits, brute_force_mask(bmp.bits))

    def test_concave_shape_loses_concavity(self):
        # an S-like shape: the span fill bridges across the concave gaps
        bits = np.zeros((9, 9), dtype=np.uint8)
        bits[1, 1:8] = 1
        bits[4, 1:8] = 1
        bits[7, 1:8] = 1
        bits[1:5, 1] = 1
        bits[4:8, 7] = 1
        mask = build_mask(Bitmap(bits=bits)).bitmap.bits
        # pixels inside the concave notches become set
        assert mask[2, 6] == 1 and mask[6, 2] == 1

    def test_superset_of_ink(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            bmp = render(random_drawing(rng), 24, 24)
            mask = build_mask(bmp).bitmap.bits
            assert np.all(mask >= bmp.bits)

    def test_monotone_under_reapplication(self):
        # span fill is not idempotent (filled rows can seed new column spans),
        # but reapplying it can only grow the set
        rng = np.random.default_rng(29)
        for _ in range(20):
            bmp = render(random_drawing(rng), 24, 24)
            once = build_mask(bmp)
            twice = build_mask(once.bitmap)
            assert np.all(twice.bitmap.bits >= once.bitmap.bits)

    def test_mirror_symmetry(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            bmp = render(random_drawing(rng), 24, 24)
            flipped_mask = build_mask(flip_horizontal(bmp)).bitmap.bits
            mask_flipped = flip_horizontal(build_mask(bmp).bitmap).bits
            np.testing.assert_array_equal(flipped_mask, mask_flipped)

    def test_blank_bitmap_blank_mask(self):
        mask = build_mask(Bitmap(bits=np.zeros((6, 6), dtype=np.uint8)))
        assert mask.bitmap.bits.sum() == 0

    def test_clipart_same_algorithm(self):
        bits = np.zeros((10, 10), dtype=np.uint8)
        bits[2, 2:8] = 1
        bits[7, 2:8] = 1
        bits[2:8, 2] = 1
        bits[2:8, 7] = 1
        a = build_mask(Bitmap(bits=bits)).bitmap.bits
        b = mask_from_clipart(Bitmap(bits=bits)).bitmap.bits
        np.testing.assert_array_equal(a, b)


class TestAspectRatio:
    def test_unit_square(self):
        d = from_raw(
            [np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]])]
        )
        assert aspect_ratio(d).r == pytest.approx(1.0)

    def test_wide_box(self):
        d = from_raw([np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]])])
        assert aspect_ratio(d).r == pytest.approx(0.5)

    def test_scale_invariance(self):
        rng = np.random.default_rng(37)
        for _ in range(20):
            lines = random_polylines(rng)
            try:
                r1 = aspect_ratio(from_raw(lines)).r
            except DegenerateGeometryError:
                continue
            r2 = aspect_ratio(from_raw([p * 3.5 for p in lines])).r
            assert r2 == pytest.approx(r1, rel=1e-6)

    def test_flip_invariance(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            lines = random_polylines(rng)
            try:
                r1 = aspect_ratio(from_raw(lines)).r
            except DegenerateGeometryError:
                continue
            mirrored = [np.column_stack([-p[:, 0], p[:, 1]]) for p in lines]
            r2 = aspect_ratio(from_raw(mirrored)).r
            assert r2 == pytest.approx(r1, rel=1e-6)

    def test_zero_width(self):
        d = from_raw([np.array([[0.0, 0.0], [0.0, 5.0]])])
        with pytest.raises(DegenerateGeometryError):
            aspect_ratio(d)
