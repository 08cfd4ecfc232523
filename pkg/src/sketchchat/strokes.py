"""Stroke-5 sketch codec, rasterization, outline masks and aspect ratios.

A drawing is a sequence of 5-tuples [dx, dy, pen_down, pen_up, pen_end]:
an offset move followed by the pen state *after* the reached point.  Every
drawing opens with the fixed initial stroke [0, 0, 1, 0, 0], whose point is
the drawing's anchor at the origin, and closes with a single pen_end.

Masks fill, for every row, the span between the leftmost and rightmost ink
pixel, and for every column the span between its extreme ink pixels; a pixel
is set when either span covers it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCorpusError, DegenerateGeometryError, EmptySketchError

INITIAL_STROKE = np.array([0.0, 0.0, 1.0, 0.0, 0.0], dtype=np.float32)

PEN_DOWN, PEN_UP, PEN_END = 2, 3, 4  # column indices


@dataclass(frozen=True)
class SketchDrawing:
    """A Stroke-5 sequence for one drawn object."""

    strokes: np.ndarray  # (h, 5) float32
    category: str = ""

    def __post_init__(self):
        strokes = np.asarray(self.strokes, dtype=np.float32)
        if strokes.ndim != 2 or strokes.shape[1] != 5:
            raise ValueError(f"strokes must have shape (h, 5), got {strokes.shape}")
        object.__setattr__(self, "strokes", strokes)

    def __len__(self) -> int:
        return len(self.strokes)

    def validate(self) -> None:
        """Raise if the Stroke-5 invariants are violated."""
        s = self.strokes
        if len(s) == 0:
            raise EmptySketchError("drawing has no strokes")
        pen = s[:, 2:5]
        if not np.all(np.isin(pen, (0.0, 1.0))):
            raise ValueError("pen bits must be 0 or 1")
        if not np.all(pen.sum(axis=1) == 1.0):
            raise ValueError("exactly one pen bit must be set per stroke")
        if not np.array_equal(s[0], INITIAL_STROKE):
            raise ValueError("drawings must begin with the initial stroke [0,0,1,0,0]")
        end_positions = np.flatnonzero(s[:, PEN_END] == 1.0)
        if len(end_positions) > 1:
            raise ValueError("at most one pen_end stroke is allowed")
        if len(end_positions) == 1 and end_positions[0] != len(s) - 1:
            raise ValueError("pen_end may only appear at the final position")


@dataclass(frozen=True)
class Bitmap:
    """A binary pixel grid; bits[y, x] with y increasing downward."""

    bits: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"bitmap must be a 2-d grid, got shape {bits.shape}")
        object.__setattr__(self, "bits", (bits != 0).astype(np.uint8))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class Mask:
    """Row/column span fill of an ink bitmap."""

    bitmap: Bitmap


@dataclass(frozen=True)
class AspectRatio:
    """Height over width of a drawing's bounding extent."""

    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise DegenerateGeometryError(f"aspect ratio must be positive, got {self.r}")


def from_raw(polylines: list[np.ndarray], category: str = "") -> SketchDrawing:
    """Convert absolute-coordinate polylines into a Stroke-5 drawing.

    Coordinates are shifted so the first point sits at the origin (the
    initial stroke's anchor).  Each polyline's last point carries pen_up,
    except the final polyline, which is closed by a trailing pen_end stroke.
    """
    lines = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in polylines]
    if not lines or any(len(p) == 0 for p in lines):
        raise EmptySketchError("from_raw needs at least one polyline with at least one point")
    origin = lines[0][0].copy()
    rows = [INITIAL_STROKE.copy()]
    pen = np.zeros(2)
    for li, line in enumerate(lines):
        points = line - origin
        last_line = li == len(lines) - 1
        start = 1 if li == 0 else 0  # first polyline's first point is the anchor
        emitted = False
        for pi in range(start, len(points)):
            delta = points[pi] - pen
            pen = points[pi].copy()
            lifting = pi == len(points) - 1 and not last_line
            state = (0.0, 1.0, 0.0) if lifting else (1.0, 0.0, 0.0)
            rows.append(np.array([delta[0], delta[1], *state], dtype=np.float32))
            emitted = True
        if not emitted and not last_line:
            # single-point first polyline: separator pen_up with no movement
            rows.append(np.array([0.0, 0.0, 0.0, 1.0, 0.0], dtype=np.float32))
    rows.append(np.array([0.0, 0.0, 0.0, 0.0, 1.0], dtype=np.float32))
    return SketchDrawing(strokes=np.stack(rows), category=category)


def to_absolute(drawing: SketchDrawing) -> list[np.ndarray]:
    """Recover anchored absolute polylines from a Stroke-5 drawing."""
    s = drawing.strokes
    if len(s) == 0:
        raise EmptySketchError("empty drawing")
    polylines: list[list[np.ndarray]] = []
    current: list[np.ndarray] = [np.zeros(2)]  # the initial stroke's anchor point
    pos = np.zeros(2)
    for row in s[1:]:
        zero_move = row[0] == 0.0 and row[1] == 0.0
        if row[PEN_END] == 1.0:
            if not zero_move:
                pos = pos + row[:2]
                current.append(pos.copy())
            break
        pos = pos + row[:2]
        if not (zero_move and current):  # zero-offset separators add no point
            current.append(pos.copy())
        if row[PEN_UP] == 1.0:
            polylines.append(current)
            current = []
    if current:
        polylines.append(current)
    return [np.stack(p) for p in polylines if p]


def absolute_points(drawing: SketchDrawing) -> np.ndarray:
    """All pen positions visited by the drawing, in order, shape (n, 2)."""
    pts = [p for line in to_absolute(drawing) for p in line]
    return np.stack(pts)


def normalize_offsets(
    drawings: list[SketchDrawing],
) -> tuple[list[SketchDrawing], float]:
    """Scale all offsets of a category corpus by their pooled standard deviation.

    The pooled statistic covers real pen movements only (the initial stroke
    and the trailing pen_end row are codec framing, not movements).
    """
    if not drawings:
        raise DegenerateCorpusError("empty corpus")
    pooled = []
    for d in drawings:
        s = d.strokes
        movement = s[1:][s[1:, PEN_END] == 0.0]
        pooled.append(movement[:, :2].reshape(-1))
    values = np.concatenate(pooled) if pooled else np.array([])
    sigma = float(np.std(values)) if values.size else 0.0
    if sigma == 0.0:
        raise DegenerateCorpusError("offset standard deviation is zero")
    scaled = []
    for d in drawings:
        s = d.strokes.copy()
        s[:, :2] /= sigma
        scaled.append(SketchDrawing(strokes=s, category=d.category))
    return scaled, sigma


def denormalize(drawing: SketchDrawing, sigma: float) -> SketchDrawing:
    s = drawing.strokes.copy()
    s[:, :2] *= sigma
    return SketchDrawing(strokes=s, category=drawing.category)


def _bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """8-connected line pixels from (x0, y0) to (x1, y1) inclusive."""
    pixels = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        pixels.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy
    return pixels


def render(drawing: SketchDrawing, width: int = 64, height: int = 64) -> Bitmap:
    """Rasterize pen-down segments onto a grid.

    The drawing is fit to the grid preserving its aspect ratio, centered,
    with a 1-pixel margin; a drawing with no spatial extent sets one pixel.
    """
    polylines = to_absolute(drawing)
    pts = np.concatenate([p for p in polylines], axis=0)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    avail = np.array([width - 1 - 2, height - 1 - 2], dtype=np.float64)
    avail = np.maximum(avail, 1.0)
    scales = [avail[i] / extent[i] for i in range(2) if extent[i] > 0]
    scale = min(scales) if scales else 0.0

    def to_pixel(p: np.ndarray) -> tuple[int, int]:
        if scale == 0.0:
            return width // 2, height // 2
        q = (p - lo) * scale
        pad = (avail - extent * scale) / 2.0
        return (int(round(q[0] + pad[0] + 1)), int(round(q[1] + pad[1] + 1)))

    bits = np.zeros((height, width), dtype=np.uint8)
    for line in polylines:
        pix = [to_pixel(p) for p in line]
        if len(pix) == 1:
            x, y = pix[0]
            bits[y, x] = 1
            continue
        for a, b in zip(pix[:-1], pix[1:]):
            for x, y in _bresenham(a[0], a[1], b[0], b[1]):
                bits[y, x] = 1
    if not bits.any():
        bits[height // 2, width // 2] = 1
    return Bitmap(bits=bits)


def build_mask(bitmap: Bitmap) -> Mask:
    """Fill row and column ink spans: a pixel is set when it lies between the
    extreme ink pixels of its row or of its column."""
    ink = bitmap.bits.astype(bool)
    h, w = ink.shape
    out = np.zeros_like(ink)
    for y in range(h):
        row = np.flatnonzero(ink[y])
        if row.size:
            out[y, row[0] : row[-1] + 1] = True
    for x in range(w):
        col = np.flatnonzero(ink[:, x])
        if col.size:
            out[col[0] : col[-1] + 1, x] = True
    return Mask(bitmap=Bitmap(bits=out.astype(np.uint8)))


def mask_from_clipart(silhouette: Bitmap) -> Mask:
    """Masks for clip-art silhouettes use the same span-fill algorithm."""
    return build_mask(silhouette)


def aspect_ratio(drawing: SketchDrawing) -> AspectRatio:
    """Height over width of the drawing's absolute bounding extent."""
    pts = absolute_points(drawing)
    extent = pts.max(axis=0) - pts.min(axis=0)
    if extent[0] <= 0:
        raise DegenerateGeometryError("drawing spans zero width")
    return AspectRatio(r=float(extent[1] / extent[0]))


def bitmap_aspect_ratio(bitmap: Bitmap) -> AspectRatio:
    """Height over width of a bitmap's ink bounding box."""
    ys, xs = np.nonzero(bitmap.bits)
    if xs.size == 0 or xs.max() == xs.min():
        raise DegenerateGeometryError("bitmap ink spans zero width")
    return AspectRatio(r=float((ys.max() - ys.min()) / (xs.max() - xs.min())))


def flip_horizontal(bitmap: Bitmap) -> Bitmap:
    return Bitmap(bits=bitmap.bits[:, ::-1].copy())


def mask_iou(a: Mask, b: Mask) -> float:
    """Intersection over union of two masks (grids must match)."""
    pa = a.bitmap.bits.astype(bool)
    pb = b.bitmap.bits.astype(bool)
    union = np.logical_or(pa, pb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pa, pb).sum() / union)


def to_pbm(bitmap: Bitmap) -> bytes:
    """Portable bitmap (P1) bytes, for debugging dumps."""
    lines = [f"P1 {bitmap.width} {bitmap.height}"]
    for row in bitmap.bits:
        lines.append(" ".join(str(int(v)) for v in row))
    return ("\n".join(lines) + "\n").encode()
