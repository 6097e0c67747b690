"""Rectilinear (Manhattan) design layouts on an integer nanometer grid.

This module owns the geometric substrate of the correction pipeline: the
LAYOUTv1 text format, polygon validation, deterministic edge fragmentation,
and reconstruction of moved geometry from per-fragment offsets.

Coordinates are integers in grid units (``grid_nm`` nanometers each).
Reconstructed geometry lands on a quarter-unit sub-grid: offsets are snapped
to 0.25 grid units and output coordinates are scaled by 4 with
``grid_nm / 4``, which keeps every downstream byte comparison exact.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace

import numpy as np

Point = tuple[int, int]

LAYOUT_MAGIC = "LAYOUTv1"

# Sub-grid factor for reconstructed geometry; offsets quantize to 1/SUBGRID.
SUBGRID = 4


class LayoutError(ValueError):
    """Malformed layout text or geometry violating layout invariants."""


class SelfIntersectionError(LayoutError):
    """A polygon boundary crosses or touches itself."""

    def __init__(self, polygon_id: int, detail: str = ""):
        self.polygon_id = polygon_id
        msg = f"polygon {polygon_id} is not simple"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def _shoelace2(vertices: tuple[Point, ...]) -> int:
    """Twice the signed area; positive for counter-clockwise winding."""
    total = 0
    n = len(vertices)
    for i in range(n):
        ax, ay = vertices[i]
        bx, by = vertices[(i + 1) % n]
        total += ax * by - bx * ay
    return total


def _check_simple(vertices: tuple[Point, ...]) -> None:
    """Reject duplicate vertices, overlapping collinear edges and crossings.

    For a rectilinear closed chain with alternating edge directions this is a
    complete simplicity test: two horizontal (or two vertical) edges may not
    share more than a common polygon vertex, and a horizontal and a vertical
    edge may only meet at a shared corner vertex.
    """
    n = len(vertices)
    if len(set(vertices)) != n:
        raise LayoutError("repeated vertex")

    horiz: list[tuple[int, int, int]] = []  # (y, x_lo, x_hi)
    vert: list[tuple[int, int, int]] = []  # (x, y_lo, y_hi)
    for i in range(n):
        ax, ay = vertices[i]
        bx, by = vertices[(i + 1) % n]
        if ay == by:
            horiz.append((ay, min(ax, bx), max(ax, bx)))
        else:
            vert.append((ax, min(ay, by), max(ay, by)))

    # Collinear overlap within each axis group. Touching endpoints would be
    # duplicate vertices, already rejected above, so strict overlap suffices.
    for group in (horiz, vert):
        for (c1, lo1, hi1), (c2, lo2, hi2) in zip(sorted(group), sorted(group)[1:]):
            if c1 == c2 and lo2 < hi1:
                raise LayoutError("overlapping collinear edges")

    if not horiz or not vert:
        return
    h = np.asarray(horiz, dtype=np.int64)
    v = np.asarray(vert, dtype=np.int64)
    hy, hx0, hx1 = h[:, 0][:, None], h[:, 1][:, None], h[:, 2][:, None]
    vx, vy0, vy1 = v[:, 0][None, :], v[:, 1][None, :], v[:, 2][None, :]
    meets = (hx0 <= vx) & (vx <= hx1) & (vy0 <= hy) & (hy <= vy1)
    # Perpendicular edges may touch only corner-to-corner (a shared vertex of
    # both segments); interior contact is a crossing or T junction.
    corner = ((vx == hx0) | (vx == hx1)) & ((hy == vy0) | (hy == vy1))
    if bool(np.any(meets & ~corner)):
        raise LayoutError("edges cross")


@dataclass(frozen=True)
class Polygon:
    """Simple rectilinear polygon, counter-clockwise, closed implicitly."""

    vertices: tuple[Point, ...]

    def __post_init__(self):
        vs = self.vertices
        n = len(vs)
        if n < 4:
            raise LayoutError("polygon needs at least 4 vertices")
        prev_horizontal: bool | None = None
        for i in range(n):
            ax, ay = vs[i]
            bx, by = vs[(i + 1) % n]
            if ax == bx and ay == by:
                raise LayoutError("zero-length edge")
            if ax != bx and ay != by:
                raise LayoutError(f"edge not axis-parallel: ({ax},{ay})-({bx},{by})")
            horizontal = ay == by
            if prev_horizontal is not None and horizontal == prev_horizontal:
                raise LayoutError("consecutive edges do not alternate direction")
            prev_horizontal = horizontal
        first_horizontal = vs[0][1] == vs[1][1]
        if first_horizontal == prev_horizontal:
            raise LayoutError("consecutive edges do not alternate direction")
        area2 = _shoelace2(vs)
        if area2 == 0:
            raise LayoutError("degenerate polygon (zero area)")
        if area2 < 0:
            raise LayoutError("clockwise winding (expected counter-clockwise)")
        _check_simple(vs)

    def edges(self) -> list[tuple[Point, Point]]:
        vs = self.vertices
        return [(vs[i], vs[(i + 1) % len(vs)]) for i in range(len(vs))]

    def bounds(self) -> tuple[int, int, int, int]:
        xs = [x for x, _ in self.vertices]
        ys = [y for _, y in self.vertices]
        return min(xs), min(ys), max(xs), max(ys)

    def area2(self) -> int:
        return _shoelace2(self.vertices)


@dataclass(frozen=True)
class Layout:
    """An ordered set of polygons inside an integer bounding box."""

    grid_nm: int
    bbox: tuple[int, int, int, int]
    polygons: tuple[Polygon, ...]

    def __post_init__(self):
        if self.grid_nm <= 0:
            raise LayoutError("grid_nm must be positive")
        x0, y0, x1, y1 = self.bbox
        if x0 >= x1 or y0 >= y1:
            raise LayoutError("bbox must satisfy x0<x1 and y0<y1")
        for i, poly in enumerate(self.polygons):
            px0, py0, px1, py1 = poly.bounds()
            if px0 < x0 or py0 < y0 or px1 > x1 or py1 > y1:
                raise LayoutError(f"polygon {i} extends outside bbox")


@dataclass(frozen=True)
class Fragment:
    """A movable sub-segment of a polygon edge.

    ``a`` and ``b`` are in winding order; ``normal`` is the outward unit axis
    direction; ``offset`` is the accumulated signed movement along it, in
    grid units. Provenance (polygon, edge, index along the edge) survives
    tiling so distributed results can be merged without geometric matching.
    """

    polygon_id: int
    edge_id: int
    index: int
    a: Point
    b: Point
    normal: Point
    offset: float = 0.0

    def midpoint(self) -> tuple[float, float]:
        return (self.a[0] + self.b[0]) / 2.0, (self.a[1] + self.b[1]) / 2.0

    def length(self) -> int:
        return abs(self.b[0] - self.a[0]) + abs(self.b[1] - self.a[1])


@dataclass(frozen=True)
class FragmentSet:
    """All fragments of a layout, in (polygon, edge, along-edge) order."""

    layout: Layout
    fragments: tuple[Fragment, ...]
    max_frag_len: int

    def with_offsets(self, offsets) -> "FragmentSet":
        if len(offsets) != len(self.fragments):
            raise LayoutError("offset count does not match fragment count")
        frags = tuple(
            replace(f, offset=float(o)) for f, o in zip(self.fragments, offsets)
        )
        return FragmentSet(self.layout, frags, self.max_frag_len)

    def offsets(self) -> tuple[float, ...]:
        return tuple(f.offset for f in self.fragments)

    def midpoints(self) -> np.ndarray:
        return np.asarray([f.midpoint() for f in self.fragments], dtype=np.float64)

    def normals(self) -> np.ndarray:
        return np.asarray([f.normal for f in self.fragments], dtype=np.float64)


def parse_layout(text: str) -> Layout:
    """Parse LAYOUTv1 text. Reports the offending line number on errors.

    Clockwise polygons are normalized to counter-clockwise; everything else
    that violates a geometry invariant is an error.
    """
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def fail(lineno: int, why: str):
        raise LayoutError(f"line {lineno}: {why}")

    def ints(tokens: list[str], lineno: int) -> list[int]:
        out = []
        for t in tokens:
            try:
                out.append(int(t))
            except ValueError:
                fail(lineno, f"expected integer, got {t!r}")
        return out

    if not lines or lines[0].split() != [LAYOUT_MAGIC]:
        fail(1, f"expected header {LAYOUT_MAGIC!r}")
    if len(lines) < 3:
        fail(len(lines), "truncated file")

    t = lines[1].split()
    if len(t) != 2 or t[0] != "grid_nm":
        fail(2, "expected 'grid_nm <int>'")
    (grid_nm,) = ints(t[1:], 2)
    if grid_nm <= 0:
        fail(2, "grid_nm must be positive")

    t = lines[2].split()
    if len(t) != 5 or t[0] != "bbox":
        fail(3, "expected 'bbox <x0> <y0> <x1> <y1>'")
    x0, y0, x1, y1 = ints(t[1:], 3)
    if x0 >= x1 or y0 >= y1:
        fail(3, "bbox must satisfy x0<x1 and y0<y1")

    polygons: list[Polygon] = []
    for idx in range(3, len(lines)):
        lineno = idx + 1
        t = lines[idx].split()
        if not t:
            fail(lineno, "blank line")
        if t[0] != "poly":
            fail(lineno, f"expected 'poly', got {t[0]!r}")
        vals = ints(t[1:], lineno)
        if not vals:
            fail(lineno, "missing vertex count")
        n, coords = vals[0], vals[1:]
        if n < 4:
            fail(lineno, "polygon needs at least 4 vertices")
        if len(coords) != 2 * n:
            fail(lineno, f"expected {2 * n} coordinates, got {len(coords)}")
        vertices = tuple(zip(coords[0::2], coords[1::2]))
        if _shoelace2(vertices) < 0:
            vertices = tuple(reversed(vertices))
        try:
            poly = Polygon(vertices)
        except LayoutError as e:
            fail(lineno, str(e))
        px0, py0, px1, py1 = poly.bounds()
        if px0 < x0 or py0 < y0 or px1 > x1 or py1 > y1:
            fail(lineno, "vertex outside bbox")
        polygons.append(poly)

    return Layout(grid_nm, (x0, y0, x1, y1), tuple(polygons))


def write_layout(layout: Layout) -> str:
    """Serialize to canonical LAYOUTv1 text.

    Canonical form: single spaces, trailing newline, polygons in stored
    order, each vertex list rotated to start at the lexicographically
    smallest vertex.
    """
    x0, y0, x1, y1 = layout.bbox
    parts = [LAYOUT_MAGIC, f"grid_nm {layout.grid_nm}", f"bbox {x0} {y0} {x1} {y1}"]
    for poly in layout.polygons:
        vs = poly.vertices
        start = vs.index(min(vs))
        rotated = vs[start:] + vs[:start]
        coords = " ".join(f"{x} {y}" for x, y in rotated)
        parts.append(f"poly {len(vs)} {coords}")
    return "\n".join(parts) + "\n"


def fragment(layout: Layout, max_frag_len: int) -> FragmentSet:
    """Split every edge into fragments of near-equal integer length.

    An edge of length L becomes ceil(L / max_frag_len) fragments whose
    lengths differ by at most one grid unit; the remainder goes to the
    leading fragments. Outward normals follow from the CCW winding.
    """
    if max_frag_len < 2:
        raise LayoutError("max_frag_len must be at least 2 grid units")
    frags: list[Fragment] = []
    for pid, poly in enumerate(layout.polygons):
        for eid, (a, b) in enumerate(poly.edges()):
            length = abs(b[0] - a[0]) + abs(b[1] - a[1])
            d = ((b[0] - a[0]) // length, (b[1] - a[1]) // length)
            normal = (d[1], -d[0])
            n_frag = -(-length // max_frag_len)
            base, rem = divmod(length, n_frag)
            cx, cy = a
            for k in range(n_frag):
                step = base + (1 if k < rem else 0)
                nx, ny = cx + d[0] * step, cy + d[1] * step
                frags.append(Fragment(pid, eid, k, (cx, cy), (nx, ny), normal))
                cx, cy = nx, ny
    return FragmentSet(layout, tuple(frags), max_frag_len)


def _clean_ring(points: list[Point]) -> list[Point]:
    """Drop repeated and collinear-interior vertices from a closed ring."""
    changed = True
    while changed and len(points) > 2:
        changed = False
        out: list[Point] = []
        n = len(points)
        for i in range(n):
            prev = points[(i - 1) % n]
            cur = points[i]
            nxt = points[(i + 1) % n]
            if cur == prev:
                changed = True
                continue
            if (prev[0] == cur[0] == nxt[0]) or (prev[1] == cur[1] == nxt[1]):
                changed = True
                continue
            out.append(cur)
        points = out
    return points


def apply_offsets(fs: FragmentSet) -> Layout:
    """Rebuild moved geometry from fragment offsets.

    Offsets are quantized to 0.25 grid units (half rounds away from zero)
    and the result is emitted on a 4x integer sub-grid with grid_nm / 4.
    Same-edge neighbors with unequal offsets are joined by a perpendicular
    jog at their shared original coordinate; perpendicular neighbors meet at
    the intersection of their two offset lines.
    """
    layout = fs.layout
    if layout.grid_nm % SUBGRID != 0:
        raise LayoutError(
            f"grid_nm {layout.grid_nm} not divisible by {SUBGRID}; "
            "sub-grid output needs an integer grid_nm"
        )

    by_poly: dict[int, list[Fragment]] = {}
    for f in fs.fragments:
        by_poly.setdefault(f.polygon_id, []).append(f)

    max_q = 0
    polygons: list[Polygon] = []
    for pid in range(len(layout.polygons)):
        frags = by_poly.get(pid, [])
        if not frags:
            raise LayoutError(f"polygon {pid} has no fragments")
        lines: list[int] = []  # moved line coordinate (x4) per fragment
        horizontal: list[bool] = []
        for f in frags:
            q4 = math.floor(abs(f.offset) * SUBGRID + 0.5)
            q4 = q4 if f.offset >= 0 else -q4
            max_q = max(max_q, abs(q4))
            if f.a[1] == f.b[1]:
                horizontal.append(True)
                lines.append(f.a[1] * SUBGRID + q4 * f.normal[1])
            else:
                horizontal.append(False)
                lines.append(f.a[0] * SUBGRID + q4 * f.normal[0])

        points: list[Point] = []
        m = len(frags)
        for i in range(m):
            j = (i + 1) % m
            if frags[i].edge_id == frags[j].edge_id:
                # Same edge: jog at the shared original coordinate.
                if lines[i] != lines[j]:
                    s = frags[i].b
                    shared = s[0] * SUBGRID if horizontal[i] else s[1] * SUBGRID
                    if horizontal[i]:
                        points.append((shared, lines[i]))
                        points.append((shared, lines[j]))
                    else:
                        points.append((lines[i], shared))
                        points.append((lines[j], shared))
            elif horizontal[i]:
                points.append((lines[j], lines[i]))
            else:
                points.append((lines[i], lines[j]))

        points = _clean_ring(points)
        if len(points) < 4:
            raise SelfIntersectionError(pid, "degenerate after movement")
        if _shoelace2(tuple(points)) <= 0:
            raise SelfIntersectionError(pid, "boundary inverted after movement")
        try:
            polygons.append(Polygon(tuple(points)))
        except LayoutError as e:
            raise SelfIntersectionError(pid, str(e)) from e

    x0, y0, x1, y1 = layout.bbox
    pad = max_q
    bbox4 = (
        x0 * SUBGRID - pad,
        y0 * SUBGRID - pad,
        x1 * SUBGRID + pad,
        y1 * SUBGRID + pad,
    )
    return Layout(layout.grid_nm // SUBGRID, bbox4, tuple(polygons))


def _rect_vertices(x: int, y: int, w: int, h: int) -> tuple[Point, ...]:
    return ((x, y), (x + w, y), (x + w, y + h), (x, y + h))


def _l_vertices(x: int, y: int, w: int, h: int, nx: int, ny: int) -> tuple[Point, ...]:
    # Full rectangle minus a top-right notch of nx by ny.
    return (
        (x, y),
        (x + w, y),
        (x + w, y + h - ny),
        (x + w - nx, y + h - ny),
        (x + w - nx, y + h),
        (x, y + h),
    )


def _t_vertices(x: int, y: int, w: int, h: int, sw: int, bh: int) -> tuple[Point, ...]:
    # Top bar of height bh across the full width, stem of width sw centered.
    xs = x + (w - sw) // 2
    return (
        (xs, y),
        (xs + sw, y),
        (xs + sw, y + h - bh),
        (x + w, y + h - bh),
        (x + w, y + h),
        (x, y + h),
        (x, y + h - bh),
        (xs, y + h - bh),
    )


# Generator dimension rules, chosen so every emitted shape corrects to well
# under the default tolerance at the default blur: dimensions snap to a
# 16-unit quantum, structural edges are at least 96 (so corner measurement
# points under the default fragmentation sit at least 19 units from their
# corner), and T shoulders are exactly 48 deep (the one validated thin
# feature).
_DIM_QUANTUM = 16
_MIN_EDGE = 6 * _DIM_QUANTUM
_T_SHOULDER = 3 * _DIM_QUANTUM


def _valid_splits(total: int) -> list[int]:
    """Cut positions leaving both resulting edge lengths acceptable."""
    return [
        v for v in range(_MIN_EDGE, total - _MIN_EDGE + 1, _DIM_QUANTUM)
    ]


def gen_random(
    seed: int,
    n_polys: int,
    bbox: tuple[int, int, int, int] = (0, 0, 5200, 5200),
    size_range: tuple[int, int] = (96, 192),
    min_spacing: int = 80,
    grid_nm: int = SUBGRID,
) -> Layout:
    """Deterministic random layout: rectangles plus L and T shapes.

    Placement keeps polygon bounding boxes at least ``min_spacing`` apart and
    leaves headroom at the bbox border so corrected geometry stays inside.
    Same seed, same arguments: byte-identical ``write_layout`` output.
    """
    if n_polys < 0:
        raise LayoutError("n_polys must be non-negative")
    if min_spacing < 1:
        raise LayoutError("min_spacing must be at least 1")
    lo, hi = size_range
    if lo < _MIN_EDGE or hi < lo:
        raise LayoutError(f"size_range must satisfy {_MIN_EDGE} <= lo <= hi")
    x0, y0, x1, y1 = bbox
    margin = 16

    rng = random.Random(seed)
    placed: list[tuple[int, int, int, int]] = []
    polygons: list[Polygon] = []
    attempts = 0
    max_attempts = max(1000, 200 * n_polys)
    while len(polygons) < n_polys:
        if attempts >= max_attempts:
            raise LayoutError(
                f"could not place {n_polys} polygons with spacing {min_spacing} "
                f"after {max_attempts} attempts"
            )
        attempts += 1
        w = rng.randrange(lo, hi + 1, _DIM_QUANTUM)
        h = rng.randrange(lo, hi + 1, _DIM_QUANTUM)
        if x1 - x0 - 2 * margin < w or y1 - y0 - 2 * margin < h:
            continue
        px = rng.randrange(x0 + margin, x1 - margin - w + 1)
        py = rng.randrange(y0 + margin, y1 - margin - h + 1)
        shape = rng.random()

        box = (px - min_spacing, py - min_spacing, px + w + min_spacing, py + h + min_spacing)
        if any(not (box[2] <= b[0] or b[2] <= box[0] or box[3] <= b[1] or b[3] <= box[1])
               for b in placed):
            continue

        verts = _rect_vertices(px, py, w, h)
        if shape >= 0.6:
            notch_x = _valid_splits(w)
            notch_y = _valid_splits(h)
            if shape < 0.85 and notch_x and notch_y:
                verts = _l_vertices(px, py, w, h, rng.choice(notch_x), rng.choice(notch_y))
            elif notch_y and w >= 2 * _T_SHOULDER + _MIN_EDGE:
                verts = _t_vertices(px, py, w, h, w - 2 * _T_SHOULDER, rng.choice(notch_y))
        polygons.append(Polygon(verts))
        placed.append((px, py, px + w, py + h))

    return Layout(grid_nm, bbox, tuple(polygons))
