"""Analytic aerial-image model: a Gaussian point spread integrated over rectangles.

Intensity at a point is the sum, over rectangles whose centers lie within a
hard cull radius of the point, of the closed-form Gaussian integral

    1/4 * [erf((x1-px)/(s*sqrt(2))) - erf((x0-px)/(s*sqrt(2)))]
        * [erf((y1-py)/(s*sqrt(2))) - erf((y0-py)/(s*sqrt(2)))]

summed in canonical (lexicographically sorted) rectangle order. The cull is
deterministic by center distance, never by contribution size, so a tiled
computation that contains the same rectangles sees literally the same sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import erf

from .layout import Fragment, Layout

# Slab rectangles wider or taller than this are split into near-equal pieces.
# Bounded extents keep the center-distance cull close to a geometric cull and
# keep decomposition changes local to where geometry actually changed.
MAX_RECT_EXTENT = 128


@dataclass(frozen=True)
class OpticalModel:
    """Gaussian projection model with a print threshold.

    ``cull_radius`` is the hard contribution cutoff and ``search_radius``
    bounds the contour search for edge placement measurements; both default
    relative to sigma (8x and 4x).
    """

    sigma: float = 20.0
    threshold: float = 0.5
    cull_radius: float | None = None
    search_radius: float | None = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.cull_radius is None:
            object.__setattr__(self, "cull_radius", 8.0 * self.sigma)
        if self.search_radius is None:
            object.__setattr__(self, "search_radius", 4.0 * self.sigma)
        if self.cull_radius < 6.0 * self.sigma:
            raise ValueError("cull_radius must be at least 6 sigma")
        if self.search_radius > self.cull_radius / 2.0:
            raise ValueError("search_radius must not exceed cull_radius / 2")


@dataclass(frozen=True)
class RectDecomposition:
    """Interior-disjoint axis-aligned rectangles in canonical sorted order.

    ``unit_scale`` converts stored integer coordinates to model grid units;
    moved layouts live on the 4x sub-grid and use 0.25.
    """

    rects: tuple[tuple[int, int, int, int], ...]
    unit_scale: float = 1.0

    @cached_property
    def coords(self) -> np.ndarray:
        if not self.rects:
            return np.empty((0, 4), dtype=np.float64)
        return np.asarray(self.rects, dtype=np.float64) * self.unit_scale

    @cached_property
    def centers(self) -> np.ndarray:
        c = self.coords
        return np.column_stack(((c[:, 0] + c[:, 2]) * 0.5, (c[:, 1] + c[:, 3]) * 0.5))

    def total_area(self) -> int:
        return sum((x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in self.rects)


def _split_spans(lo: int, hi: int, max_extent: int) -> list[tuple[int, int]]:
    length = hi - lo
    if length <= max_extent:
        return [(lo, hi)]
    n = -(-length // max_extent)
    base, rem = divmod(length, n)
    spans = []
    cur = lo
    for k in range(n):
        step = base + (1 if k < rem else 0)
        spans.append((cur, cur + step))
        cur += step
    return spans


def decompose(
    layout: Layout,
    max_extent: int = MAX_RECT_EXTENT,
    unit_scale: float = 1.0,
) -> RectDecomposition:
    """Vertical-slab sweep decomposition, one polygon at a time.

    Every polygon decomposes independently of its neighbors (slab boundaries
    come only from its own vertices), so a polygon carried unchanged into a
    tile produces identical rectangles there. Oversize slab rectangles are
    split into near-equal integer pieces no larger than ``max_extent``.
    """
    rects: list[tuple[int, int, int, int]] = []
    for poly in layout.polygons:
        xs = sorted({x for x, _ in poly.vertices})
        hedges = []
        for (ax, ay), (bx, by) in poly.edges():
            if ay == by:
                hedges.append((min(ax, bx), max(ax, bx), ay))
        for xa, xb in zip(xs, xs[1:]):
            spanning = sorted(y for lo, hi, y in hedges if lo <= xa and xb <= hi)
            for y0, y1 in zip(spanning[0::2], spanning[1::2]):
                for sx0, sx1 in _split_spans(xa, xb, max_extent):
                    for sy0, sy1 in _split_spans(y0, y1, max_extent):
                        rects.append((sx0, sy0, sx1, sy1))
    rects.sort()
    return RectDecomposition(tuple(rects), unit_scale)


_SQRT2 = math.sqrt(2.0)


def intensity_at(rects: RectDecomposition, p: tuple[float, float], model: OpticalModel) -> float:
    """Aerial-image intensity at a point; exactly 0.0 when everything culls."""
    centers = rects.centers
    if centers.shape[0] == 0:
        return 0.0
    px, py = float(p[0]), float(p[1])
    d2 = (centers[:, 0] - px) ** 2 + (centers[:, 1] - py) ** 2
    keep = d2 <= model.cull_radius * model.cull_radius
    if not bool(keep.any()):
        return 0.0
    c = rects.coords[keep]
    inv = 1.0 / (model.sigma * _SQRT2)
    fx = erf((c[:, 2] - px) * inv) - erf((c[:, 0] - px) * inv)
    fy = erf((c[:, 3] - py) * inv) - erf((c[:, 1] - py) * inv)
    return float(np.sum(0.25 * fx * fy))


@dataclass(frozen=True)
class Epe:
    """Signed edge placement error along a fragment's outward normal.

    Positive means the printed contour lies outside the target edge.
    ``clamped`` marks fragments where no threshold crossing was found within
    the search radius.
    """

    fragment_id: int
    value: float
    clamped: bool


class FieldProbe:
    """Vectorized intensity probes for many fragments against one decomposition.

    Candidate rectangles per fragment are frozen up front: every rectangle
    whose center lies within cull_radius + search_radius of the fragment
    midpoint, in canonical order. Each probe then applies the exact per-point
    center-distance cull inside that superset, which by the triangle
    inequality loses nothing.
    """

    def __init__(
        self,
        rects: RectDecomposition,
        model: OpticalModel,
        midpoints: np.ndarray,
        normals: np.ndarray,
    ):
        self.model = model
        self.mid = np.asarray(midpoints, dtype=np.float64).reshape(-1, 2)
        self.normal = np.asarray(normals, dtype=np.float64).reshape(-1, 2)
        n = self.mid.shape[0]
        coords = rects.coords
        centers = rects.centers
        if n == 0 or centers.shape[0] == 0:
            self.cand = np.zeros((n, 1, 4), dtype=np.float64)
            self.cc = np.full((n, 1, 2), 1e18, dtype=np.float64)
            self.valid = np.zeros((n, 1), dtype=bool)
            return
        tree = cKDTree(centers)
        radius = model.cull_radius + model.search_radius
        lists = tree.query_ball_point(self.mid, r=radius)
        k = max((len(l) for l in lists), default=0) or 1
        idx = np.zeros((n, k), dtype=np.intp)
        valid = np.zeros((n, k), dtype=bool)
        for i, l in enumerate(lists):
            l.sort()
            idx[i, : len(l)] = l
            valid[i, : len(l)] = True
        self.cand = coords[idx]
        self.cc = centers[idx]
        self.valid = valid

    def intensity(self, t: np.ndarray, active: np.ndarray | None = None) -> np.ndarray:
        """Intensity at midpoint + t * normal for each (active) fragment."""
        if active is None:
            mid, nrm = self.mid, self.normal
            cand, cc, valid = self.cand, self.cc, self.valid
        else:
            mid, nrm = self.mid[active], self.normal[active]
            cand, cc, valid = self.cand[active], self.cc[active], self.valid[active]
        t = np.asarray(t, dtype=np.float64)
        px = mid[:, 0] + t * nrm[:, 0]
        py = mid[:, 1] + t * nrm[:, 1]
        dx = cc[:, :, 0] - px[:, None]
        dy = cc[:, :, 1] - py[:, None]
        r = self.model.cull_radius
        keep = valid & (dx * dx + dy * dy <= r * r)
        inv = 1.0 / (self.model.sigma * _SQRT2)
        fx = erf((cand[:, :, 2] - px[:, None]) * inv) - erf((cand[:, :, 0] - px[:, None]) * inv)
        fy = erf((cand[:, :, 3] - py[:, None]) * inv) - erf((cand[:, :, 1] - py[:, None]) * inv)
        return np.where(keep, 0.25 * fx * fy, 0.0).sum(axis=1)


_BISECT_ITERS = 40
_SCAN_STEP = 0.5


def threshold_crossings(probe: FieldProbe, model: OpticalModel) -> tuple[np.ndarray, np.ndarray]:
    """Locate the print-threshold crossing along each fragment normal.

    Samples outward from the target midpoint at 0.5-grid steps (positive
    side first at equal distance) until a sign change brackets the contour,
    then runs a fixed 40 bisection iterations for bit-reproducibility.
    Fragments with no crossing inside the search radius clamp to its edge,
    signed by the intensity at the midpoint itself.

    Returns (values, clamped).
    """
    n = probe.mid.shape[0]
    sr = model.search_radius
    if n == 0:
        return np.zeros(0, dtype=np.float64), np.zeros(0, dtype=bool)

    s0 = probe.intensity(np.zeros(n)) - model.threshold
    lo = np.zeros(n)
    hi = np.zeros(n)
    s_lo = s0.copy()
    unresolved = np.ones(n, dtype=bool)
    prev_pos = s0.copy()
    prev_neg = s0.copy()

    n_steps = int(math.floor(sr / _SCAN_STEP + 1e-9))
    for j in range(1, n_steps + 1):
        if not unresolved.any():
            break
        t = j * _SCAN_STEP
        idx = np.flatnonzero(unresolved)
        s_pos = probe.intensity(np.full(idx.size, t), active=idx) - model.threshold
        hit = (prev_pos[idx] > 0.0) != (s_pos > 0.0)
        took = idx[hit]
        lo[took] = t - _SCAN_STEP
        hi[took] = t
        s_lo[took] = prev_pos[took]
        unresolved[took] = False
        prev_pos[idx] = s_pos

        idx = np.flatnonzero(unresolved)
        if idx.size:
            s_neg = probe.intensity(np.full(idx.size, -t), active=idx) - model.threshold
            hit = (s_neg > 0.0) != (prev_neg[idx] > 0.0)
            took = idx[hit]
            lo[took] = -t
            hi[took] = -(t - _SCAN_STEP)
            s_lo[took] = s_neg[hit]
            unresolved[took] = False
            prev_neg[idx] = s_neg

    clamped = unresolved.copy()
    resolved = np.flatnonzero(~unresolved)
    if resolved.size:
        a = lo[resolved]
        b = hi[resolved]
        sa = s_lo[resolved]
        for _ in range(_BISECT_ITERS):
            m = 0.5 * (a + b)
            sm = probe.intensity(m, active=resolved) - model.threshold
            same = (sm > 0.0) == (sa > 0.0)
            a = np.where(same, m, a)
            sa = np.where(same, sm, sa)
            b = np.where(same, b, m)
        lo[resolved] = a
        hi[resolved] = b

    values = 0.5 * (lo + hi)
    values[clamped] = np.where(s0[clamped] > 0.0, sr, -sr)
    return values, clamped


def epe(
    frag: Fragment,
    current: RectDecomposition,
    target_point: tuple[float, float],
    model: OpticalModel,
    fragment_id: int = 0,
) -> Epe:
    """Edge placement error of one fragment against the current decomposition.

    ``target_point`` is the fragment midpoint of the target layout; the
    search happens along the fragment's outward normal.
    """
    probe = FieldProbe(
        current,
        model,
        np.asarray([target_point], dtype=np.float64),
        np.asarray([frag.normal], dtype=np.float64),
    )
    values, clamped = threshold_crossings(probe, model)
    return Epe(fragment_id, float(values[0]), bool(clamped[0]))
