"""Partition a layout into halo-padded work elements and merge tile results.

The halo is sized so that every intensity probe a tile can make for a
fragment it owns sees exactly the rectangle set the monolithic run would
see: contour probes wander up to search_radius from a midpoint, contribution
culling reaches cull_radius beyond that, moved geometry adds
max_total_offset, and a clipped polygon can perturb its own decomposition up
to its full extent. With that padding, distributed output is byte-identical
to the monolithic run.

Tile cores partition the layout bounding box; fragment ownership uses
half-open cores (min edges in, max edges out, outermost row and column
closed) so every target midpoint has exactly one owner without any
floating-point tie-breaking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layout import Fragment, FragmentSet, Layout, LayoutError, Point, Polygon, _shoelace2, fragment
from .litho import OpticalModel
from .opc import CorrectionStats, OpcParams


class TilerError(ValueError):
    """Partition or stitch contract violation."""


@dataclass(frozen=True)
class WorkElement:
    """One tile: its owned core plus clipped context geometry.

    ``source_polygons`` maps each polygon of ``halo_geom`` back to its index
    in the original layout, or None for pieces cut at the halo boundary
    (those can never contain an owned fragment).
    """

    tile_id: int
    core: tuple[int, int, int, int]
    halo_geom: Layout
    halo_width: int
    source_polygons: tuple[int | None, ...]


@dataclass(frozen=True)
class TileResult:
    """Corrected output of one work element.

    ``fragment_offsets`` are the final movement values for every fragment of
    the element's geometry in deterministic fragmentation order; the stitch
    consumes the offsets of owned fragments, which fully determine the
    merged geometry.
    """

    tile_id: int
    corrected: Layout
    stats: CorrectionStats
    fragment_offsets: tuple[float, ...]


def _clip_halfplane(
    vertices: tuple[Point, ...], axis: int, bound: int, keep_low: bool
) -> list[tuple[Point, ...]]:
    """Clip a simple rectilinear ring by an axis-aligned half-plane.

    Returns zero or more simple rings. Chains of kept boundary are joined
    along the clip line by pairing crossing points in sorted order, which is
    exact for integer rectilinear geometry and handles polygons that leave
    and re-enter the half-plane.
    """

    def inside(p: Point) -> bool:
        return p[axis] <= bound if keep_low else p[axis] >= bound

    n = len(vertices)
    flags = [inside(v) for v in vertices]
    if all(flags):
        return [vertices]
    if not any(flags):
        return []

    start = next(i for i in range(n) if not flags[i])
    chains: list[list[Point]] = []
    current: list[Point] | None = None
    for k in range(n):
        i = (start + k) % n
        j = (i + 1) % n
        a, b = vertices[i], vertices[j]
        a_in, b_in = flags[i], flags[j]
        if a_in and current is None:
            current = [a]
        if a_in and b_in:
            current.append(b)
        elif a_in and not b_in:
            cross = (bound, a[1]) if axis == 0 else (a[0], bound)
            current.append(cross)
            chains.append(current)
            current = None
        elif not a_in and b_in:
            cross = (bound, b[1]) if axis == 0 else (b[0], bound)
            current = [cross, b]
    if current is not None:
        chains.append(current)

    other = 1 - axis
    events: list[tuple[int, bool, int]] = []  # (coord along line, is_exit, chain idx)
    for ci, chain in enumerate(chains):
        events.append((chain[0][other], False, ci))
        events.append((chain[-1][other], True, ci))
    events.sort(key=lambda e: (e[0], e[1]))

    successor: dict[int, int] = {}
    for k in range(0, len(events), 2):
        e1, e2 = events[k], events[k + 1]
        if e1[1] == e2[1]:
            raise TilerError("clip pairing failed; input ring is not simple")
        exit_chain = e1[2] if e1[1] else e2[2]
        entry_chain = e2[2] if e1[1] else e1[2]
        successor[exit_chain] = entry_chain

    rings: list[tuple[Point, ...]] = []
    seen: set[int] = set()
    for ci in range(len(chains)):
        if ci in seen:
            continue
        ring: list[Point] = []
        cur = ci
        while cur not in seen:
            seen.add(cur)
            ring.extend(chains[cur])
            cur = successor[cur]
        cleaned = _clean_clip_ring(ring)
        if cleaned is not None:
            rings.append(cleaned)
    return rings


def _clean_clip_ring(points: list[Point]) -> tuple[Point, ...] | None:
    """Normalize a clipped ring; None if it has no interior."""
    changed = True
    while changed and len(points) > 2:
        changed = False
        out: list[Point] = []
        n = len(points)
        for i in range(n):
            prev, cur, nxt = points[(i - 1) % n], points[i], points[(i + 1) % n]
            if cur == prev:
                changed = True
                continue
            if (prev[0] == cur[0] == nxt[0]) or (prev[1] == cur[1] == nxt[1]):
                changed = True
                continue
            out.append(cur)
        points = out
    if len(points) < 4:
        return None
    ring = tuple(points)
    if _shoelace2(ring) <= 0:
        raise TilerError("clipped ring lost its orientation")
    return ring


def clip_polygon(poly: Polygon, box: tuple[int, int, int, int]) -> list[Polygon]:
    """Intersect a polygon with a box; may yield several simple pieces."""
    x0, y0, x1, y1 = box
    rings = [poly.vertices]
    for axis, bound, keep_low in ((0, x0, False), (0, x1, True), (1, y0, False), (1, y1, True)):
        nxt: list[tuple[Point, ...]] = []
        for ring in rings:
            nxt.extend(_clip_halfplane(ring, axis, bound, keep_low))
        rings = nxt
        if not rings:
            return []
    rings.sort(key=min)
    return [Polygon(r) for r in rings]


def halo_width_for(layout: Layout, model: OpticalModel, params: OpcParams) -> int:
    """Context padding that makes tile-local simulation equal global simulation."""
    max_extent = 0
    for poly in layout.polygons:
        px0, py0, px1, py1 = poly.bounds()
        max_extent = max(max_extent, px1 - px0, py1 - py0)
    reach = model.cull_radius + model.search_radius + params.max_total_offset
    return int(math.ceil(reach)) + max_extent


@dataclass(frozen=True)
class TilePlan:
    """Primary-side bookkeeping for one distributed run."""

    layout: Layout
    tile_size: int
    frag_len: int
    cols: int
    rows: int
    elements: tuple[WorkElement, ...]
    fragments: FragmentSet
    owner: tuple[int, ...]  # owning tile_id per global fragment
    tile_fragment_counts: tuple[int, ...]
    # per tile: (tile fragment index, global fragment index) pairs
    tile_maps: tuple[tuple[tuple[int, int], ...], ...]


def _owner_tile(
    mx: float, my: float, bbox: tuple[int, int, int, int], tile_size: int, cols: int, rows: int
) -> int:
    col = min(int((mx - bbox[0]) // tile_size), cols - 1)
    row = min(int((my - bbox[1]) // tile_size), rows - 1)
    return row * cols + col


def plan_tiles(
    layout: Layout,
    tile_size: int,
    model: OpticalModel,
    params: OpcParams,
    frag_len: int,
) -> TilePlan:
    """Partition plus the fragment provenance maps stitch needs."""
    if tile_size < 1:
        raise TilerError("tile_size must be at least 1")
    x0, y0, x1, y1 = layout.bbox
    cols = -(-(x1 - x0) // tile_size)
    rows = -(-(y1 - y0) // tile_size)
    halo = halo_width_for(layout, model, params)

    elements: list[WorkElement] = []
    for row in range(rows):
        for col in range(cols):
            cx0 = x0 + col * tile_size
            cy0 = y0 + row * tile_size
            core = (cx0, cy0, min(cx0 + tile_size, x1), min(cy0 + tile_size, y1))
            clip = (
                max(core[0] - halo, x0),
                max(core[1] - halo, y0),
                min(core[2] + halo, x1),
                min(core[3] + halo, y1),
            )
            polys: list[Polygon] = []
            sources: list[int | None] = []
            for pid, poly in enumerate(layout.polygons):
                px0, py0, px1, py1 = poly.bounds()
                if px1 <= clip[0] or px0 >= clip[2] or py1 <= clip[1] or py0 >= clip[3]:
                    continue
                if px0 >= clip[0] and py0 >= clip[1] and px1 <= clip[2] and py1 <= clip[3]:
                    polys.append(poly)
                    sources.append(pid)
                else:
                    for piece in clip_polygon(poly, clip):
                        polys.append(piece)
                        sources.append(None)
            geom = Layout(layout.grid_nm, clip, tuple(polys))
            elements.append(
                WorkElement(row * cols + col, core, geom, halo, tuple(sources))
            )

    fs = fragment(layout, frag_len)
    poly_base: list[int] = []
    count = 0
    for pid in range(len(layout.polygons)):
        poly_base.append(count)
        count += sum(1 for f in fs.fragments if f.polygon_id == pid)
    owner = tuple(
        _owner_tile(*f.midpoint(), layout.bbox, tile_size, cols, rows) for f in fs.fragments
    )

    tile_maps: list[tuple[tuple[int, int], ...]] = []
    tile_counts: list[int] = []
    for el in elements:
        tile_fs = fragment(el.halo_geom, frag_len)
        pairs: list[tuple[int, int]] = []
        per_poly_seen: dict[int, int] = {}
        for ti, f in enumerate(tile_fs.fragments):
            src = el.source_polygons[f.polygon_id]
            if src is None:
                continue
            k = per_poly_seen.get(f.polygon_id, 0)
            per_poly_seen[f.polygon_id] = k + 1
            pairs.append((ti, poly_base[src] + k))
        tile_maps.append(tuple(pairs))
        tile_counts.append(len(tile_fs.fragments))

    return TilePlan(
        layout, tile_size, frag_len, cols, rows, tuple(elements), fs, owner,
        tuple(tile_counts), tuple(tile_maps),
    )


def partition(
    layout: Layout,
    tile_size: int,
    model: OpticalModel,
    params: OpcParams,
    frag_len: int = 48,
) -> list[WorkElement]:
    """Row-major grid of halo-padded work elements covering the layout bbox."""
    return list(plan_tiles(layout, tile_size, model, params, frag_len).elements)


def stitch(plan: TilePlan, results: list[TileResult]) -> Layout:
    """Merge tile results into the corrected layout.

    Each tile contributes the final offsets of the fragments whose target
    midpoints fall inside its core; the merged geometry is rebuilt from the
    original fragmentation with those offsets, so it is independent of
    result arrival order and byte-identical to a monolithic run.
    """
    n_tiles = len(plan.elements)
    by_id: dict[int, TileResult] = {}
    for res in results:
        if res.tile_id in by_id:
            raise TilerError(f"duplicate result for tile {res.tile_id}")
        if not 0 <= res.tile_id < n_tiles:
            raise TilerError(f"result for unknown tile {res.tile_id}")
        by_id[res.tile_id] = res
    missing = [t for t in range(n_tiles) if t not in by_id]
    if missing:
        raise TilerError(f"missing results for tiles {missing}")

    n = len(plan.fragments.fragments)
    offsets = np.full(n, np.nan, dtype=np.float64)
    for el in plan.elements:
        res = by_id[el.tile_id]
        if len(res.fragment_offsets) != plan.tile_fragment_counts[el.tile_id]:
            raise TilerError(
                f"tile {el.tile_id} returned {len(res.fragment_offsets)} offsets, "
                f"expected {plan.tile_fragment_counts[el.tile_id]}"
            )
        for ti, gi in plan.tile_maps[el.tile_id]:
            if plan.owner[gi] != el.tile_id:
                continue
            if not np.isnan(offsets[gi]):
                raise TilerError(f"fragment {gi} claimed by two cores")
            offsets[gi] = res.fragment_offsets[ti]

    unclaimed = np.flatnonzero(np.isnan(offsets))
    if unclaimed.size:
        raise TilerError(f"fragment {int(unclaimed[0])} claimed by no core")

    from .layout import apply_offsets

    return apply_offsets(plan.fragments.with_offsets(offsets.tolist()))
