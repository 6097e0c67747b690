"""Iterative edge correction: simulate, measure placement error, move edges.

Each iteration rebuilds the moved layout from the current offsets, measures
the signed edge placement error of every fragment at its fixed target
midpoint, and applies a proportional feedback update with per-iteration and
total movement caps. The loop stops when the worst error drops to the
tolerance or the iteration budget runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layout import (
    SUBGRID,
    FragmentSet,
    Layout,
    SelfIntersectionError,
    apply_offsets,
    fragment,
)
from .litho import MAX_RECT_EXTENT, Epe, FieldProbe, OpticalModel, decompose, threshold_crossings


class ConvergenceError(RuntimeError):
    """Raised when movement produces unrecoverable geometry."""


@dataclass(frozen=True)
class OpcParams:
    """Correction loop tuning. Defaults are desk-scale sane."""

    max_iter: int = 20
    epe_tol: float = 0.25
    gain: float = 0.7
    max_step: float = 2.0
    max_total_offset: float = 8.0

    def __post_init__(self):
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        if not 0.0 < self.gain <= 1.0:
            raise ValueError("gain must be in (0, 1]")
        if self.max_step > self.max_total_offset:
            raise ValueError("max_step must not exceed max_total_offset")
        if self.epe_tol <= 0 or self.epe_tol >= self.max_step:
            raise ValueError("epe_tol must be positive and below max_step")


@dataclass(frozen=True)
class CorrectionState:
    """Loop state after ``iter`` iterations.

    ``clamped_fragments`` counts clamped placement measurements from the most
    recent iteration; ``correct_tile`` accumulates them across the run.
    """

    iter: int
    fragments: FragmentSet
    max_abs_epe: float
    converged: bool
    clamped_fragments: int = 0


@dataclass(frozen=True)
class CorrectionStats:
    iterations: int
    final_max_epe: float
    clamp_count: int
    converged: bool


def cost(epes: list[Epe]) -> float:
    """Scalar cost of a measurement set: the worst absolute placement error."""
    if not epes:
        raise ValueError("cost of an empty measurement set is undefined")
    return max(abs(e.value) for e in epes)


def _moved_with_retry(fs: FragmentSet) -> tuple[Layout, FragmentSet]:
    """Apply offsets; on self-intersection halve the offending polygon once."""
    try:
        return apply_offsets(fs), fs
    except SelfIntersectionError as e:
        offsets = [
            f.offset * 0.5 if f.polygon_id == e.polygon_id else f.offset
            for f in fs.fragments
        ]
        fs = fs.with_offsets(offsets)
    try:
        return apply_offsets(fs), fs
    except SelfIntersectionError as e:
        raise ConvergenceError(
            f"polygon {e.polygon_id} still self-intersects after halving offsets"
        ) from e


def measure_epes(fs: FragmentSet, model: OpticalModel) -> tuple[np.ndarray, np.ndarray, FragmentSet]:
    """Placement errors of all fragments against the moved geometry.

    Returns (values, clamped, fragment set actually used) where the fragment
    set differs from the input only if a self-intersection retry halved a
    polygon's offsets.
    """
    moved, fs = _moved_with_retry(fs)
    rects = decompose(moved, max_extent=MAX_RECT_EXTENT * SUBGRID, unit_scale=1.0 / SUBGRID)
    probe = FieldProbe(rects, model, fs.midpoints(), fs.normals())
    values, clamped = threshold_crossings(probe, model)
    return values, clamped, fs


def opc_iterate(
    state: CorrectionState,
    target: Layout,
    model: OpticalModel,
    params: OpcParams,
) -> CorrectionState:
    """One correction iteration.

    Measures every fragment at its target midpoint, then (unless already at
    tolerance) applies offset -= gain * epe with the per-iteration change
    clamped to max_step and the accumulated offset clamped to
    max_total_offset. Keeping the offsets untouched on a converged
    measurement means the returned geometry is exactly the geometry the
    convergence certificate was measured on.
    """
    if state.converged:
        raise ConvergenceError("opc_iterate called on a converged state")
    if state.iter >= params.max_iter:
        raise ConvergenceError("opc_iterate called past the iteration cap")
    fs = state.fragments
    if fs.layout is not target and fs.layout != target:
        raise ValueError("state fragments do not belong to the target layout")

    values, clamped, fs = measure_epes(fs, model)
    max_abs = float(np.max(np.abs(values))) if values.size else 0.0
    converged = max_abs <= params.epe_tol
    if not converged:
        offsets = np.asarray(fs.offsets(), dtype=np.float64)
        delta = np.clip(-params.gain * values, -params.max_step, params.max_step)
        offsets = np.clip(offsets + delta, -params.max_total_offset, params.max_total_offset)
        fs = fs.with_offsets(offsets.tolist())
    return CorrectionState(state.iter + 1, fs, max_abs, converged, int(clamped.sum()))


def run_correction(
    tile_target: Layout,
    model: OpticalModel,
    params: OpcParams,
    frag_len: int,
) -> tuple[Layout, CorrectionStats, FragmentSet]:
    """Full correction of one tile; also returns the final fragment set."""
    fs = fragment(tile_target, frag_len)
    if not tile_target.polygons:
        return apply_offsets(fs), CorrectionStats(0, 0.0, 0, True), fs

    state = CorrectionState(0, fs, math.inf, False)
    clamp_total = 0
    while not state.converged and state.iter < params.max_iter:
        state = opc_iterate(state, tile_target, model, params)
        clamp_total += state.clamped_fragments
    corrected = apply_offsets(state.fragments)
    stats = CorrectionStats(state.iter, state.max_abs_epe, clamp_total, state.converged)
    return corrected, stats, state.fragments


def correct_tile(
    tile_target: Layout,
    model: OpticalModel,
    params: OpcParams,
    frag_len: int,
) -> tuple[Layout, CorrectionStats]:
    """Correct one tile of geometry. Deterministic: same inputs, same bytes."""
    corrected, stats, _ = run_correction(tile_target, model, params, frag_len)
    return corrected, stats
