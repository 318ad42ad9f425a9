"""Stochastic coarse-to-fine assembly of a global displacement field.

Registration runs the trained patch predictors over the whole fixed-image
canvas, one scale at a time. Each scale pass tiles the canvas with
non-overlapping patches several times, each tiling shifted by a random
global offset, so every output voxel accumulates one prediction per tiling
(``coverage`` of them in total). Patch results are averaged into a
per-scale refinement field D_t, and the final field is the running sum of
the per-scale refinements, upsampled between scales by component-wise
linear interpolation.

Patches at every scale are placed directly at that scale's size; the
running global field — not a parent patch — provides their incoming
displacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy import ndimage

from . import cascade as casc
from . import geometry as geo
from . import volumes as vol
from .errors import EmptyOverlap, IncompatibleSchedule


@dataclass(frozen=True)
class GlobalDDF:
    """Dense displacement field (mm) on a regular grid over the canvas.

    ``count`` holds the per-voxel number of patch predictions averaged into
    the field when it came from a scale pass, and None for derived fields.
    """

    values: np.ndarray  # (D, H, W, 3) float32, world mm
    affine: geo.AffineTransform  # grid index -> world mm
    count: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float32))
        if self.values.ndim != 4 or self.values.shape[-1] != 3:
            raise ValueError(f"field must be (D,H,W,3), got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape[:3]

    def world_grid(self) -> np.ndarray:
        """World coordinates of every grid voxel, shape (D, H, W, 3)."""
        return geo.voxel_field(self.affine, self.shape)

    def sample(self, world: np.ndarray) -> np.ndarray:
        """Component-wise linear interpolation at world points (..., 3)."""
        idx = geo.invert(self.affine).apply(world)
        return vol.trilinear_sample(self.values, idx, mode="border")

    def to_field(self) -> vol.DisplacementField:
        return vol.DisplacementField(self.values, self.affine)

    @classmethod
    def from_field(cls, f: vol.DisplacementField) -> "GlobalDDF":
        return cls(np.asarray(f.data), f.affine)


def ddf_grid(canvas: geo.Canvas, spacing: float) -> GlobalDDF:
    """Zero field on a grid of the given spacing covering the canvas box."""
    if spacing <= 0:
        raise ValueError("grid spacing must be positive")
    shape = tuple(int(math.ceil(e / spacing)) + 1 for e in canvas.extent_mm)
    affine = geo.compose(geo.translate(canvas.box_min), geo.scale(spacing))
    return GlobalDDF(np.zeros(shape + (3,), dtype=np.float32), affine)


def resample_ddf(d: GlobalDDF, like: GlobalDDF) -> GlobalDDF:
    """Interpolate ``d`` onto the grid of ``like`` (values stay in mm)."""
    return GlobalDDF(d.sample(like.world_grid()), like.affine)


def patch_budget(canvas: geo.Canvas, edge_mm: float, coverage: int = 10) -> int:
    """Minimum patch count so each voxel averages ``coverage`` predictions."""
    v_canvas = float(np.prod(canvas.extent_mm))
    return int(math.ceil(coverage * v_canvas / edge_mm**3))


def _as_ddf_torch(d: GlobalDDF):
    inv = geo.invert(d.affine)
    return (
        torch.as_tensor(d.values.copy()).permute(3, 0, 1, 2)[None],
        torch.as_tensor(inv.linear.copy()).float(),
        torch.as_tensor(inv.translation.copy()).float(),
    )


def _gather_ddf(ddf_torch, world: torch.Tensor) -> torch.Tensor:
    """Field vectors at (B, d, h, w, 3) world points -> same shape, mm."""
    vals, lin, shift = ddf_torch
    idx = world @ lin.T + shift
    b = world.shape[0]
    out = casc.sample_volume(vals.expand(b, -1, -1, -1, -1), idx, padding="border")
    return out.permute(0, 2, 3, 4, 1)


def _tile_slices(coords: np.ndarray, offset: float, edge: float):
    """Partition sorted grid coordinates into half-open tile intervals.

    Returns (start coordinates, index slices), one per tile that holds at
    least one grid point; together the slices cover all points exactly once.
    """
    n_tiles = int(math.floor((coords[-1] - offset) / edge)) + 1
    edges = offset + edge * np.arange(n_tiles + 1)
    bounds = np.searchsorted(coords, edges, side="left")
    out = []
    for k in range(n_tiles):
        if bounds[k] < bounds[k + 1]:
            out.append((edges[k], slice(int(bounds[k]), int(bounds[k + 1]))))
    return out


def scale_pass(
    d_prev: GlobalDDF | None,
    t: int,
    fixed: casc.TorchVolume,
    moving: casc.TorchVolume,
    heads: dict,
    schedule: casc.ScaleSchedule,
    canvas: geo.Canvas,
    rng: np.random.Generator,
    resolution_multiplier: int = 1,
    coverage: int = 10,
    batch: int = 64,
) -> GlobalDDF:
    """One refinement field D_t averaged from ``coverage`` jittered tilings.

    Every tiling covers the whole output grid with non-overlapping patches,
    so each voxel receives exactly one nearest-patch-voxel prediction per
    tiling. The returned field holds the scale's displacement *increment*;
    the caller accumulates increments across scales.
    """
    p = schedule.patch_size
    voxel_t = schedule.voxel_size_mm[t]
    edge = p * voxel_t
    head = heads[schedule.head_group[t]]
    head.eval()

    grid = ddf_grid(canvas, voxel_t / resolution_multiplier)
    axes = [canvas.box_min[a] + (voxel_t / resolution_multiplier) * np.arange(grid.shape[a]) for a in range(3)]
    total = np.zeros(grid.shape + (3,), dtype=np.float64)
    count = np.zeros(grid.shape, dtype=np.int32)
    d_prev_tv = None if d_prev is None else _as_ddf_torch(d_prev)
    no_aug = geo.AugmentationRanges.disabled()

    with torch.no_grad():
        for _ in range(coverage):
            offsets = canvas.box_min - rng.uniform(0.0, edge, size=3)
            per_axis = [_tile_slices(axes[a], offsets[a], edge) for a in range(3)]
            tiles = [
                (np.array([sx, sy, sz]) + 0.5 * edge, (ix, iy, iz))
                for sx, ix in per_axis[0]
                for sy, iy in per_axis[1]
                for sz, iz in per_axis[2]
            ]
            tiling = np.empty(grid.shape + (3,), dtype=np.float32)
            for lo in range(0, len(tiles), batch):
                chunk = tiles[lo : lo + batch]
                chains = [
                    [geo.initial_patch_transform(canvas, c, voxel_t, p, no_aug, rng)] for c, _ in chunk
                ]
                x_f_np = np.stack(
                    [geo.coordinate_field(geo.chain_transform(canvas, ch), (p, p, p)) for ch in chains]
                )
                x_f = torch.as_tensor(x_f_np).float()
                d_in = None if d_prev_tv is None else _gather_ddf(d_prev_tv, x_f)
                state = casc.BlockState(
                    canvas=canvas, patch_size=p, chains=chains, x_f=x_f, d_in=d_in, t=t
                )
                d_out = casc.block_forward(state, fixed, moving, head)
                inc = (d_out if d_in is None else d_out - d_in).numpy()
                for (center, slices), values in zip(chunk, inc):
                    box_lo = center - 0.5 * edge
                    nearest = [
                        np.clip(np.rint((axes[a][slices[a]] - box_lo[a]) / voxel_t - 0.5), 0, p - 1).astype(int)
                        for a in range(3)
                    ]
                    tiling[slices] = values[np.ix_(*nearest)]
            total += tiling
            count += 1

    covered = count > 0
    values = np.zeros_like(total, dtype=np.float32)
    values[covered] = (total[covered] / count[covered, None]).astype(np.float32)
    if not covered.all():  # nearest covered neighbour fills any gap
        _, nearest_idx = ndimage.distance_transform_edt(~covered, return_indices=True)
        values = values[tuple(nearest_idx)]
    return GlobalDDF(values, grid.affine, count=count)


def _check_model(heads: dict, schedule: casc.ScaleSchedule) -> None:
    missing = [g for g in range(schedule.n_groups) if g not in heads]
    if missing:
        raise IncompatibleSchedule(f"model lacks heads for groups {missing}")
    for g in range(schedule.n_groups):
        cfg = getattr(heads[g], "cfg", None)
        if cfg is not None and cfg.patch_size != schedule.patch_size:
            raise IncompatibleSchedule(
                f"head {g} expects patch size {cfg.patch_size}, schedule has {schedule.patch_size}"
            )


def _check_overlap(fixed: vol.ImageStack, moving: vol.ImageStack) -> None:
    a, b = geo.make_canvas(fixed), geo.make_canvas(moving)
    if np.any(np.minimum(a.box_max, b.box_max) <= np.maximum(a.box_min, b.box_min)):
        raise EmptyOverlap("fixed and moving images share no world-space overlap")


def register(
    fixed: vol.ImageStack,
    moving: vol.ImageStack,
    heads: dict,
    schedule: casc.ScaleSchedule,
    seed: int = 0,
    resolution_multiplier: int = 1,
    repeat_scales: tuple = (),
    coverage: int = 10,
    batch: int = 64,
    align: bool = True,
) -> GlobalDDF:
    """Assemble the dense field mapping fixed-image points into ``moving``.

    The result lives on the fixed-image canvas at the finest scale's
    resolution (times ``resolution_multiplier``); adding it to a world point
    of the fixed image yields the corresponding point of ``moving``.
    ``repeat_scales`` appends extra passes after the sweep, e.g. ``(-1, -1)``
    re-runs the finest scale twice more.
    """
    _check_model(heads, schedule)
    shift = np.zeros(3)
    if align:
        moving, shift = vol.align_centers(moving, fixed)
    _check_overlap(fixed, moving)

    canvas = geo.make_canvas(fixed)
    fixed_tv = casc.as_torch_volume(fixed)
    moving_tv = casc.as_torch_volume(moving)
    rng = np.random.default_rng(seed)
    sequence = list(range(schedule.n_scales)) + [
        s if s >= 0 else schedule.n_scales + s for s in repeat_scales
    ]
    if any(not 0 <= s < schedule.n_scales for s in sequence):
        raise IncompatibleSchedule(f"repeat_scales out of range: {repeat_scales}")

    d: GlobalDDF | None = None
    for t in sequence:
        d_t = scale_pass(
            d, t, fixed_tv, moving_tv, heads, schedule, canvas, rng,
            resolution_multiplier=resolution_multiplier, coverage=coverage, batch=batch,
        )
        if d is None:
            d = d_t
        else:
            if d.shape != d_t.shape:
                d = resample_ddf(d, d_t)
            d = GlobalDDF(d.values + d_t.values, d_t.affine, count=d_t.count)
    return replace(d, values=d.values - shift.astype(np.float32))


def invert_direction(fixed, moving, heads, schedule, **opts) -> GlobalDDF:
    """Field for the swapped direction (moving as reference), same options."""
    return register(moving, fixed, heads, schedule, **opts)


def warp_image(moving: vol.ImageStack, d: GlobalDDF, like: vol.ImageStack | None = None) -> vol.ImageStack:
    """Resample ``moving`` at X + D(X) on the output grid (trilinear).

    The output grid is ``like``'s if given, otherwise the field's own grid.
    """
    if like is None:
        ref_world, affine = d.world_grid(), d.affine
    else:
        ref_world = geo.voxel_field(like.affine, like.shape)
        affine = like.affine
    warped = vol.sample_at_world(moving, ref_world + d.sample(ref_world))
    return vol.ImageStack(warped.astype(np.float32), affine)


def warp_labels(labels: vol.LabelVolume, d: GlobalDDF, like=None) -> vol.LabelVolume:
    """Like :func:`warp_image` but nearest-neighbour, preserving label ids."""
    if like is None:
        ref_world, affine = d.world_grid(), d.affine
    else:
        ref_world = geo.voxel_field(like.affine, like.shape)
        affine = like.affine
    moved = ref_world + d.sample(ref_world)
    idx = geo.invert(labels.affine).apply(moved)
    return vol.LabelVolume(vol.nearest_sample(labels.data, idx), affine)
