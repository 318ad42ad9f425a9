"""Scale schedules and the per-scale block: sample patches, predict, refine.

A chain of patch transforms pins one patch hierarchy: the coarsest transform
places a rotated cube over the canvas, each later one zooms further in. The
block at scale t samples the fixed image at ``x_f`` and the moving image at
``x_f + d_in``, runs the scale's head, and maps the predicted voxel-space
displacement into world mm:

    d_out = T_w · d_local + d_in        (d_in = 0 at the coarsest scale)

Descending to scale t+1 re-centers the patch via a nested scale-and-shift
transform and carries ``d_out`` down by trilinear resampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry as geo
from .diffcore import sample_volume
from .errors import IncompatibleSchedule
from .volumes import ImageStack

DEFAULT_GROUP_KINDS = ("affine", "affine", "dense")
ALL_AFFINE_KINDS = ("affine", "affine", "affine")


@dataclass(frozen=True)
class ScaleSchedule:
    """Isotropic voxel sizes per scale plus the head group serving each."""

    patch_size: int
    voxel_size_mm: tuple
    head_group: tuple
    group_kinds: tuple = DEFAULT_GROUP_KINDS

    def __post_init__(self):
        sizes = tuple(float(s) for s in self.voxel_size_mm)
        if len(sizes) < 2:
            raise IncompatibleSchedule("a schedule needs at least two scales")
        if any(s <= 0 for s in sizes):
            raise IncompatibleSchedule(f"voxel sizes must be positive: {sizes}")
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise IncompatibleSchedule(f"voxel sizes must strictly decrease: {sizes}")
        if len(self.head_group) != len(sizes):
            raise IncompatibleSchedule("head_group must assign every scale")
        if max(self.head_group) >= len(self.group_kinds):
            raise IncompatibleSchedule("head_group index outside group_kinds")
        object.__setattr__(self, "voxel_size_mm", sizes)
        object.__setattr__(self, "head_group", tuple(int(gr) for gr in self.head_group))

    @property
    def n_scales(self) -> int:
        return len(self.voxel_size_mm)

    @property
    def n_groups(self) -> int:
        return max(self.head_group) + 1

    def zoom(self, t: int) -> float:
        """Shrink factor applied when descending from scale t to t+1."""
        return self.voxel_size_mm[t + 1] / self.voxel_size_mm[t]

    def kind_of_group(self, group: int) -> str:
        return self.group_kinds[group]

    def to_meta(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "voxel_size_mm": list(self.voxel_size_mm),
            "head_group": list(self.head_group),
            "group_kinds": list(self.group_kinds),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ScaleSchedule":
        return cls(
            patch_size=int(meta["patch_size"]),
            voxel_size_mm=tuple(meta["voxel_size_mm"]),
            head_group=tuple(meta["head_group"]),
            group_kinds=tuple(meta["group_kinds"]),
        )


def build_schedule(
    training_set,
    n_scales: int = 9,
    patch_size: int = 32,
    all_affine: bool = False,
) -> ScaleSchedule:
    """Linear voxel-size ramp from whole-canvas coverage down to source resolution.

    The coarsest scale is sized so one patch spans the largest canvas edge of
    any training image; the finest matches the smallest voxel spacing found
    on any axis. Head groups split the scales in thirds.
    """
    if not training_set:
        raise IncompatibleSchedule("cannot build a schedule from an empty training set")
    max_edge = max(float(geo.make_canvas(img).extent_mm.max()) for img in training_set)
    finest = min(float(img.spacing.min()) for img in training_set)
    coarsest = max_edge / patch_size
    if coarsest <= finest:
        raise IncompatibleSchedule(
            f"canvas edge {max_edge:.3g} mm needs a coarsest voxel below the source "
            f"resolution {finest:.3g} mm; reduce patch_size or n_scales"
        )
    sizes = np.linspace(coarsest, finest, n_scales)
    groups = tuple(3 * t // n_scales for t in range(n_scales))
    kinds = ALL_AFFINE_KINDS if all_affine else DEFAULT_GROUP_KINDS
    return ScaleSchedule(patch_size, tuple(sizes), groups, kinds)


# ---------------------------------------------------------------------------
# torch-side volume access
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TorchVolume:
    """A volume plus its world-to-index map, staged for torch sampling."""

    vol: torch.Tensor  # (1, 1, D, H, W)
    index_linear: torch.Tensor  # (3, 3)
    index_shift: torch.Tensor  # (3,)


def as_torch_volume(img: ImageStack) -> TorchVolume:
    inv = geo.invert(img.affine)
    return TorchVolume(
        vol=torch.as_tensor(np.asarray(img.data).copy()).float()[None, None],
        index_linear=torch.as_tensor(inv.linear.copy()).float(),
        index_shift=torch.as_tensor(inv.translation.copy()).float(),
    )


def compose_view(tv: TorchVolume, world_transforms) -> TorchVolume:
    """View of a volume seen through per-item world transforms T.

    Sampling the view at x reads the underlying volume at T(x); used to
    present each training chain with its own affinely perturbed moving image.
    """
    base_lin = tv.index_linear.numpy().astype(np.float64)
    base_shift = tv.index_shift.numpy().astype(np.float64)
    lins, shifts = [], []
    for t in world_transforms:
        lins.append(base_lin @ t.linear)
        shifts.append(base_lin @ t.translation + base_shift)
    return TorchVolume(
        vol=tv.vol,
        index_linear=torch.as_tensor(np.stack(lins)).float(),
        index_shift=torch.as_tensor(np.stack(shifts)).float(),
    )


def sample_world(tv: TorchVolume, world: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Trilinear values at (B, d, h, w, 3) world-mm positions -> (B, d, h, w)."""
    if tv.index_linear.ndim == 3:  # per-item maps from compose_view
        b = world.shape[0]
        coords = torch.einsum("bij,bdhwj->bdhwi", tv.index_linear, world)
        coords = coords + tv.index_shift.reshape(b, 1, 1, 1, 3)
    else:
        coords = world @ tv.index_linear.T + tv.index_shift
    vol = tv.vol.expand(world.shape[0], -1, -1, -1, -1)
    return sample_volume(vol, coords, padding=padding)[:, 0]


# ---------------------------------------------------------------------------
# block state
# ---------------------------------------------------------------------------


@dataclass
class BlockState:
    """One batch of patch hierarchies at a common scale."""

    canvas: geo.Canvas
    patch_size: int
    chains: list  # per item: list[AffineTransform]
    x_f: torch.Tensor  # (B, P, P, P, 3) world mm
    d_in: torch.Tensor | None  # (B, P, P, P, 3) world mm, None at t=0
    t: int = 0

    def __post_init__(self):
        if self.d_in is not None and self.d_in.shape != self.x_f.shape:
            from .errors import ShapeMismatch

            raise ShapeMismatch(f"d_in {tuple(self.d_in.shape)} vs x_f {tuple(self.x_f.shape)}")

    @property
    def batch(self) -> int:
        return self.x_f.shape[0]

    def world_scalers(self) -> torch.Tensor:
        """(B, 3, 3) linear maps from patch-voxel displacements to mm."""
        mats = [geo.world_scaler(self.canvas, chain, self.patch_size).linear for chain in self.chains]
        return torch.as_tensor(np.stack(mats)).float()

    def voxel_sizes(self) -> torch.Tensor:
        """(B,) actual isotropic patch voxel size in mm."""
        vals = [geo.patch_voxel_size(self.canvas, chain, self.patch_size) for chain in self.chains]
        return torch.as_tensor(vals).float()


def _fields_from_chains(canvas, chains, patch_size) -> torch.Tensor:
    shape = (patch_size,) * 3
    fields = [geo.coordinate_field(geo.chain_transform(canvas, chain), shape) for chain in chains]
    return torch.as_tensor(np.stack(fields)).float()


def start_chains(
    canvas: geo.Canvas,
    centers_mm: np.ndarray,
    schedule: ScaleSchedule,
    aug: geo.AugmentationRanges,
    rng: np.random.Generator,
) -> BlockState:
    """Open one patch hierarchy per center at the coarsest scale."""
    centers_mm = np.atleast_2d(np.asarray(centers_mm, dtype=np.float64))
    chains = [
        [geo.initial_patch_transform(canvas, c, schedule.voxel_size_mm[0], schedule.patch_size, aug, rng)]
        for c in centers_mm
    ]
    x_f = _fields_from_chains(canvas, chains, schedule.patch_size)
    return BlockState(canvas=canvas, patch_size=schedule.patch_size, chains=chains, x_f=x_f, d_in=None, t=0)


def block_forward(state: BlockState, fixed: TorchVolume, moving: TorchVolume, head) -> torch.Tensor:
    """Run one scale: sample both patches, predict, convert to mm, accumulate."""
    x_m = state.x_f if state.d_in is None else state.x_f + state.d_in
    p_f = sample_world(fixed, state.x_f)
    p_m = sample_world(moving, x_m)
    d_local = head(p_f, p_m)
    t_w = state.world_scalers()
    d_out = torch.einsum("bij,bdhwj->bdhwi", t_w, d_local)
    if state.d_in is not None:
        d_out = d_out + state.d_in
    return d_out


def descend(
    state: BlockState,
    d_out: torch.Tensor,
    zoom: float,
    rng: np.random.Generator,
    centered: bool = False,
) -> BlockState:
    """Zoom every chain in by ``zoom`` and resample d_out onto the child grid."""
    p = state.patch_size
    if centered:
        nested = [geo.centered_nested_transform(zoom) for _ in range(state.batch)]
    else:
        nested = [geo.nested_patch_transform(p, zoom, rng) for _ in range(state.batch)]
    child_chains = [chain + [t_p] for chain, t_p in zip(state.chains, nested)]

    # child grid points expressed in the parent patch's fractional voxels
    r = geo.unit_grid((p, p, p))
    parent_coords = np.stack([t_p.apply(r) * p - 0.5 for t_p in nested])
    coords = torch.as_tensor(parent_coords).float()
    d_in = sample_volume(d_out.permute(0, 4, 1, 2, 3), coords, padding="border").permute(0, 2, 3, 4, 1)

    x_f = _fields_from_chains(state.canvas, child_chains, p)
    return BlockState(
        canvas=state.canvas, patch_size=p, chains=child_chains, x_f=x_f, d_in=d_in, t=state.t + 1
    )


def moved_coordinates(state: BlockState, d_out: torch.Tensor) -> torch.Tensor:
    """World positions X_moved = X_f + d_out, shape (B, P, P, P, 3) mm."""
    return state.x_f + d_out


def normalized_moved(state: BlockState, d_out: torch.Tensor) -> torch.Tensor:
    """X_moved scaled into patch-voxel units (identity map has |J| = 1)."""
    s = state.voxel_sizes().reshape(-1, 1, 1, 1, 1)
    return moved_coordinates(state, d_out) / s
