"""Affine algebra, world/array coordinate mapping, and patch transform chains.

Conventions used throughout the package:

* Affine matrices are 4x4 with the last row fixed to (0, 0, 0, 1). A point
  ``p`` (3-vector) maps to ``m[:3, :3] @ p + m[:3, 3]``. Translations are in
  millimetres.
* A volume's affine maps *array* indices (i, j, k) to world mm.
* The working canvas is the tight axis-aligned world bounding box of the
  fixed image. Canvas coordinates are normalized to [0, 1]^3; ``t_ref`` maps
  that unit cube onto the world box.
* Patch grids are cell-centered: voxel ``i`` of a patch with array size P
  sits at unit coordinate ``(i + 0.5) / P``, so a patch of world edge
  ``P * scale`` has voxel spacing exactly ``scale``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVolume, Singular

DET_EPS = 1e-12


@dataclass(frozen=True)
class AffineTransform:
    """4x4 affine with unit last row; immutable."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last row of an affine must be (0, 0, 0, 1)")
        if abs(np.linalg.det(m[:3, :3])) <= DET_EPS:
            raise Singular("affine has a singular linear part")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @property
    def linear(self) -> np.ndarray:
        return self.m[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.m[:3, 3]

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (..., 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.linear.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        """Map an (..., 3) array of displacement vectors (no translation)."""
        return np.asarray(vectors, dtype=np.float64) @ self.linear.T


def identity() -> AffineTransform:
    return AffineTransform(np.eye(4))


def from_linear(linear: np.ndarray, translation=(0.0, 0.0, 0.0)) -> AffineTransform:
    m = np.eye(4)
    m[:3, :3] = linear
    m[:3, 3] = translation
    return AffineTransform(m)


def translate(offset) -> AffineTransform:
    return from_linear(np.eye(3), offset)


def scale(factors) -> AffineTransform:
    factors = np.broadcast_to(np.asarray(factors, dtype=np.float64), (3,))
    return from_linear(np.diag(factors))


def rotation(angles_rad) -> AffineTransform:
    """Rotation about x, then y, then z (applied in that order)."""
    ax, ay, az = angles_rad
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return from_linear(rz @ ry @ rx)


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """Transform applying ``b`` first, then ``a``."""
    return AffineTransform(a.m @ b.m)


def invert(a: AffineTransform) -> AffineTransform:
    det = np.linalg.det(a.m[:3, :3])
    if abs(det) <= DET_EPS:
        raise Singular(f"cannot invert affine, |det|={abs(det):g}")
    return AffineTransform(np.linalg.inv(a.m))


def unit_grid(shape) -> np.ndarray:
    """Cell-centered unit coordinates for a patch grid, shape (*shape, 3)."""
    axes = [(np.arange(n) + 0.5) / n for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def coordinate_field(transform: AffineTransform, shape) -> np.ndarray:
    """Apply an affine to the cell-centered unit grid; shape (*shape, 3)."""
    return transform.apply(unit_grid(shape))


def voxel_field(transform: AffineTransform, shape) -> np.ndarray:
    """World positions of the integer voxel indices; shape (*shape, 3).

    Image/volume convention: voxel (i, j, k) sits at ``transform @ (i, j, k)``,
    unlike the cell-centered patch convention of :func:`coordinate_field`.
    """
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return transform.apply(idx)


@dataclass(frozen=True)
class Canvas:
    """Axis-aligned world bounding box of the fixed image.

    ``t_ref`` maps normalized canvas coordinates [0, 1]^3 to world mm;
    ``extent_mm`` is the box edge length per axis.
    """

    t_ref: AffineTransform
    extent_mm: np.ndarray

    @property
    def box_min(self) -> np.ndarray:
        return self.t_ref.translation

    @property
    def box_max(self) -> np.ndarray:
        return self.t_ref.translation + self.extent_mm

    @property
    def center(self) -> np.ndarray:
        return self.box_min + 0.5 * self.extent_mm


def make_canvas(fixed) -> Canvas:
    """Tight world bounding box of all eight array-corner voxels of ``fixed``."""
    shape = fixed.data.shape
    if min(shape) < 2:
        raise DegenerateVolume(f"volume shape {shape} too small for a canvas")
    corners = np.array(
        [[i, j, k] for i in (0, shape[0] - 1) for j in (0, shape[1] - 1) for k in (0, shape[2] - 1)],
        dtype=np.float64,
    )
    world = fixed.affine.apply(corners)
    box_min = world.min(axis=0)
    extent = world.max(axis=0) - box_min
    t_ref = AffineTransform(
        np.block([[np.diag(extent), box_min[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]])
    )
    return Canvas(t_ref=t_ref, extent_mm=extent)


@dataclass(frozen=True)
class AugmentationRanges:
    """Symmetric augmentation ranges; ``rot_deg=0`` and ``scale=(1, 1)`` disable."""

    rot_deg: float = 0.0
    scale_lo: float = 1.0
    scale_hi: float = 1.0
    shift_mm: float = 0.0

    @classmethod
    def disabled(cls) -> "AugmentationRanges":
        return cls()

    def draw_rotation(self, rng) -> AffineTransform:
        if self.rot_deg == 0.0:
            return identity()
        angles = np.deg2rad(rng.uniform(-self.rot_deg, self.rot_deg, size=3))
        return rotation(angles)

    def draw_scale(self, rng) -> float:
        if self.scale_lo == self.scale_hi:
            return self.scale_lo
        return float(rng.uniform(self.scale_lo, self.scale_hi))

    def draw_shift(self, rng) -> np.ndarray:
        if self.shift_mm == 0.0:
            return np.zeros(3)
        return rng.uniform(-self.shift_mm, self.shift_mm, size=3)


def world_augmentation(aug: AugmentationRanges, center, rng) -> AffineTransform:
    """Random rotation/scale about ``center`` plus a world shift (for the moving image)."""
    rot = aug.draw_rotation(rng)
    s = aug.draw_scale(rng)
    shift = aug.draw_shift(rng)
    center = np.asarray(center, dtype=np.float64)
    return compose(
        translate(center + shift),
        compose(rot, compose(scale(s), translate(-center))),
    )


def initial_patch_transform(
    canvas: Canvas,
    center_mm,
    scale0: float,
    patch_size: int,
    aug: AugmentationRanges,
    rng,
) -> AffineTransform:
    """Place the coarsest patch: unit patch cube -> canvas-normalized coords.

    The patch world edge is ``patch_size * scale0`` (times the drawn scale
    augmentation); rotation is drawn within the augmentation range. Patches
    are allowed to extend beyond the canvas; sampling handles out-of-bounds.
    """
    edge = patch_size * scale0 * aug.draw_scale(rng)
    rot = aug.draw_rotation(rng)
    # unit cube -> world: center + R @ (edge * (r - 0.5))
    world = compose(
        translate(np.asarray(center_mm, dtype=np.float64)),
        compose(compose(rot, scale(edge)), translate((-0.5, -0.5, -0.5))),
    )
    return compose(invert(canvas.t_ref), world)


def nested_patch_transform(patch_size: int, zoom: float, rng) -> AffineTransform:
    """Scale-and-shift mapping of the child patch into its parent (no rotation).

    The child image of the unit cube is ``zoom * [0,1]^3 + shift`` with the
    shift drawn uniformly from the set keeping the child inside the parent.
    """
    if not 0.0 < zoom <= 1.0:
        raise ValueError(f"zoom must be in (0, 1], got {zoom}")
    slack = 1.0 - zoom
    shift = rng.uniform(0.0, slack, size=3) if slack > 0 else np.zeros(3)
    return compose(translate(shift), scale(zoom))


def centered_nested_transform(zoom: float) -> AffineTransform:
    """Deterministic variant of :func:`nested_patch_transform` (child centered)."""
    shift = np.full(3, (1.0 - zoom) / 2.0)
    return compose(translate(shift), scale(zoom))


def chain_transform(canvas: Canvas, t_p_chain) -> AffineTransform:
    """Full mapping unit patch cube -> world mm for a patch transform chain."""
    out = canvas.t_ref
    for t_p in t_p_chain:
        out = compose(out, t_p)
    return out


def world_scaler(canvas: Canvas, t_p_chain, patch_size: int) -> AffineTransform:
    """Map patch-voxel displacements to world mm at the chain's scale.

    This is the linear part of ``t_ref . T_p0 . ... . T_pt`` divided by the
    patch array size, with zero translation: one patch voxel of displacement
    becomes one patch-voxel-size of world mm.
    """
    if not t_p_chain:
        raise ValueError("transform chain must be nonempty")
    full = chain_transform(canvas, t_p_chain)
    return from_linear(full.linear / patch_size)


def patch_voxel_size(canvas: Canvas, t_p_chain, patch_size: int) -> float:
    """Actual isotropic voxel size (mm) of the patch at the end of the chain."""
    lin = world_scaler(canvas, t_p_chain, patch_size).linear
    return float(np.cbrt(abs(np.linalg.det(lin))))
