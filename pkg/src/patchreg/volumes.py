"""Volume containers, resampling, patch extraction, and synthetic cases.

An :class:`ImageStack` is a scalar 3D array plus the 4x4 array-to-world
affine; array index ``(i, j, k)`` sits at world position ``A @ (i, j, k, 1)``.
Sampling is trilinear with out-of-bounds reads returning zero unless border
clamping is requested. Label volumes use nearest-neighbour reads.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import nifti
from .errors import EmptyImage, ShapeMismatch, UnsupportedDatatype
from .geometry import AffineTransform, invert


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageStack:
    """Scalar intensity volume with its array-to-world affine."""

    data: np.ndarray
    affine: AffineTransform

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatch(f"image data must be 3D, got shape {data.shape}")
        object.__setattr__(self, "data", _freeze(data.astype(np.float32, copy=False)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def spacing(self) -> np.ndarray:
        """Column norms of the linear part: per-axis voxel size in mm."""
        return np.linalg.norm(self.affine.linear, axis=0)

    def center_world(self) -> np.ndarray:
        """World position of the array-center index (n-1)/2."""
        mid = (np.asarray(self.shape, dtype=np.float64) - 1.0) / 2.0
        return self.affine.apply(mid)

    def to_index(self, world: np.ndarray) -> np.ndarray:
        return invert(self.affine).apply(world)


@dataclass(frozen=True)
class LabelVolume:
    """Integer label volume with its array-to-world affine."""

    data: np.ndarray
    affine: AffineTransform

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatch(f"label data must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            raise UnsupportedDatatype(f"labels must be integer, got {data.dtype}")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Patch:
    """Cube of intensities resampled from an image at a given voxel size."""

    data: np.ndarray
    voxel_size_mm: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        s = data.shape
        if data.ndim != 3 or len(set(s)) != 1:
            raise ShapeMismatch(f"patch must be a cube, got shape {s}")
        if not self.voxel_size_mm > 0:
            raise ValueError(f"voxel_size_mm must be positive, got {self.voxel_size_mm}")
        object.__setattr__(self, "data", _freeze(data))


@dataclass(frozen=True)
class DisplacementField:
    """Grid of world-space displacement vectors (mm), channels last."""

    data: np.ndarray
    affine: AffineTransform

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise ShapeMismatch(f"displacement field must be (D,H,W,3), got {data.shape}")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[:3]


def trilinear_sample(data: np.ndarray, coords: np.ndarray, mode: str = "zero") -> np.ndarray:
    """Trilinear interpolation of ``data`` at fractional array coordinates.

    ``coords`` has shape (..., 3). ``mode='zero'`` reads outside the array as
    zero; ``mode='border'`` clamps coordinates to the boundary. Works for
    scalar volumes (D,H,W) and channels-last fields (D,H,W,C).
    """
    data = np.asarray(data)
    scalar = data.ndim == 3
    vol = data[..., None] if scalar else data
    coords = np.asarray(coords, dtype=np.float64)
    flat = coords.reshape(-1, 3)
    shape = np.asarray(vol.shape[:3])

    if mode == "border":
        flat = np.clip(flat, 0.0, (shape - 1).astype(np.float64))
    elif mode != "zero":
        raise ValueError(f"unknown mode {mode!r}")

    base = np.floor(flat).astype(np.int64)
    frac = flat - base
    out = np.zeros((flat.shape[0], vol.shape[3]), dtype=np.float64)
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + offs
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
        if mode == "border":
            idx = np.clip(idx, 0, shape - 1)
            valid = slice(None)
            out += w[:, None] * vol[idx[:, 0], idx[:, 1], idx[:, 2]]
        else:
            valid = np.all((idx >= 0) & (idx < shape), axis=1)
            if np.any(valid):
                iv = idx[valid]
                out[valid] += w[valid, None] * vol[iv[:, 0], iv[:, 1], iv[:, 2]]
    out = out.reshape(coords.shape[:-1] + (vol.shape[3],))
    return out[..., 0] if scalar else out


def nearest_sample(data: np.ndarray, coords: np.ndarray, fill=0) -> np.ndarray:
    """Nearest-neighbour lookup at fractional array coordinates (labels)."""
    data = np.asarray(data)
    coords = np.asarray(coords, dtype=np.float64)
    flat = coords.reshape(-1, 3)
    idx = np.rint(flat).astype(np.int64)
    shape = np.asarray(data.shape[:3])
    valid = np.all((idx >= 0) & (idx < shape), axis=1)
    out = np.full(flat.shape[0], fill, dtype=data.dtype)
    iv = idx[valid]
    out[valid] = data[iv[:, 0], iv[:, 1], iv[:, 2]]
    return out.reshape(coords.shape[:-1])


def sample_at_world(img: ImageStack, world: np.ndarray, mode: str = "zero") -> np.ndarray:
    """Trilinear intensities at world positions (mm), shape (...,3) -> (...)."""
    return trilinear_sample(img.data, img.to_index(world), mode=mode)


def extract_patch(img: ImageStack, world_grid: np.ndarray) -> Patch:
    """Resample a patch whose voxel world positions are ``world_grid`` (P,P,P,3)."""
    world_grid = np.asarray(world_grid, dtype=np.float64)
    if world_grid.ndim != 4 or world_grid.shape[-1] != 3:
        raise ShapeMismatch(f"world grid must be (P,P,P,3), got {world_grid.shape}")
    step = world_grid[1, 0, 0] - world_grid[0, 0, 0]
    voxel = float(np.linalg.norm(step))
    values = sample_at_world(img, world_grid)
    return Patch(values.astype(np.float32), voxel)


def sample_patch_centers(
    img: ImageStack,
    n: int,
    rng: np.random.Generator,
    fg_fraction: float = 2.0 / 3.0,
) -> np.ndarray:
    """Draw ``n`` world-space patch centers, foreground-weighted.

    With probability ``fg_fraction`` a center is drawn with probability
    proportional to (clipped-positive) intensity; otherwise uniformly over
    zero-intensity background voxels. When one of the two pools is empty all
    draws come from the other; an all-zero image raises ``EmptyImage``.
    """
    data = np.asarray(img.data, dtype=np.float64)
    sal = np.clip(data, 0.0, None).reshape(-1)
    total = sal.sum()
    bg = np.flatnonzero(data.reshape(-1) <= 0.0)
    if total <= 0.0 and bg.size == data.size:
        raise EmptyImage("cannot place patches: image has no positive intensity")

    if total <= 0.0:
        take_fg = np.zeros(n, dtype=bool)
    elif bg.size == 0:
        take_fg = np.ones(n, dtype=bool)
    else:
        take_fg = rng.random(n) < fg_fraction

    flat_idx = np.empty(n, dtype=np.int64)
    n_fg = int(take_fg.sum())
    if n_fg:
        p = sal / total
        flat_idx[take_fg] = rng.choice(data.size, size=n_fg, p=p)
    if n - n_fg:
        flat_idx[~take_fg] = rng.choice(bg, size=n - n_fg)

    ijk = np.stack(np.unravel_index(flat_idx, data.shape), axis=-1).astype(np.float64)
    ijk += rng.uniform(-0.5, 0.5, size=ijk.shape)  # continuous placement within the voxel
    return img.affine.apply(ijk)


def center_at_origin(img: ImageStack) -> ImageStack:
    """Shift the affine so the array-center voxel lands at world (0,0,0)."""
    shift = -img.center_world()
    m = img.affine.m.copy()
    m[:3, 3] += shift
    return replace(img, affine=AffineTransform(m))


def align_centers(moving: ImageStack, fixed: ImageStack) -> tuple[ImageStack, np.ndarray]:
    """Translate ``moving`` so both array centers coincide; returns the shift (mm)."""
    shift = fixed.center_world() - moving.center_world()
    m = moving.affine.m.copy()
    m[:3, 3] += shift
    return replace(moving, affine=AffineTransform(m)), shift


def mirror_lr(img: ImageStack) -> ImageStack:
    """Mirror about the world y-z plane through the volume center.

    The array axis most aligned with world x is flipped so the stored data
    stays approximately in its original orientation; the affine absorbs the
    exact reflection.
    """
    axis = int(np.argmax(np.abs(img.affine.linear[0, :])))
    n = img.shape[axis]
    flip = np.eye(4)
    flip[axis, axis] = -1.0
    flip[axis, 3] = n - 1.0
    cx = img.center_world()[0]
    mirror = np.eye(4)
    mirror[0, 0] = -1.0
    mirror[0, 3] = 2.0 * cx
    new_matrix = mirror @ img.affine.m @ flip
    return ImageStack(np.flip(img.data, axis=axis).copy(), AffineTransform(new_matrix))


def crop_zeros(img: ImageStack, margin: int = 0) -> ImageStack:
    """Crop to the bounding box of positive intensities (optionally padded)."""
    pos = img.data > 0
    if not pos.any():
        raise EmptyImage("cannot crop: image has no positive intensity")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        prof = pos.any(axis=other)
        nz = np.flatnonzero(prof)
        lo.append(max(int(nz[0]) - margin, 0))
        hi.append(min(int(nz[-1]) + 1 + margin, img.shape[axis]))
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    m = img.affine.m.copy()
    m[:3, 3] += img.affine.linear @ np.asarray(lo, dtype=np.float64)
    return ImageStack(img.data[sl].copy(), AffineTransform(m))


def load_image(path) -> ImageStack:
    data, affine = _load_any(path)
    if data.ndim != 3:
        raise ShapeMismatch(f"expected a scalar 3D image at {path}, got shape {data.shape}")
    return ImageStack(np.asarray(data, dtype=np.float32), AffineTransform(affine))


def load_labels(path) -> LabelVolume:
    data, affine = _load_any(path)
    if data.ndim != 3:
        raise ShapeMismatch(f"expected a 3D label volume at {path}, got shape {data.shape}")
    if not np.issubdtype(data.dtype, np.integer):
        rounded = np.rint(data)
        if not np.allclose(data, rounded, atol=1e-3):
            raise UnsupportedDatatype(f"label volume at {path} has non-integer values")
        data = rounded.astype(np.int16)
    return LabelVolume(np.ascontiguousarray(data), AffineTransform(affine))


def load_field(path) -> DisplacementField:
    data, affine = _load_any(path)
    if data.ndim != 4 or data.shape[-1] != 3:
        raise ShapeMismatch(f"expected a (D,H,W,3) field at {path}, got shape {data.shape}")
    return DisplacementField(np.asarray(data, dtype=np.float32), AffineTransform(affine))


def save_image(path, img: ImageStack) -> None:
    _save_any(path, np.asarray(img.data, dtype=np.float32), img.affine.m)


def save_labels(path, lab: LabelVolume) -> None:
    data = lab.data
    if data.min() >= 0 and data.max() < 256:
        data = data.astype(np.uint8)
    else:
        data = data.astype(np.int16)
    _save_any(path, data, lab.affine.m)


def save_field(path, field: DisplacementField) -> None:
    _save_any(path, np.asarray(field.data, dtype=np.float32), field.affine.m)


def _load_any(path) -> tuple[np.ndarray, np.ndarray]:
    p = str(path)
    if p.endswith(".nii"):
        return nifti.read_nifti(path)
    if p.endswith(".json"):
        return nifti.read_raw_json(path)
    raise UnsupportedDatatype(f"unknown volume format for {path} (use .nii or .json)")


def _save_any(path, data: np.ndarray, affine: np.ndarray) -> None:
    p = str(path)
    if p.endswith(".nii"):
        nifti.write_nifti(path, data, affine)
    elif p.endswith(".json"):
        nifti.write_raw_json(path, data, affine)
    else:
        raise UnsupportedDatatype(f"unknown volume format for {path} (use .nii or .json)")


# ---------------------------------------------------------------------------
# Synthetic cases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthCase:
    fixed: ImageStack
    moving: ImageStack
    fixed_labels: LabelVolume
    moving_labels: LabelVolume
    true_field: DisplacementField


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    noise = gaussian_filter(rng.standard_normal(shape), sigma, mode="nearest")
    peak = np.abs(noise).max()
    return noise / peak if peak > 0 else noise


def _integrate_numpy(velocity: np.ndarray, steps: int = 7) -> np.ndarray:
    """Scaling-and-squaring of a voxel-space stationary velocity field."""
    disp = velocity / float(2**steps)
    shape = velocity.shape[:3]
    grid = np.stack(
        np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), axis=-1
    )
    for _ in range(steps):
        disp = disp + trilinear_sample(disp, grid + disp, mode="border")
    return disp


def _min_jacobian(disp: np.ndarray) -> float:
    """Smallest central-difference Jacobian determinant of x + disp (voxels)."""
    grads = []
    for axis in range(3):
        g = np.gradient(disp[..., 0], axis=axis), np.gradient(disp[..., 1], axis=axis), np.gradient(disp[..., 2], axis=axis)
        grads.append(np.stack(g, axis=-1))
    jac = np.stack(grads, axis=-1)  # (...,3 comp, 3 axis): d disp_c / d axis
    jac = jac + np.eye(3)
    det = np.linalg.det(jac[2:-2, 2:-2, 2:-2])
    return float(det.min())


def synth_case(
    seed: int,
    size: int = 64,
    spacing: float = 1.0,
    n_labels: int = 5,
    warp_voxels: float = 5.0,
) -> SynthCase:
    """Build a deterministic synthetic registration pair with known truth.

    A smooth multi-lobe blob with texture serves as the moving image; the
    fixed image is the same scene resampled through a random diffeomorphic
    warp (integrated smoothed-noise velocity, amplitude reduced until the
    minimum Jacobian determinant stays above 0.2). The returned field is the
    exact fixed-to-moving displacement in mm on the fixed grid; labels are
    quantile regions of a smooth scalar carried through the same warp.
    """
    rng = np.random.default_rng(seed)
    shape = (size, size, size)

    # Scene: ellipsoidal envelope plus smooth texture, zero background.
    coords = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    center = (np.asarray(shape) - 1.0) / 2.0
    radii = (np.asarray(shape) / 2.0 - 2.0) * rng.uniform(0.75, 0.95, size=3)
    r2 = np.sum(((coords - center) / radii) ** 2, axis=-1)
    envelope = np.clip(1.0 - r2, 0.0, None)
    lumps = _smooth_noise(rng, shape, size / 8.0)
    body = envelope * (1.0 + 0.6 * lumps)
    fg = body > 0.15
    texture = 0.5 * (_smooth_noise(rng, shape, size / 24.0) + 1.0)
    base = np.where(fg, (0.35 + 0.65 * texture) * np.clip(body, 0.0, 1.5), 0.0)
    base = base.astype(np.float64)

    # Label scaffold: quantile regions of an independent smooth scalar.
    region_field = gaussian_filter(rng.standard_normal(shape), size / 10.0, mode="nearest")
    labels = np.zeros(shape, dtype=np.int16)
    if fg.any() and n_labels > 0:
        qs = np.quantile(region_field[fg], np.linspace(0, 1, n_labels + 1)[1:-1])
        inside = np.digitize(region_field, qs) + 1
        labels = np.where(fg, inside, 0).astype(np.int16)

    # Random diffeomorphic warp u (voxels) on the fixed grid.
    if warp_voxels > 0:
        vel = np.zeros(shape + (3,))
        for octave, weight in ((size / 5.0, 1.0), (size / 10.0, 0.5), (size / 20.0, 0.25)):
            for c in range(3):
                vel[..., c] += weight * _smooth_noise(rng, shape, octave)
        rms = np.sqrt(np.mean(np.sum(vel**2, axis=-1)))
        vel *= warp_voxels / max(rms, 1e-12)
        disp = _integrate_numpy(vel)
        for _ in range(20):
            if _min_jacobian(disp) > 0.2:
                break
            vel *= 0.85
            disp = _integrate_numpy(vel)
    else:
        disp = np.zeros(shape + (3,))

    # Fixed image/labels: the scene carried through the warp. The moving
    # image is the untouched scene, so the true fixed->moving displacement
    # at fixed voxel r is exactly u(r).
    grid = coords.astype(np.float64)
    warped = grid + disp
    fixed_data = trilinear_sample(base, warped, mode="zero").astype(np.float32)
    fixed_labels = nearest_sample(labels, warped).astype(np.int16)

    affine = AffineTransform(np.diag([spacing, spacing, spacing, 1.0]))
    true_mm = (disp * spacing).astype(np.float32)
    return SynthCase(
        fixed=ImageStack(fixed_data, affine),
        moving=ImageStack(base.astype(np.float32), affine),
        fixed_labels=LabelVolume(fixed_labels, affine),
        moving_labels=LabelVolume(labels, affine),
        true_field=DisplacementField(true_mm, affine),
    )
