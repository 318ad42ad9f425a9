"""Similarity terms (NCC, mutual information) and deformation regularizers.

All functions take batched tensors: intensities as (B, D, H, W) and moved
coordinate fields as (B, D, H, W, 3) in *voxel units of the patch grid*
(one unit = one patch voxel), which makes the Jacobian of the identity map
exactly 1 regardless of scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .diffcore import base_grid

_VAR_EPS = 1e-12


@dataclass
class LossConfig:
    """Weights and constants for the training objective.

    ``similarity='ncc'`` combines global and windowed NCC 1:1;
    ``similarity='mi'`` swaps in global and sub-cube mutual information
    weighted 0.5/0.5. Bending and hinge weights apply in both modes.
    """

    similarity: str = "ncc"
    w_global: float = 1.0
    w_local: float = 1.0
    w_bending: float = 1e-2
    w_hinge: float = 1.0
    local_ncc_kernel: int = 9
    mi_bins: int = 32
    mi_sigma_scale: float = 1.0
    mi_subcube: int = 8
    hinge_t: float = 0.5
    hinge_w: float = 1000.0

    def __post_init__(self):
        if self.similarity not in ("ncc", "mi"):
            raise ValueError(f"similarity must be 'ncc' or 'mi', got {self.similarity!r}")
        for name in ("w_global", "w_local", "w_bending", "w_hinge"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.local_ncc_kernel % 2 != 1:
            raise ValueError("local NCC kernel must be odd")

    @classmethod
    def mutual_info(cls, **kw) -> "LossConfig":
        kw.setdefault("w_global", 0.5)
        kw.setdefault("w_local", 0.5)
        return cls(similarity="mi", **kw)


def _flatten_items(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.reshape(x.shape[0], -1)


def ncc_global(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pearson correlation per item, averaged over the batch.

    Items where either side has zero variance contribute 0.
    """
    fa, fb = _flatten_items(a), _flatten_items(b)
    fa = fa - fa.mean(dim=1, keepdim=True)
    fb = fb - fb.mean(dim=1, keepdim=True)
    cov = (fa * fb).mean(dim=1)
    var = fa.pow(2).mean(dim=1) * fb.pow(2).mean(dim=1)
    ncc = cov / torch.sqrt(var.clamp(min=_VAR_EPS**2))
    ncc = torch.where(var > _VAR_EPS**2, ncc, torch.zeros_like(ncc))
    return ncc.mean()


def ncc_local(a: torch.Tensor, b: torch.Tensor, kernel: int = 9) -> torch.Tensor:
    """Mean windowed NCC over all fully contained kernel^3 windows.

    Windows where either image is constant count as 0 toward the mean.
    """
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    a5, b5 = a.unsqueeze(1), b.unsqueeze(1)
    if min(a.shape[1:]) < kernel:
        raise ValueError(f"patch {tuple(a.shape[1:])} smaller than NCC kernel {kernel}")

    def win_mean(x):
        return F.avg_pool3d(x, kernel, stride=1)

    ma, mb = win_mean(a5), win_mean(b5)
    va = win_mean(a5 * a5) - ma * ma
    vb = win_mean(b5 * b5) - mb * mb
    cov = win_mean(a5 * b5) - ma * mb
    var = va.clamp(min=0.0) * vb.clamp(min=0.0)
    ncc = cov / torch.sqrt(var.clamp(min=_VAR_EPS**2))
    ncc = torch.where(var > _VAR_EPS**2, ncc, torch.zeros_like(ncc))
    return ncc.mean()


def _soft_bin_weights(x: torch.Tensor, bins: int, sigma_scale: float) -> torch.Tensor:
    """Parzen-window soft assignment of values to equal-width bins.

    ``x`` is (B, N) and gets min-max normalized per item; the Gaussian kernel
    width is ``sigma_scale`` bin widths. Rows of the result sum to 1.
    """
    lo = x.amin(dim=1, keepdim=True)
    hi = x.amax(dim=1, keepdim=True)
    xn = (x - lo) / (hi - lo).clamp(min=1e-8)
    centers = (torch.arange(bins, dtype=x.dtype) + 0.5) / bins
    sigma = sigma_scale / bins
    w = torch.exp(-0.5 * ((xn.unsqueeze(-1) - centers) / sigma) ** 2)
    return w / w.sum(dim=-1, keepdim=True).clamp(min=1e-30)


def mi_global(
    a: torch.Tensor, b: torch.Tensor, bins: int = 32, sigma_scale: float = 1.0
) -> torch.Tensor:
    """Soft-binned mutual information (nats) per item, batch mean."""
    fa, fb = _flatten_items(a), _flatten_items(b)
    wa = _soft_bin_weights(fa, bins, sigma_scale)
    wb = _soft_bin_weights(fb, bins, sigma_scale)
    n = fa.shape[1]
    p_ab = torch.einsum("bni,bnj->bij", wa, wb) / n
    p_a = p_ab.sum(dim=2)
    p_b = p_ab.sum(dim=1)
    eps = 1e-10
    mi = p_ab * (torch.log(p_ab + eps) - torch.log(p_a.unsqueeze(2) + eps) - torch.log(p_b.unsqueeze(1) + eps))
    return mi.sum(dim=(1, 2)).mean()


def mi_local(
    a: torch.Tensor, b: torch.Tensor, sub: int = 8, bins: int = 32, sigma_scale: float = 1.0
) -> torch.Tensor:
    """MI averaged over non-overlapping sub^3 sub-cubes of the patch."""
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    d, h, w = a.shape[1:]
    if d % sub or h % sub or w % sub:
        raise ValueError(f"patch {(d, h, w)} not divisible into {sub}^3 sub-cubes")

    def cubes(x):
        bsz = x.shape[0]
        x = x.reshape(bsz, d // sub, sub, h // sub, sub, w // sub, sub)
        return x.permute(0, 1, 3, 5, 2, 4, 6).reshape(-1, sub, sub, sub)

    return mi_global(cubes(a), cubes(b), bins=bins, sigma_scale=sigma_scale)


def _second_differences(u: torch.Tensor):
    """Pure and mixed second differences of (B, D, H, W, 3) on the interior."""

    def ax(x, axis, lo, hi):
        idx = [slice(None)] * 5
        idx[axis] = slice(lo, hi if hi != 0 else None)
        return x[tuple(idx)]

    pure = []
    for axis in (1, 2, 3):
        pure.append(ax(u, axis, 2, 0) - 2.0 * ax(u, axis, 1, -1) + ax(u, axis, 0, -2))
    mixed = []
    for a_ax, b_ax in ((1, 2), (1, 3), (2, 3)):
        d_a = (ax(u, a_ax, 2, 0) - ax(u, a_ax, 0, -2)) / 2.0
        mixed.append((ax(d_a, b_ax, 2, 0) - ax(d_a, b_ax, 0, -2)) / 2.0)
    return pure, mixed


def bending_energy(x_moved: torch.Tensor) -> torch.Tensor:
    """Mean squared second-order differences of the displacement field.

    ``x_moved`` is (B, D, H, W, 3) in voxel units; the identity grid carries
    no curvature, so working on displacement or on the field itself is
    equivalent — displacement keeps the arithmetic well conditioned. Pure
    terms enter once, mixed terms twice.
    """
    if x_moved.ndim == 4:
        x_moved = x_moved.unsqueeze(0)
    u = x_moved - base_grid(x_moved.shape[1:4], dtype=x_moved.dtype)
    pure, mixed = _second_differences(u)
    return sum(p.pow(2).mean() for p in pure) + 2.0 * sum(m.pow(2).mean() for m in mixed)


def _spatial_gradients(phi: torch.Tensor):
    """d phi / d axis via central differences, one-sided on the faces."""
    grads = []
    for axis in (1, 2, 3):
        idx_p = [slice(None)] * 5
        idx_m = [slice(None)] * 5
        n = phi.shape[axis]
        arange = torch.arange(n)
        plus = torch.clamp(arange + 1, max=n - 1)
        minus = torch.clamp(arange - 1, min=0)
        step = (plus - minus).to(phi.dtype)
        idx_p[axis] = plus
        idx_m[axis] = minus
        diff = phi[tuple(idx_p)] - phi[tuple(idx_m)]
        shape = [1] * 5
        shape[axis] = n
        grads.append(diff / step.reshape(shape))
    return grads


def jacobian_determinant(phi: torch.Tensor) -> torch.Tensor:
    """Per-voxel |J| of a (B, D, H, W, 3) map in voxel units."""
    if phi.ndim == 4:
        phi = phi.unsqueeze(0)
    gx, gy, gz = _spatial_gradients(phi)
    det = (
        gx[..., 0] * (gy[..., 1] * gz[..., 2] - gy[..., 2] * gz[..., 1])
        - gy[..., 0] * (gx[..., 1] * gz[..., 2] - gx[..., 2] * gz[..., 1])
        + gz[..., 0] * (gx[..., 1] * gy[..., 2] - gx[..., 2] * gy[..., 1])
    )
    return det


def jacobian_hinge(x_moved: torch.Tensor, t: float = 0.5, w: float = 1000.0) -> torch.Tensor:
    """Fold penalty: relu(-w(|J|-t)) per voxel, per-item max, batch mean."""
    det = jacobian_determinant(x_moved)
    per_voxel = F.relu(-w * (det - t))
    per_item = per_voxel.reshape(per_voxel.shape[0], -1).max(dim=1).values
    return per_item.mean()


def loss_terms(
    fixed: torch.Tensor, moved: torch.Tensor, x_moved: torch.Tensor, cfg: LossConfig
) -> dict:
    """All weighted objective terms plus their sum under ``total``."""
    if cfg.similarity == "ncc":
        g = -ncc_global(fixed, moved)
        l = -ncc_local(fixed, moved, cfg.local_ncc_kernel)
    else:
        g = -mi_global(fixed, moved, cfg.mi_bins, cfg.mi_sigma_scale)
        l = -mi_local(fixed, moved, cfg.mi_subcube, cfg.mi_bins, cfg.mi_sigma_scale)
    terms = {
        "global_sim": cfg.w_global * g,
        "local_sim": cfg.w_local * l,
        "bending": cfg.w_bending * bending_energy(x_moved),
        "hinge": cfg.w_hinge * jacobian_hinge(x_moved, cfg.hinge_t, cfg.hinge_w),
    }
    terms["total"] = sum(terms.values())
    return terms
