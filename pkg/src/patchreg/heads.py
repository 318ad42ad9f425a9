"""Displacement-predicting networks: affine encoder and dense U-Net.

Both heads take a fixed and a moving patch, instance-normalize each, and
return a per-voxel displacement in patch voxel units. Final layers are
zero-initialized so a fresh head is exactly the identity map. Convolutions
follow a pre-activation layout: BatchNorm -> LeakyReLU(0.01) -> Conv3d.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .diffcore import integrate_velocity, matrix_exp_approx, normalize_instance, unit_patch_grid
from .errors import ShapeMismatch


@dataclass(frozen=True)
class HeadConfig:
    """Which network to build for one scale group of the cascade."""

    kind: str
    patch_size: int
    group: int = 0
    base_width: int = 16

    def __post_init__(self):
        if self.kind not in ("affine", "dense"):
            raise ValueError(f"head kind must be 'affine' or 'dense', got {self.kind!r}")
        levels = 3 if self.kind == "affine" else 2
        if self.patch_size // (2**levels) < 2:
            raise ValueError(
                f"patch_size {self.patch_size} leaves a bottleneck below 2 voxels for a {self.kind} head"
            )


def _block(c_in: int, c_out: int, stride: int = 1, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.BatchNorm3d(c_in),
        nn.LeakyReLU(0.01),
        nn.Conv3d(c_in, c_out, kernel, stride=stride, padding=kernel // 2),
    )


def _check_pair(p_f: torch.Tensor, p_m: torch.Tensor, patch_size: int):
    if p_f.shape != p_m.shape:
        raise ShapeMismatch(f"patch shapes differ: {tuple(p_f.shape)} vs {tuple(p_m.shape)}")
    if p_f.ndim == 3:
        p_f, p_m = p_f.unsqueeze(0), p_m.unsqueeze(0)
    if p_f.shape[1:] != (patch_size,) * 3:
        raise ShapeMismatch(f"expected {patch_size}^3 patches, got {tuple(p_f.shape[1:])}")
    return p_f, p_m


def _stack_inputs(p_f: torch.Tensor, p_m: torch.Tensor) -> torch.Tensor:
    both = torch.stack([p_f, p_m], dim=1)
    return normalize_instance(both)


class AffineHead(nn.Module):
    """Encoder to 12 pose parameters, mapped through a damped matrix exponential.

    The parameters form the top three rows of a 4x4 matrix A. The linear part
    of the displacement comes from the 3x3 block of exp(0.25 A); the raw
    translation parameters enter directly with a factor of 0.1. On the
    cell-centered unit patch grid the displacement is

        f(r) = T (r - 0.5) + 0.5 + 0.1 tau - r,

    scaled by ``patch_size`` into voxel units.
    """

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        if cfg.kind != "affine":
            raise ValueError("AffineHead requires an affine config")
        self.patch_size = cfg.patch_size
        w = cfg.base_width
        self.stem = nn.Conv3d(2, w, 3, padding=1)
        self.down1 = _block(w, 2 * w, stride=2)
        self.down2 = _block(2 * w, 4 * w, stride=2)
        self.down3 = _block(4 * w, 4 * w, stride=2)
        self.fc = nn.Linear(4 * w, 12)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def pose_parameters(self, p_f: torch.Tensor, p_m: torch.Tensor) -> torch.Tensor:
        """The raw (B, 3, 4) parameter block A."""
        p_f, p_m = _check_pair(p_f, p_m, self.patch_size)
        x = _stack_inputs(p_f, p_m)
        x = self.down3(self.down2(self.down1(self.stem(x))))
        return self.fc(x.mean(dim=(2, 3, 4))).reshape(-1, 3, 4)

    def displacement_from_pose(self, a: torch.Tensor) -> torch.Tensor:
        """(B, 3, 4) parameters -> (B, P, P, P, 3) voxel displacement."""
        batch = a.shape[0]
        a4 = torch.zeros(batch, 4, 4, dtype=a.dtype, device=a.device)
        a4[:, :3, :] = a
        t = matrix_exp_approx(0.25 * a4)[:, :3, :3]
        tau = a[:, :, 3]
        r = unit_patch_grid(self.patch_size, dtype=a.dtype).reshape(1, -1, 3)
        moved = (r - 0.5) @ t.transpose(1, 2) + 0.5 + 0.1 * tau.unsqueeze(1)
        d = (moved - r) * self.patch_size
        p = self.patch_size
        return d.reshape(batch, p, p, p, 3)

    def forward(self, p_f: torch.Tensor, p_m: torch.Tensor) -> torch.Tensor:
        return self.displacement_from_pose(self.pose_parameters(p_f, p_m))


class DenseHead(nn.Module):
    """Two-level U-Net emitting a velocity field, integrated to a displacement.

    Skip connections concatenate encoder features onto nearest-upsampled
    decoder features; the final kernel-size-1 convolution maps to three
    velocity channels and starts at zero.
    """

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        if cfg.kind != "dense":
            raise ValueError("DenseHead requires a dense config")
        self.patch_size = cfg.patch_size
        w = cfg.base_width
        self.stem = nn.Conv3d(2, w, 3, padding=1)
        self.down1 = _block(w, 2 * w, stride=2)
        self.down2 = _block(2 * w, 4 * w, stride=2)
        self.up1 = _block(4 * w + 2 * w, 2 * w)
        self.up0 = _block(2 * w + w, w)
        self.flow = nn.Conv3d(w, 3, 1)
        nn.init.zeros_(self.flow.weight)
        nn.init.zeros_(self.flow.bias)

    def velocity(self, p_f: torch.Tensor, p_m: torch.Tensor) -> torch.Tensor:
        p_f, p_m = _check_pair(p_f, p_m, self.patch_size)
        x0 = self.stem(_stack_inputs(p_f, p_m))
        x1 = self.down1(x0)
        x2 = self.down2(x1)
        up = nn.functional.interpolate(x2, scale_factor=2, mode="nearest")
        y1 = self.up1(torch.cat([up, x1], dim=1))
        up = nn.functional.interpolate(y1, scale_factor=2, mode="nearest")
        y0 = self.up0(torch.cat([up, x0], dim=1))
        return self.flow(y0)

    def forward(self, p_f: torch.Tensor, p_m: torch.Tensor) -> torch.Tensor:
        vel = self.velocity(p_f, p_m)
        disp = integrate_velocity(vel, steps=7)
        return disp.permute(0, 2, 3, 4, 1)


def make_head(cfg: HeadConfig) -> nn.Module:
    return AffineHead(cfg) if cfg.kind == "affine" else DenseHead(cfg)


def head_state(head: nn.Module, group: int) -> dict:
    """Flatten a head's parameters/buffers for the checkpoint container."""
    out = {}
    for name, tensor in head.state_dict().items():
        if name.endswith("num_batches_tracked"):
            tensor = tensor.to(torch.int64)
        out[f"head/{group}/{name}"] = tensor
    return out


def load_head_state(head: nn.Module, tensors: dict, group: int) -> None:
    prefix = f"head/{group}/"
    state = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = set(head.state_dict()) - set(state)
    if missing:
        raise KeyError(f"checkpoint lacks tensors for group {group}: {sorted(missing)[:3]}...")
    head.load_state_dict({k: v.to(head.state_dict()[k].dtype) for k, v in state.items()})


def parameter_count(heads) -> int:
    return sum(p.numel() for h in heads for p in h.parameters())
