"""Differentiable building blocks shared by the network heads and losses.

Everything here runs on CPU torch tensors. Sampling uses *fractional array
coordinates* (same convention as :mod:`patchreg.volumes`): coordinate ``i``
is the center of voxel ``i``. The conversion to ``grid_sample``'s normalized
space is kept in one place so the rest of the package never sees it.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"PRCKPT01"

_TORCH_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
}


def configure_threads(n: int | None = None) -> int:
    """Pin torch's CPU thread count (default: $PATCHREG_THREADS or 1)."""
    if n is None:
        n = int(os.environ.get("PATCHREG_THREADS", "1"))
    n = max(1, n)
    torch.set_num_threads(n)
    return n


def seed_all(seed: int) -> None:
    torch.manual_seed(seed)


def to_tensor(arr, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)


def base_grid(shape, dtype=torch.float32) -> torch.Tensor:
    """Integer voxel-coordinate grid, shape (*shape, 3)."""
    axes = [torch.arange(n, dtype=dtype) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)


def unit_patch_grid(patch_size: int, dtype=torch.float32) -> torch.Tensor:
    """Cell-centered unit-cube grid (i + 0.5)/P, shape (P, P, P, 3)."""
    return (base_grid((patch_size,) * 3, dtype=dtype) + 0.5) / patch_size


def sample_volume(vol: torch.Tensor, coords: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Trilinear sampling of (B, C, D, H, W) at array coords (B, d, h, w, 3).

    ``padding='zeros'`` reads past the boundary as zero; ``'border'`` clamps.
    Gradients flow to both the volume and the coordinates.
    """
    if vol.ndim != 5 or coords.ndim != 5 or coords.shape[-1] != 3:
        raise ValueError(f"expected (B,C,D,H,W) and (B,d,h,w,3), got {tuple(vol.shape)} and {tuple(coords.shape)}")
    if padding not in ("zeros", "border"):
        raise ValueError(f"unknown padding {padding!r}")
    sizes = torch.tensor(vol.shape[2:], dtype=coords.dtype)
    # grid_sample wants (x, y, z) = (W, H, D) order, normalized to [-1, 1]
    # with align_corners=True so that +-1 hits the centers of edge voxels.
    norm = 2.0 * coords / (sizes - 1.0).clamp(min=1.0) - 1.0
    grid = norm.flip(-1)
    return F.grid_sample(vol, grid, mode="bilinear", padding_mode=padding, align_corners=True)


def matrix_exp_approx(a: torch.Tensor, k: int = 10) -> torch.Tensor:
    """Approximate matrix exponential e^A as (I + A/k)^k, batched (..., 4, 4)."""
    if a.shape[-2:] != (4, 4):
        raise ValueError(f"expected (..., 4, 4), got {tuple(a.shape)}")
    eye = torch.eye(4, dtype=a.dtype).expand_as(a)
    return torch.linalg.matrix_power(eye + a / k, k)


def integrate_velocity(vel: torch.Tensor, steps: int = 7) -> torch.Tensor:
    """Scaling-and-squaring of a stationary velocity field (B, 3, D, H, W).

    The field is a displacement per unit time in voxel units of its own grid;
    the result is the displacement of the time-1 flow, same layout. Border
    clamping keeps the composition stable next to the patch boundary.
    """
    if vel.ndim != 5 or vel.shape[1] != 3:
        raise ValueError(f"expected (B, 3, D, H, W), got {tuple(vel.shape)}")
    disp = vel / (2.0**steps)
    grid = base_grid(vel.shape[2:], dtype=vel.dtype).unsqueeze(0)
    for _ in range(steps):
        coords = grid + disp.permute(0, 2, 3, 4, 1)
        disp = disp + sample_volume(disp, coords, padding="border")
    return disp


def normalize_instance(patch: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Zero-mean/unit-std per item and channel, for network input patches."""
    dims = tuple(range(2, patch.ndim))
    mean = patch.mean(dim=dims, keepdim=True)
    std = patch.std(dim=dims, unbiased=False, keepdim=True)
    return (patch - mean) / (std + eps)


def make_optimizer(params, lr: float, weight_decay: float = 1e-4) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def clip_gradients(params, max_norm: float = 2.0) -> float:
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors plus JSON metadata to a single binary file.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then the raw little-endian tensor payloads back to back in
    name-sorted order. Identical inputs produce identical bytes.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if arr.dtype.name not in _TORCH_DTYPES:
            arr = arr.astype(np.float32)
        blob = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns ({name: tensor}, meta)."""
    from .errors import ParseError

    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"not a checkpoint file: magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) < entry["nbytes"]:
            raise ParseError(f"checkpoint truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.as_tensor(arr.copy(), dtype=_TORCH_DTYPES[entry["dtype"]])
    return tensors, header["meta"]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_gradcheck(fn, inputs, rng: np.random.Generator, n_probes: int = 20, eps: float = 1e-5):
    """Compare autograd with central finite differences along random rays.

    ``fn(*inputs)`` must return a scalar tensor; inputs are float64 leaf
    tensors. For each probe a random unit direction ``u`` over all inputs is
    drawn and d/dt fn(x + t u) at t=0 is measured both ways. Returns the
    worst relative error.
    """
    leaves = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves)
    worst = 0.0
    for _ in range(n_probes):
        dirs = [torch.as_tensor(rng.standard_normal(tuple(t.shape))) for t in leaves]
        norm = torch.sqrt(sum((d * d).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
        plus = float(fn(*[(t + eps * d).detach() for t, d in zip(leaves, dirs)]))
        minus = float(fn(*[(t - eps * d).detach() for t, d in zip(leaves, dirs)]))
        numeric = (plus - minus) / (2.0 * eps)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst
