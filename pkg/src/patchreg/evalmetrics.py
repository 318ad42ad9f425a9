"""Registration quality metrics: label overlap and field regularity.

Dice is computed per label over a shared grid (background label 0 is not
scored). Jacobian statistics describe the moved coordinate field X + D(X):
the fraction of foreground voxels with a non-positive determinant measures
folding, and the median determinant measures volume distortion (1 = none).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import volumes as vol
from .errors import ShapeMismatch
from .inference import GlobalDDF


@dataclass(frozen=True)
class DiceScores:
    per_label: dict
    avg: float
    min: float


@dataclass(frozen=True)
class JacobianReport:
    frac_nonpositive: float  # percent of foreground voxels with |J| <= 0
    median: float

    def __post_init__(self):
        if not 0.0 <= self.frac_nonpositive <= 100.0:
            raise ValueError("frac_nonpositive is a percentage")


@dataclass(frozen=True)
class MetricReport:
    dice: DiceScores
    jacobian: JacobianReport
    runtime_s: float = 0.0

    def as_record(self) -> dict:
        return {
            "dice_avg": self.dice.avg,
            "dice_min": self.dice.min,
            "dice_per_label": {str(k): v for k, v in self.dice.per_label.items()},
            "frac_nonpositive_jacobian_pct": self.jacobian.frac_nonpositive,
            "median_jacobian": self.jacobian.median,
            "runtime_s": self.runtime_s,
        }


def dice(a: vol.LabelVolume, b: vol.LabelVolume) -> DiceScores:
    """Per-label overlap 2|A∩B| / (|A|+|B|) plus average and minimum.

    Labels present in neither volume are skipped; a label present in exactly
    one scores 0. Label 0 is treated as background and never scored.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"label grids differ: {a.shape} vs {b.shape}")
    if not np.allclose(a.affine.m, b.affine.m, atol=1e-6):
        raise ShapeMismatch("label volumes live on different world grids")
    labels = sorted({int(l) for l in np.unique(a.data)} | {int(l) for l in np.unique(b.data)})
    labels = [l for l in labels if l != 0]
    per = {}
    for l in labels:
        in_a, in_b = a.data == l, b.data == l
        denom = int(in_a.sum()) + int(in_b.sum())
        per[l] = 2.0 * int((in_a & in_b).sum()) / denom if denom else 0.0
    if not per:
        return DiceScores({}, 0.0, 0.0)
    values = list(per.values())
    return DiceScores(per, float(np.mean(values)), float(np.min(values)))


def _jacobian_determinants(d: GlobalDDF) -> np.ndarray:
    """det(I + ∇d) per voxel via central differences (one-sided at faces)."""
    spacing = np.linalg.norm(d.affine.linear, axis=0)
    comps = d.values.astype(np.float64)
    grads = [np.gradient(comps[..., i], *spacing) for i in range(3)]  # grads[i][j] = ∂d_i/∂x_j
    jac = np.empty(d.shape + (3, 3), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            jac[..., i, j] = grads[i][j] + (1.0 if i == j else 0.0)
    return np.linalg.det(jac)


def jacobian_report(d: GlobalDDF, foreground: np.ndarray | None = None) -> JacobianReport:
    """Folding fraction (%) and median determinant over the foreground."""
    det = _jacobian_determinants(d)
    if foreground is None:
        foreground = np.ones(d.shape, dtype=bool)
    if foreground.shape != d.shape:
        raise ShapeMismatch(f"mask shape {foreground.shape} != field grid {d.shape}")
    if not foreground.any():
        raise ValueError("foreground mask is empty")
    sel = det[foreground]
    return JacobianReport(float(100.0 * np.mean(sel <= 0)), float(np.median(sel)))


def foreground_mask(fixed: vol.ImageStack, d: GlobalDDF) -> np.ndarray:
    """Positive fixed-image intensity resampled onto the field grid."""
    return vol.sample_at_world(fixed, d.world_grid()) > 0


def compose_fields(d_fwd: GlobalDDF, d_bwd: GlobalDDF) -> GlobalDDF:
    """Displacement of applying ``d_fwd`` then ``d_bwd`` at the moved points.

    C(x) = D_fwd(x) + D_bwd(x + D_fwd(x)); inverse fields compose to zero.
    """
    world = d_fwd.world_grid()
    comp = d_fwd.values + d_bwd.sample(world + d_fwd.values)
    return GlobalDDF(comp.astype(np.float32), d_fwd.affine)


def roundtrip(d_fwd: GlobalDDF, d_bwd: GlobalDDF, foreground: np.ndarray | None = None) -> JacobianReport:
    """Jacobian statistics of the forward-then-backward composition."""
    return jacobian_report(compose_fields(d_fwd, d_bwd), foreground)


def evaluate_case(
    fixed_labels: vol.LabelVolume,
    warped_labels: vol.LabelVolume,
    d: GlobalDDF,
    foreground: np.ndarray | None = None,
    runtime_s: float = 0.0,
) -> MetricReport:
    return MetricReport(dice(fixed_labels, warped_labels), jacobian_report(d, foreground), runtime_s)


def summarize(reports) -> dict:
    """Mean ± std across cases for the headline numbers."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to summarize")

    def stats(values):
        return {"mean": float(np.mean(values)), "std": float(np.std(values))}

    return {
        "cases": len(reports),
        "dice_avg": stats([r.dice.avg for r in reports]),
        "dice_min": stats([r.dice.min for r in reports]),
        "frac_nonpositive_jacobian_pct": stats([r.jacobian.frac_nonpositive for r in reports]),
        "median_jacobian": stats([r.jacobian.median for r in reports]),
        "runtime_s": stats([r.runtime_s for r in reports]),
    }
