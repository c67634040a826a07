"""Eikonal residual | |grad sdf| - 1 | by central differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SdfGrid


@dataclass(frozen=True)
class EikonalStats:
    mean: float
    max: float
    count: int


def _central_gradient(values: np.ndarray, step: float):
    gx = (values[2:, 1:-1, 1:-1] - values[:-2, 1:-1, 1:-1]) / (2 * step)
    gy = (values[1:-1, 2:, 1:-1] - values[1:-1, :-2, 1:-1]) / (2 * step)
    gz = (values[1:-1, 1:-1, 2:] - values[1:-1, 1:-1, :-2]) / (2 * step)
    return gx, gy, gz


def band_mask(grid: SdfGrid) -> np.ndarray:
    """Interior voxels whose value is at least one voxel inside the truncation band."""
    v = grid.values
    inner = v[1:-1, 1:-1, 1:-1]
    return np.abs(inner) < 1.0 - grid.spec.voxel_size_normalized


def eikonal_residual(grid: SdfGrid, exclude: np.ndarray | None = None) -> EikonalStats:
    """Mean/max residual over the untruncated interior.

    ``exclude`` is an optional full-resolution boolean mask of voxels to skip.
    """
    gx, gy, gz = _central_gradient(grid.values, grid.spec.voxel_size_normalized)
    res = np.abs(np.sqrt(gx**2 + gy**2 + gz**2) - 1.0)
    mask = band_mask(grid)
    if exclude is not None:
        mask &= ~np.asarray(exclude, bool)[1:-1, 1:-1, 1:-1]
    if not mask.any():
        return EikonalStats(0.0, 0.0, 0)
    r = res[mask]
    return EikonalStats(float(r.mean()), float(r.max()), int(mask.sum()))


def eikonal_loss(values: np.ndarray, step: float, mask: np.ndarray | None = None):
    """Mean of (|grad| - 1)^2 over ``mask`` (interior-shaped) and its gradient w.r.t. values."""
    gx, gy, gz = _central_gradient(values, step)
    norm = np.sqrt(gx**2 + gy**2 + gz**2)
    if mask is None:
        mask = np.ones_like(norm, dtype=bool)
    count = max(int(mask.sum()), 1)
    r = np.where(mask, norm - 1.0, 0.0)
    loss = float((r**2).sum() / count)
    coef = np.where(mask, 2.0 * r / np.maximum(norm, 1e-12), 0.0) / count
    cx, cy, cz = coef * gx / (2 * step), coef * gy / (2 * step), coef * gz / (2 * step)
    grad = np.zeros_like(values)
    grad[2:, 1:-1, 1:-1] += cx
    grad[:-2, 1:-1, 1:-1] -= cx
    grad[1:-1, 2:, 1:-1] += cy
    grad[1:-1, :-2, 1:-1] -= cy
    grad[1:-1, 1:-1, 2:] += cz
    grad[1:-1, 1:-1, :-2] -= cz
    return loss, grad
