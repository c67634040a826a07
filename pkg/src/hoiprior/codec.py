"""Object codecs mapping full-resolution SDF grids to coarse multi-channel latents.

The default codec stores per-block (mean, min, max) statistics and decodes by
trilinear upsampling of the mean channel.  Any object with ``encode``,
``decode`` and ``encode_vjp`` can stand in for it (e.g. a learned model).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import BadResolution, ShapeMismatch
from .geometry.grid import GridSpec, SdfGrid, read_hopg, truncate, write_hopg
from .geometry.sampling import sample_trilinear

LATENT_CHANNELS = 3


@dataclass
class LatentGrid:
    spec: GridSpec
    values: np.ndarray  # (3, X, Y, Z)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (LATENT_CHANNELS,) + self.spec.shape:
            raise ShapeMismatch(f"latent values {v.shape} do not match {self.spec.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent values must be finite")
        self.values = v

    def save(self, path) -> None:
        write_hopg(path, self.values, self.spec.half_extent)

    @classmethod
    def load(cls, path) -> "LatentGrid":
        data, half = read_hopg(path)
        return cls(GridSpec(data.shape[1:], half), data)


class Codec(Protocol):
    def encode(self, grid: SdfGrid) -> LatentGrid: ...

    def decode(self, latent: LatentGrid) -> SdfGrid: ...

    def encode_vjp(self, values: np.ndarray, cotangent: np.ndarray) -> np.ndarray: ...


def _blocks(values: np.ndarray, b: int) -> np.ndarray:
    """(X, Y, Z) -> (X/b, Y/b, Z/b, b^3) view of each block's voxels."""
    nx, ny, nz = values.shape
    v = values.reshape(nx // b, b, ny // b, b, nz // b, b)
    return v.transpose(0, 2, 4, 1, 3, 5).reshape(nx // b, ny // b, nz // b, b**3)


def _unblocks(blocks: np.ndarray, b: int) -> np.ndarray:
    cx, cy, cz, _ = blocks.shape
    v = blocks.reshape(cx, cy, cz, b, b, b).transpose(0, 3, 1, 4, 2, 5)
    return v.reshape(cx * b, cy * b, cz * b)


@dataclass(frozen=True)
class BlockStatsCodec:
    block: int = 4

    def latent_spec(self, spec: GridSpec) -> GridSpec:
        if any(n % self.block for n in spec.shape):
            raise BadResolution(f"resolution {spec.shape} not divisible by {self.block}")
        return GridSpec(tuple(n // self.block for n in spec.shape), spec.half_extent)

    def full_spec(self, latent_spec: GridSpec) -> GridSpec:
        return GridSpec(tuple(n * self.block for n in latent_spec.shape), latent_spec.half_extent)

    def encode_values(self, values: np.ndarray) -> np.ndarray:
        blk = _blocks(np.asarray(values, dtype=float), self.block)
        return np.stack([blk.mean(axis=-1), blk.min(axis=-1), blk.max(axis=-1)])

    def encode(self, grid: SdfGrid) -> LatentGrid:
        spec = self.latent_spec(grid.spec)
        return LatentGrid(spec, self.encode_values(grid.values))

    def encode_vjp(self, values: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the input voxels; min/max route to the first argmin/argmax voxel."""
        b = self.block
        blk = _blocks(np.asarray(values, dtype=float), b)
        cot = np.asarray(cotangent, dtype=float)
        g = np.repeat(cot[0][..., None] / b**3, b**3, axis=-1)
        idx_min = blk.argmin(axis=-1)[..., None]
        idx_max = blk.argmax(axis=-1)[..., None]
        np.put_along_axis(g, idx_min, np.take_along_axis(g, idx_min, -1) + cot[1][..., None], -1)
        np.put_along_axis(g, idx_max, np.take_along_axis(g, idx_max, -1) + cot[2][..., None], -1)
        return _unblocks(g, b)

    def decode(self, latent: LatentGrid) -> SdfGrid:
        """Trilinear upsampling of the mean channel, shifted per block to keep block means.

        The shift makes ``encode(decode(z))`` reproduce the mean channel, so
        decode after encode is idempotent.
        """
        spec = self.full_spec(latent.spec)
        vals, _ = sample_trilinear(latent.values[0], spec.centers_normalized(), need_grad=False)
        blk = _blocks(vals.reshape(spec.shape), self.block)
        blk += (latent.values[0] - blk.mean(axis=-1))[..., None]
        return SdfGrid(spec, truncate(_unblocks(blk, self.block)))


@dataclass(frozen=True)
class IdentityCodec:
    """Passthrough for grids already at latent resolution; replicates the channel."""

    resolution: int = 16

    def _check(self, spec: GridSpec):
        if spec.shape != (self.resolution,) * 3:
            raise BadResolution(f"identity codec expects {self.resolution}^3, got {spec.shape}")

    def latent_spec(self, spec: GridSpec) -> GridSpec:
        self._check(spec)
        return spec

    def full_spec(self, latent_spec: GridSpec) -> GridSpec:
        return latent_spec

    def encode_values(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        return np.stack([v, v, v])

    def encode(self, grid: SdfGrid) -> LatentGrid:
        self._check(grid.spec)
        return LatentGrid(grid.spec, self.encode_values(grid.values))

    def encode_vjp(self, values: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        return np.asarray(cotangent, dtype=float).sum(axis=0)

    def decode(self, latent: LatentGrid) -> SdfGrid:
        self._check(latent.spec)
        return SdfGrid(latent.spec, latent.values[0].copy())


def encode(grid: SdfGrid, codec: Codec | None = None) -> LatentGrid:
    return (codec or BlockStatsCodec()).encode(grid)


def decode(latent: LatentGrid, codec: Codec | None = None) -> SdfGrid:
    return (codec or BlockStatsCodec()).decode(latent)
