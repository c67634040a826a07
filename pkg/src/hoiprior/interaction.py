"""Interaction grids: object latent channels concatenated with rescaled skeletal channels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import BlockStatsCodec, Codec, LatentGrid
from .errors import ShapeMismatch
from .geometry.grid import GridSpec, SdfGrid, read_hopg, write_hopg
from .geometry.sampling import (resample_under_transform, resample_values_vjp, resample_vjp, sample_trilinear,
                                transform_query_points)
from .geometry.transforms import RigidTransform
from .hand import (FIELD_CLAMP, NUM_JOINTS, HandSkeleton, _chain, _jacobian_from_chain,
                   field_from_joints, skeletal_field_joint_vjp)

LAYOUT = (("object", 3), ("hand", NUM_JOINTS))
NUM_CHANNELS = sum(n for _, n in LAYOUT)


def hand_to_band(field: np.ndarray) -> np.ndarray:
    """Skeletal values [0, 4] -> [-1, 1]."""
    return field * (2.0 / FIELD_CLAMP) - 1.0


def band_to_hand(values: np.ndarray) -> np.ndarray:
    return (np.asarray(values) + 1.0) * (FIELD_CLAMP / 2.0)


@dataclass
class InteractionGrid:
    spec: GridSpec
    values: np.ndarray          # (18, X, Y, Z)
    layout: tuple = LAYOUT

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = sum(c for _, c in self.layout)
        if self.values.shape != (n,) + self.spec.shape:
            raise ShapeMismatch(f"interaction values {self.values.shape} do not match layout/grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("interaction grid must be finite")

    def group(self, name: str) -> np.ndarray:
        start = 0
        for g, n in self.layout:
            if g == name:
                return self.values[start:start + n]
            start += n
        raise KeyError(name)

    @property
    def object_channels(self) -> np.ndarray:
        return self.group("object")

    @property
    def hand_channels(self) -> np.ndarray:
        return self.group("hand")

    def check(self, expected: tuple = LAYOUT, tol: float = 1e-9) -> None:
        """Raise if the channel layout differs from ``expected`` or a group leaves its band."""
        if tuple(tuple(g) for g in self.layout) != tuple(expected):
            raise ShapeMismatch(f"channel layout {self.layout} differs from expected {expected}")
        for name, _ in self.layout:
            v = self.group(name)
            if v.size and (v.min() < -1 - tol or v.max() > 1 + tol):
                raise ShapeMismatch(f"channel group '{name}' leaves the [-1, 1] band")

    def save(self, path) -> None:
        write_hopg(path, self.values, self.spec.half_extent)

    @classmethod
    def load(cls, path) -> "InteractionGrid":
        data, half = read_hopg(path)
        return cls(GridSpec(data.shape[1:], half), data)


def assemble_interaction_grid(latent: LatentGrid, pose, skeleton: HandSkeleton | None = None) -> InteractionGrid:
    """Concatenate object latent channels with the skeletal field on the latent lattice."""
    skel = skeleton or HandSkeleton()
    spec = latent.spec
    joints = _chain(skel, np.asarray(getattr(pose, "angles", pose), float)).joints.reshape(-1, 3)
    field = field_from_joints(joints / spec.half_extent, spec)
    return InteractionGrid(spec, np.concatenate([latent.values, hand_to_band(field)]))


@dataclass
class AssembledGrid:
    grid: InteractionGrid
    object_values: np.ndarray      # resampled full-resolution object SDF
    transform: RigidTransform
    theta: np.ndarray


class InteractionAssembler:
    """x(T, theta) = (E(resample(object, T)), H(theta)) with vector-Jacobian products.

    Rotation gradients are taken w.r.t. a right perturbation ``R -> R exp(delta)``
    when ``tangent`` is true, else w.r.t. the axis-angle vector.
    """

    def __init__(self, obj: SdfGrid, skeleton: HandSkeleton | None = None, codec: Codec | None = None,
                 tangent: bool = True):
        self.object = obj
        self.skeleton = skeleton or HandSkeleton()
        self.codec = codec or BlockStatsCodec()
        self.tangent = tangent
        self.latent_spec = self.codec.latent_spec(obj.spec)

    def __call__(self, transform: RigidTransform, theta) -> AssembledGrid:
        theta = np.asarray(getattr(theta, "angles", theta), dtype=float)
        moved = resample_under_transform(self.object, transform)
        latent = self.codec.encode(moved)
        grid = assemble_interaction_grid(latent, theta, self.skeleton)
        return AssembledGrid(grid, moved.values, transform, theta)

    def vjp(self, state: AssembledGrid, cotangent: np.ndarray, wrt_object: bool = False):
        """Pull back d/dx to (d/dtransform params (7,), d/dtheta (20,)).

        With ``wrt_object`` a third entry holds d/d(object voxel values).
        """
        cot = np.asarray(cotangent, dtype=float)
        n_obj = LAYOUT[0][1]
        g_fine = self.codec.encode_vjp(state.object_values, cot[:n_obj])
        g_t = resample_vjp(self.object, state.transform, g_fine, tangent=self.tangent)
        spec = self.latent_spec
        h = spec.half_extent
        chain = _chain(self.skeleton, state.theta)
        joints = chain.joints.reshape(-1, 3) / h
        # hand_to_band scales the field by 2 / clamp
        gj = skeletal_field_joint_vjp(joints, spec, cot[n_obj:] * (2.0 / FIELD_CLAMP))
        J = _jacobian_from_chain(chain) / h
        g_theta = np.einsum("ji,jik->k", gj, J)
        if not wrt_object:
            return g_t, g_theta
        spec = self.object.spec
        q = transform_query_points(spec, spec.half_extent, state.transform)
        f, _ = sample_trilinear(self.object.values, q, need_grad=False)
        s = state.transform.scale
        # re-truncated voxels pass no gradient
        g_out = np.where(np.abs(s * f) > 1.0, 0.0, g_fine.ravel())
        g_obj = resample_values_vjp(spec.shape, q, s, g_out).reshape(spec.shape)
        return g_t, g_theta, g_obj
