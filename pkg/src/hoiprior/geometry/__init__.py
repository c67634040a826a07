from .eikonal import EikonalStats, band_mask, eikonal_loss, eikonal_residual
from .grid import GridSpec, SdfGrid, load_sdf, read_hopg, save_sdf, truncate, write_hopg
from .mesh import (TriMesh, box_mesh, capsule_mesh, concatenate, icosphere, marching_cubes, mesh_signed_distance,
                   mesh_to_sdf, read_obj, write_obj)
from .sampling import resample_under_transform, resample_vjp, sample_trilinear, sample_trilinear_vjp
from .shapes import analytic_sdf, shape_sdf
from .transforms import RigidTransform, so3_exp, so3_log, so3_right_jacobian

__all__ = [
    "GridSpec",
    "SdfGrid",
    "RigidTransform",
    "TriMesh",
    "load_sdf",
    "save_sdf",
    "read_hopg",
    "write_hopg",
    "truncate",
    "sample_trilinear",
    "sample_trilinear_vjp",
    "resample_under_transform",
    "resample_vjp",
    "so3_exp",
    "so3_log",
    "so3_right_jacobian",
    "analytic_sdf",
    "shape_sdf",
    "icosphere",
    "box_mesh",
    "capsule_mesh",
    "concatenate",
    "marching_cubes",
    "mesh_to_sdf",
    "mesh_signed_distance",
    "read_obj",
    "write_obj",
    "EikonalStats",
    "band_mask",
    "eikonal_loss",
    "eikonal_residual",
]
