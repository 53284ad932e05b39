"""3D math foundations: rigid transforms, cameras, triangulation, alignment and meshes."""

from .align import apply_similarity, rigid_align
from .camera import (
    CameraModel,
    closest_points_on_rays,
    load_cameras,
    project,
    save_cameras,
    triangulate_pair,
    triangulate_rays,
)
from .mesh import (
    SpatialIndex,
    TriMesh,
    blob,
    box,
    build_index,
    icosphere,
    load_mesh,
    load_obj,
    load_ply,
    nearest_vertex,
    save_mesh,
    save_obj,
    save_ply,
    voxel_intersection_volume,
    voxel_occupancy,
    voxel_volume,
)
from .rotations import angle_between, left_jacobian, matrix_to_rotvec, random_rotation, rotvec_to_matrix, skew
from .transform import RigidTransform
