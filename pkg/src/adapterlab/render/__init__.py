"""Small CPU renderer: volume grids, splats and triangle meshes."""

from .camera import Camera
from .mesh import (
    TriMesh,
    backproject_texture,
    blend_view_colors,
    grid_mesh,
    icosphere,
    marching_cubes,
    rasterize,
    render_mesh,
    tsdf_fuse,
    volume_to_mesh,
)
from .output import RayContribs, RenderOutput
from .shading import lambertian_shade, normals_from_depth, tonemap, to_linear
from .splats import SplatSet, composite_splats
from .volume import VolumeGrid, march_rays, raymarch_volume

__all__ = [
    "Camera",
    "RayContribs",
    "RenderOutput",
    "SplatSet",
    "TriMesh",
    "VolumeGrid",
    "backproject_texture",
    "blend_view_colors",
    "composite_splats",
    "grid_mesh",
    "icosphere",
    "lambertian_shade",
    "march_rays",
    "marching_cubes",
    "normals_from_depth",
    "rasterize",
    "raymarch_volume",
    "render_mesh",
    "to_linear",
    "tonemap",
    "tsdf_fuse",
    "volume_to_mesh",
]
