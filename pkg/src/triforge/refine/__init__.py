"""Stage-2 mesh refinement: SDF-grid geometry, hash-grid texture, and
score-distillation optimization."""

from .mesh import (
    Mesh,
    MeshError,
    compact,
    decimate,
    icosphere,
    load_obj,
    mesh_to_sdf,
    remove_floaters,
    save_obj,
    save_ply,
)
from .mcubes import MarchingCubesError, marching_cubes
from .texture import HashGridTexture
from .raster import project_points, rasterize, render_refined
from .sds import (
    NEGATIVE_PROMPT,
    POSITIVE_SUFFIX,
    AnalyticGaussianScore,
    AvgPoolCodec,
    EchoNoiseScore,
    IdentityCodec,
    RefineConfig,
    RefineError,
    RefineState,
    decorate_prompt,
    directional_prompt,
    orbit_cameras_for_refine,
    refine_pipeline,
    sds_latent_step,
    sds_pixel_step,
    texture_distill_init,
)

__all__ = [
    "Mesh", "MeshError", "compact", "decimate", "icosphere", "load_obj",
    "mesh_to_sdf", "remove_floaters", "save_obj", "save_ply",
    "MarchingCubesError", "marching_cubes", "HashGridTexture",
    "project_points", "rasterize", "render_refined",
    "NEGATIVE_PROMPT", "POSITIVE_SUFFIX", "AnalyticGaussianScore",
    "AvgPoolCodec", "EchoNoiseScore", "IdentityCodec", "RefineConfig",
    "RefineError", "RefineState", "decorate_prompt", "directional_prompt",
    "orbit_cameras_for_refine",
    "refine_pipeline", "sds_latent_step", "sds_pixel_step",
    "texture_distill_init",
]
