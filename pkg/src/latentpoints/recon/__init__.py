from .field import GridGeometry, scatter_field, trilinear_sample, trilinear_scatter
from .mcubes import TriangleMesh, marching_cubes, mesh_surface_area, sample_mesh_surface, write_obj
from .poisson import IndicatorGrid, normalize_indicator, poisson_solve
from .poisson import read_indicator, write_indicator
from .upsampler import (
    build_lion_pairs,
    SapConfig,
    UpsamplerNet,
    build_sap_pairs,
    finetune_on_lion,
    indicator_from_oriented,
    reconstruct,
    train_upsampler,
)

__all__ = [
    "GridGeometry",
    "IndicatorGrid",
    "SapConfig",
    "TriangleMesh",
    "UpsamplerNet",
    "build_lion_pairs",
    "build_sap_pairs",
    "finetune_on_lion",
    "indicator_from_oriented",
    "marching_cubes",
    "mesh_surface_area",
    "normalize_indicator",
    "read_indicator",
    "poisson_solve",
    "reconstruct",
    "sample_mesh_surface",
    "scatter_field",
    "train_upsampler",
    "trilinear_sample",
    "trilinear_scatter",
    "write_indicator",
    "write_obj",
]
