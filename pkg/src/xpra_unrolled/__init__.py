"""Phaseless microwave imaging with the extended phaseless Rytov model and
unrolled proximal-gradient networks."""

from .scene import SceneConfig, ScattererSpec, build_dataset, place_nodes, rasterize
from .forward import simulate, cylinder_series
from .xpra import assemble_kernel, build_diff_operators
from .unrolled import LinearSystem, UnrolledModel, TvModel, DirectInversionModel, run_unrolled, tikhonov_init
from .metrics import psnr

__all__ = [
    "SceneConfig", "ScattererSpec", "build_dataset", "place_nodes", "rasterize",
    "simulate", "cylinder_series", "assemble_kernel", "build_diff_operators",
    "LinearSystem", "UnrolledModel", "TvModel", "DirectInversionModel", "run_unrolled",
    "tikhonov_init", "psnr",
]
