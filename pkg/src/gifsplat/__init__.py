"""Forward-only iterative refinement of 3D Gaussian splatting scenes."""

from .core import Camera, GaussianScene, GeometryError
from .head import HeadParams, init_head_params
from .rasterizer import RenderOptions, RenderOutput, render, render_backward
from .refine import RefineConfig, RefineError, refine

__all__ = ["Camera", "GaussianScene", "GeometryError", "HeadParams", "init_head_params",
           "RenderOptions", "RenderOutput", "render", "render_backward", "RefineConfig",
           "RefineError", "refine"]
__version__ = "0.1.0"
