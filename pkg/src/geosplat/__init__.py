"""Surface-aligned 3D Gaussian splatting on numpy: rendering with analytic
gradients, learned point initialization, mesh alignment and density control."""

from .scene import Camera, Gaussian3D, GaussianScene, SparsePointCloud, TriangleMesh
from .raster import render, render_backward, render_oracle, project_gaussian
from .metrics import psnr, ssim, photometric_loss

__version__ = "0.1.0"

__all__ = ["Camera", "Gaussian3D", "GaussianScene", "SparsePointCloud", "TriangleMesh", "render",
           "render_backward", "render_oracle", "project_gaussian", "psnr", "ssim", "photometric_loss"]
