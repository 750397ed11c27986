"""Point-cloud rendering through layered camera-frustum volumes.

Per-point appearance features are scattered into a P x H x W frustum
volume, a small 3D U-Net turns the volume into per-plane images plus
blending weights, and the planes are blended into the final render.
Both the network parameters and the point features are trained jointly
by gradient descent on a from-scratch reverse-mode autodiff engine.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor
from .camera import CameraView, FrustumPartition, VoxelCoord, fit_partition, locate, project
from .pointcloud import PointCloudStore, load_ply, save_ply
from .voxelizer import AggregationParams, FeatureVolume, aggregate, build_volume
from .network import PlaneStack, RenderNet, RenderNetArch, RenderedImage, blend
from .metrics import MetricReport, psnr, ssim, zbuffer_render
from .scenes import NoiseSpec, SceneSpec, occlusion_case, raycast_render, sample_cloud

__all__ = [
    "Tape", "Tensor",
    "CameraView", "FrustumPartition", "VoxelCoord", "fit_partition", "locate", "project",
    "PointCloudStore", "load_ply", "save_ply",
    "AggregationParams", "FeatureVolume", "aggregate", "build_volume",
    "PlaneStack", "RenderNet", "RenderNetArch", "RenderedImage", "blend",
    "MetricReport", "psnr", "ssim", "zbuffer_render",
    "NoiseSpec", "SceneSpec", "occlusion_case", "raycast_render", "sample_cloud",
]
