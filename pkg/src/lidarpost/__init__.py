"""Post-processing and evaluation toolkit for LiDAR 3D object detection.

The modules cover rotated-box geometry, voxelization, augmentation, anchors,
IoU-aware confidence rectification, distance-variant IoU-weighted NMS,
detection losses, KITTI I/O and evaluation, and a synthetic detector used to
exercise the whole chain.
"""

from .confidence import Detection, RectifyConfig, rectify, rectify_all
from .dinms import DiNmsConfig, di_nms, standard_nms
from .geometry import Box3D, bev_iou, iou_3d

__version__ = "0.1.0"

__all__ = [
    "Box3D",
    "bev_iou",
    "iou_3d",
    "Detection",
    "RectifyConfig",
    "rectify",
    "rectify_all",
    "DiNmsConfig",
    "di_nms",
    "standard_nms",
]
