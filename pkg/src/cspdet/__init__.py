"""cspdet: a desk-scale one-stage detector built from scratch.

The package combines a minimal reverse-mode tensor engine, the detector's
architectural blocks (focus slicing, CBL, cross-stage-partial dense blocks,
SPP, ASPP and a recursive feature pyramid), IoU-family box geometry and
losses, k-means anchor estimation, dataset tooling and AP evaluation.
"""

from .anchors import AnchorKMeans, kmeans_anchors, mean_best_iou
from .boxes import Box, diou, diou_nms, giou, giou_loss, iou
from .estimator import PyramidDetector
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "AnchorKMeans",
    "Box",
    "PyramidDetector",
    "Tensor",
    "diou",
    "diou_nms",
    "giou",
    "giou_loss",
    "iou",
    "kmeans_anchors",
    "mean_best_iou",
    "no_grad",
    "__version__",
]
