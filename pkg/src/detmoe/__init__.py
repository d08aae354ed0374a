"""Model-level mixture-of-experts fusion for object detectors."""

from detmoe.geometry import Box, Detection, area, iou

__all__ = ["Box", "Detection", "area", "iou"]
__version__ = "0.1.0"
