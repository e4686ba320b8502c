"""Lumen segmentation: classical threshold/ellipse backend and the memory-attention reference."""

from .attention import (
    FusionWeights,
    MemoryBank,
    attention_probabilities,
    conv3x3,
    correlate,
    fuse,
    memory_read,
)
from .classical import ClassicalParams, LumenDetection, detect_lumens, segment_frame, threshold_mask
from .metrics import dice_iou
from .video import (
    FrameSegmentation,
    SegmentationMask,
    SegmentParams,
    StubNetwork,
    read_detections,
    segment_video,
    write_segmentation,
)

__all__ = [
    "ClassicalParams",
    "FrameSegmentation",
    "FusionWeights",
    "LumenDetection",
    "MemoryBank",
    "SegmentParams",
    "SegmentationMask",
    "StubNetwork",
    "attention_probabilities",
    "conv3x3",
    "correlate",
    "detect_lumens",
    "dice_iou",
    "fuse",
    "memory_read",
    "read_detections",
    "segment_frame",
    "segment_video",
    "threshold_mask",
    "write_segmentation",
]
