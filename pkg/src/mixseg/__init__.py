"""Semi-supervised multi-label segmentation from expert masks plus saliency pseudo-labels."""
from .core import (ClassTaxonomy, CHEST_XRAY_TAXONOMY, ImageSample, IoUResult, TrainingError, ValidationError,
                   dataset_iou, iou, load_manifest, miou)
from .checkpoint import MetricsLog, ModelCheckpoint

__version__ = "0.1.0"

__all__ = [
    "ClassTaxonomy", "CHEST_XRAY_TAXONOMY", "ImageSample", "IoUResult", "TrainingError", "ValidationError",
    "dataset_iou", "iou", "load_manifest", "miou", "MetricsLog", "ModelCheckpoint",
]
