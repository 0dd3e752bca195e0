"""Measuring foreground-background context bias in object detectors.

The package bundles a synthetic benchmark with planted correlations, a small
hookable detector, background interventions in image and feature space,
CAM-based causal probing, MMD association metrics and the paired statistics
used to compare domains.
"""

from .core import (CtxBiasError, Dataset, DetectionRecord, DomainId, FeatureTensor,
                   InstanceAnnotation, LabelSpace, SemanticMap, iou, read_dataset,
                   read_tensor, write_dataset, write_tensor)

__version__ = "0.1.0"

__all__ = [
    "CtxBiasError", "Dataset", "DetectionRecord", "DomainId", "FeatureTensor",
    "InstanceAnnotation", "LabelSpace", "SemanticMap", "iou", "read_dataset", "read_tensor",
    "write_dataset", "write_tensor", "__version__",
]
