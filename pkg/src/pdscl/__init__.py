"""Patient/domain-aware supervised contrastive learning for two-class lung sounds."""

from pdscl.core import (
    ABNORMAL,
    NORMAL,
    BatchMeta,
    SampleMeta,
    ValidationReport,
    validate_dataset,
)

__all__ = [
    "ABNORMAL",
    "NORMAL",
    "BatchMeta",
    "SampleMeta",
    "ValidationReport",
    "validate_dataset",
]

__version__ = "0.1.0"
