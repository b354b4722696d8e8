"""Per-stage logit export for real classifiers, emitting UQC1 score tables."""

from .export import ExportError, ExportJob, export, load_dataset, load_model
from .macs import count_macs
from .uqc1 import write_uqc1

__all__ = [
    "ExportError",
    "ExportJob",
    "export",
    "load_dataset",
    "load_model",
    "count_macs",
    "write_uqc1",
]
__version__ = "0.1.0"
