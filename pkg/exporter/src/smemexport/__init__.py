"""Offline exporter for the smart-memory tracker's interchange formats:
pooled frame features, box-prompted proposal triples, and palette-mask
conversion, written as SMRL/SMEM files plus a sequence manifest."""

from .features import PatchExtractor
from .jobs import (
    ExportError,
    ExportJob,
    ExportReport,
    convert_palette_masks,
    export_embeddings,
    export_proposals,
    export_sequence,
)

__all__ = [
    "ExportError",
    "ExportJob",
    "ExportReport",
    "PatchExtractor",
    "convert_palette_masks",
    "export_embeddings",
    "export_proposals",
    "export_sequence",
]

__version__ = "0.1.0"
