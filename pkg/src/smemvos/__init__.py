"""Smart-memory video object segmentation toolkit.

Neural-network-free infrastructure for memory-bounded mask tracking:
a relevance/freshness eviction policy for the key-frame bank, appearance-
verified mask fusion with refined-mask feedback, the usual tracking metrics,
deterministic synthetic benchmarks, and bit-exact interchange formats.
"""

from .masks import MaskShapeMismatch, ObjectMask
from .memory import (
    Embedding,
    MemoryBank,
    MemoryEntry,
    UpdateReport,
    freshness,
    relevance,
    removal_score,
)
from .pipeline import (
    Cadence,
    PipelineConfig,
    SequenceDescriptor,
    SequenceResult,
    ablate,
    run_sequence,
)

__all__ = [
    "Cadence",
    "Embedding",
    "MaskShapeMismatch",
    "MemoryBank",
    "MemoryEntry",
    "ObjectMask",
    "PipelineConfig",
    "SequenceDescriptor",
    "SequenceResult",
    "UpdateReport",
    "ablate",
    "freshness",
    "relevance",
    "removal_score",
    "run_sequence",
]

__version__ = "0.1.0"
