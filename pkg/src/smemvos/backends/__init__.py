"""Backend contracts: encoder, decoder, and refiner roles.

Two families implement these: deterministic synthetic backends computed
from scene specs, and file backends that replay exported data verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Optional, Protocol, Sequence, runtime_checkable

if TYPE_CHECKING:
    from ..masks import ObjectMask
    from ..memory import Embedding, MemoryBank


class BackendError(RuntimeError):
    """Base class for recoverable backend failures."""


class UnknownFrameError(BackendError):
    """The backend has no data for the requested frame."""


class MissingDataError(BackendError):
    """The backend's data source lacks a required record."""


class BoxOutOfBoundsError(BackendError):
    """A box prompt exceeds the frame bounds."""


class MissingPriorError(BackendError):
    """The segmenter was stepped at frame 0 without ground-truth masks."""


@dataclass(frozen=True)
class FrameRef:
    """Identifies one frame of one sequence, with its pixel dimensions."""

    sequence_id: str
    frame_index: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        if self.height < 1 or self.width < 1:
            raise ValueError("frame dimensions must be positive")


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str  # "synthetic" | "file"
    embedding_dim: int
    deterministic: bool
    concurrent_safe: bool


@runtime_checkable
class Embedder(Protocol):
    """Produces frame keys and object appearance features."""

    descriptor: BackendDescriptor

    def frame_key(self, frame: FrameRef) -> "Embedding":
        """Deterministic whole-frame key for (sequence_id, frame_index)."""
        ...

    def object_appearance(
        self, frame: FrameRef, mask: "ObjectMask"
    ) -> "Embedding":
        """Masked mean pooling of the per-pixel feature field; an empty
        mask yields the zero vector."""
        ...


@runtime_checkable
class Segmenter(Protocol):
    """Memory-conditioned multi-object mask decoder."""

    descriptor: BackendDescriptor

    def step(
        self,
        frame: FrameRef,
        bank: "MemoryBank",
        prior: Optional[Sequence["ObjectMask"]],
    ) -> list["ObjectMask"]:
        """One mask per tracked object, in fixed object order. The prior is
        mandatory at frame 0 (ground truth)."""
        ...

    def memory_payload(
        self, frame: FrameRef, masks: Sequence["ObjectMask"]
    ) -> Any:
        """Opaque decoder state handle stored alongside a memory key."""
        ...


@runtime_checkable
class Refiner(Protocol):
    """Box-prompted mask proposal source (three candidates per prompt)."""

    descriptor: BackendDescriptor

    def propose(self, frame: FrameRef, box: tuple[int, int, int, int]):
        """ProposalSet for an inclusive (row_min, col_min, row_max, col_max)
        box prompt; the box must lie within the frame."""
        ...


def check_box_in_frame(
    frame: FrameRef, box: tuple[int, int, int, int]
) -> None:
    r0, c0, r1, c1 = box
    if not (0 <= r0 <= r1 < frame.height and 0 <= c0 <= c1 < frame.width):
        raise BoxOutOfBoundsError(
            f"box {box} outside {frame.height}x{frame.width} frame"
        )
