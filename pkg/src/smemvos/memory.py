"""Smart memory bank: relevance/freshness scoring, eviction, gated insertion.

The bank stores one embedding per retained key frame. On every committed
insertion the entry most similar to the incoming frame (weighted towards
older entries) is located; it is replaced when its similarity clears the
replacement threshold, otherwise the bank grows. This keeps memory bounded
on repetitive content while retaining distinct appearances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterator, Optional

import numpy as np


class EmbeddingDimensionMismatch(ValueError):
    """Embeddings with different dimensionality were combined."""


class FrameOrderError(ValueError):
    """A frame index violates the bank's strictly-increasing order."""


class DuplicateFrameError(FrameOrderError):
    """A frame index is already present in the bank."""


class ProtectedBankError(RuntimeError):
    """An insertion could not complete because only protected entries remain."""


class Embedding:
    """Fixed-length real feature vector (finite values only)."""

    __slots__ = ("_values",)

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("embedding values must form a 1-D sequence")
        if arr.size < 1:
            raise ValueError("embedding dimension must be >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding values must be finite (no NaN/Inf)")
        arr.setflags(write=False)
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dim(self) -> int:
        return int(self._values.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return bool(np.array_equal(self._values, other._values))

    __hash__ = None

    def __repr__(self) -> str:
        head = ", ".join(f"{v:g}" for v in self._values[:4])
        tail = ", ..." if self.dim > 4 else ""
        return f"Embedding([{head}{tail}], dim={self.dim})"


def relevance(a: Embedding, b: Embedding) -> float:
    """Cosine similarity between two embeddings, in [-1, 1].

    A zero-norm embedding is treated as unrelated to everything (returns 0),
    which keeps degenerate keys out of NaN territory and makes them
    eviction-immune.
    """
    if a.dim != b.dim:
        raise EmbeddingDimensionMismatch(
            f"embedding dims differ: {a.dim} vs {b.dim}"
        )
    num = float(np.dot(a.values, b.values))
    norm_a = math.sqrt(float(np.dot(a.values, a.values)))
    norm_b = math.sqrt(float(np.dot(b.values, b.values)))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    if np.array_equal(a.values, b.values):
        # sqrt rounding can push cos(x, x) a few ulps below 1; identical
        # keys must score exactly 1 so threshold-1 replacement stays exact
        return 1.0
    return max(-1.0, min(1.0, num / (norm_a * norm_b)))


def freshness(entry_frame: int, current_frame: int) -> float:
    """Inverse age of a stored frame relative to the current one."""
    if entry_frame >= current_frame:
        raise FrameOrderError(
            f"entry frame {entry_frame} is not older than current frame "
            f"{current_frame}"
        )
    return 1.0 / (current_frame - entry_frame)


def removal_score(rel: float, fr: float, lam: float) -> float:
    """Removal priority: rel * (1 + lam * fr).

    High relevance marks redundancy; the freshness term tips the balance
    towards dropping older duplicates. ``lam`` weighs the two.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return rel * (1.0 + lam * fr)


@dataclass
class MemoryEntry:
    """One retained key frame: its index, key embedding, and an opaque
    payload handle owned by whichever decoder consumes the bank."""

    frame_index: int
    key: Embedding
    payload: Any = None
    protected: bool = False


@dataclass
class UpdateReport:
    """Outcome of one committed insertion attempt."""

    action: str  # "replace" | "grow" | "capacity_evict"
    inserted_frame: int
    removed_frame: Optional[int] = None
    candidate_relevance: Optional[float] = None


class MemoryBank:
    """Ordered set of memory entries with eviction parameters.

    Entries stay sorted by strictly ascending frame index and share one
    embedding dimension. Mutation (insert/update) must be externally
    serialized; reads are safe from any number of contexts.
    """

    def __init__(
        self,
        lam: float = 1.0,
        tau_mem: float = 0.85,
        capacity_limit: Optional[int] = None,
    ) -> None:
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        if not -1.0 <= tau_mem <= 1.0:
            raise ValueError("tau_mem must lie in [-1, 1]")
        if capacity_limit is not None and capacity_limit < 1:
            raise ValueError("capacity_limit must be positive when set")
        self.lam = float(lam)
        self.tau_mem = float(tau_mem)
        self.capacity_limit = capacity_limit
        self.entries: list[MemoryEntry] = []

    # -- read side -------------------------------------------------------

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(self.entries)

    @property
    def dim(self) -> Optional[int]:
        return self.entries[0].key.dim if self.entries else None

    def keys(self) -> list[Embedding]:
        return [e.key for e in self.entries]

    def frame_indices(self) -> list[int]:
        return [e.frame_index for e in self.entries]

    def max_relevance(self, current: Embedding) -> float:
        """Best cosine similarity between ``current`` and any stored key
        (0.0 for an empty bank)."""
        if not self.entries:
            return 0.0
        return max(relevance(e.key, current) for e in self.entries)

    def evict_candidate(
        self, current: Embedding, current_frame: int
    ) -> Optional[tuple[int, float]]:
        """Index and score of the non-protected entry with the highest
        removal score, or None when no entry is evictable.

        Ties resolve to the smallest frame index (oldest entry); because
        entries are sorted ascending, keeping the first strict maximum
        implements that.
        """
        self._check_dim(current)
        for e in self.entries:
            if e.frame_index >= current_frame:
                raise FrameOrderError(
                    f"current frame {current_frame} is not newer than stored "
                    f"frame {e.frame_index}"
                )
        best: Optional[tuple[int, float]] = None
        for i, e in enumerate(self.entries):
            if e.protected:
                continue
            score = removal_score(
                relevance(e.key, current),
                freshness(e.frame_index, current_frame),
                self.lam,
            )
            if best is None or score > best[1]:
                best = (i, score)
        return best

    # -- write side ------------------------------------------------------

    def insert(self, entry: MemoryEntry) -> None:
        """Append-only insertion (no eviction); the baseline growth path
        and the way protected ground-truth entries enter the bank."""
        self._check_dim(entry.key)
        if self.entries:
            if entry.frame_index in {e.frame_index for e in self.entries}:
                raise DuplicateFrameError(
                    f"frame {entry.frame_index} already stored"
                )
            last = self.entries[-1].frame_index
            if entry.frame_index < last:
                raise FrameOrderError(
                    f"frame {entry.frame_index} would break ascending order "
                    f"(last stored is {last})"
                )
        self.entries.append(entry)

    def update(
        self, current: Embedding, current_frame: int, payload: Any = None
    ) -> UpdateReport:
        """Committed insertion attempt for the current frame.

        The top removal candidate is replaced when its relevance to the
        incoming key reaches ``tau_mem``; otherwise the bank grows. When a
        capacity limit would be exceeded by growth, the candidate is removed
        regardless of the threshold. Protected entries are never removed; if
        capacity is exceeded and only protected entries remain, the insertion
        fails and the bank is left unchanged.
        """
        self._check_dim(current)
        for e in self.entries:
            if e.frame_index == current_frame:
                raise DuplicateFrameError(f"frame {current_frame} already stored")
            if e.frame_index > current_frame:
                raise FrameOrderError(
                    f"current frame {current_frame} is older than stored "
                    f"frame {e.frame_index}"
                )
        candidate = self.evict_candidate(current, current_frame)
        cand_rel: Optional[float] = None
        if candidate is not None:
            idx, _ = candidate
            cand_rel = relevance(self.entries[idx].key, current)
            if cand_rel >= self.tau_mem:
                removed = self.entries.pop(idx)
                self.entries.append(
                    MemoryEntry(current_frame, current, payload)
                )
                return UpdateReport(
                    "replace", current_frame, removed.frame_index, cand_rel
                )
        # growth branch
        self.entries.append(MemoryEntry(current_frame, current, payload))
        if (
            self.capacity_limit is not None
            and len(self.entries) > self.capacity_limit
        ):
            if candidate is None:
                self.entries.pop()  # leave the bank untouched
                raise ProtectedBankError(
                    "capacity reached and only protected entries remain; "
                    f"cannot insert frame {current_frame}"
                )
            idx, _ = candidate
            removed = self.entries.pop(idx)
            return UpdateReport(
                "capacity_evict", current_frame, removed.frame_index, cand_rel
            )
        return UpdateReport("grow", current_frame, None, cand_rel)

    # -- internal --------------------------------------------------------

    def _check_dim(self, emb: Embedding) -> None:
        if self.entries and emb.dim != self.entries[0].key.dim:
            raise EmbeddingDimensionMismatch(
                f"bank holds dim {self.entries[0].key.dim}, got {emb.dim}"
            )
