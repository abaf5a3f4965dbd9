"""File backends: replay exported sequences byte-exactly.

Nothing here fabricates data. Frame keys come verbatim from the manifest's
embedding file; masks are decoded from per-frame run-length files; object
appearance pooling needs optional per-frame patch-feature files (a coarse
feature grid with its shape recorded in the embedding metadata); proposal
triples are looked up by their exact box prompt.
"""

from __future__ import annotations

import re
from typing import Any, Optional, Sequence

import numpy as np

from . import (
    BackendDescriptor,
    FrameRef,
    MissingDataError,
    MissingPriorError,
    UnknownFrameError,
    check_box_in_frame,
)
from ..formats import (
    SequenceManifest,
    read_embeddings_file,
    read_mask_file,
)
from ..fusion import Proposal, ProposalSet
from ..masks import ObjectMask
from ..memory import Embedding, MemoryBank

_GRID_RE = re.compile(r"grid=(\d+)x(\d+)")


class FileEmbedder:
    def __init__(self, manifest: SequenceManifest) -> None:
        self.manifest = manifest
        keys, self.metadata = read_embeddings_file(
            manifest.resolve(manifest.embeddings_path)
        )
        if len(keys) != manifest.frames:
            raise MissingDataError(
                f"embedding file holds {len(keys)} keys for "
                f"{manifest.frames} frames"
            )
        self._keys = keys
        self.descriptor = BackendDescriptor(
            kind="file",
            embedding_dim=keys[0].dim if keys else 1,
            deterministic=True,
            concurrent_safe=True,
        )

    def _check(self, frame: FrameRef) -> None:
        if frame.sequence_id != self.manifest.sequence_id:
            raise UnknownFrameError(f"unknown sequence {frame.sequence_id!r}")
        if not 0 <= frame.frame_index < self.manifest.frames:
            raise UnknownFrameError(
                f"frame {frame.frame_index} outside stored sequence"
            )

    def frame_key(self, frame: FrameRef) -> Embedding:
        self._check(frame)
        return self._keys[frame.frame_index]

    def object_appearance(self, frame: FrameRef, mask: ObjectMask) -> Embedding:
        """Masked mean over the stored patch-feature grid for this frame.

        The patch file's metadata must carry "grid=GHxGW"; each pixel maps to
        the patch cell covering it. An empty mask yields the zero vector.
        """
        self._check(frame)
        t = frame.frame_index
        if t not in self.manifest.feature_paths:
            raise MissingDataError(
                f"no patch-feature file for frame {t}; manifest lacks a "
                f"'features {t}' entry"
            )
        vectors, metadata = read_embeddings_file(
            self.manifest.resolve(self.manifest.feature_paths[t])
        )
        match = _GRID_RE.search(metadata)
        if not match:
            raise MissingDataError(
                f"patch-feature file for frame {t} lacks grid=GHxGW metadata"
            )
        gh, gw = int(match.group(1)), int(match.group(2))
        if gh * gw != len(vectors):
            raise MissingDataError(
                f"patch grid {gh}x{gw} does not match {len(vectors)} vectors"
            )
        if mask.shape != (self.manifest.height, self.manifest.width):
            raise ValueError(
                f"mask shape {mask.shape} does not match manifest frame"
            )
        dim = vectors[0].dim if vectors else self.descriptor.embedding_dim
        if mask.is_empty:
            return Embedding(np.zeros(dim))
        grid = np.stack([v.values for v in vectors]).reshape(gh, gw, dim)
        rows, cols = np.nonzero(mask.bits)
        cell_r = rows * gh // mask.height
        cell_c = cols * gw // mask.width
        return Embedding(grid[cell_r, cell_c].mean(axis=0))


class FileSegmenter:
    """Replays the manifest's per-frame masks bit-for-bit."""

    def __init__(self, manifest: SequenceManifest) -> None:
        self.manifest = manifest
        first = read_mask_file(manifest.resolve(manifest.mask_paths[0]))
        self._object_ids = [oid for oid, _ in first]
        keys, _ = read_embeddings_file(
            manifest.resolve(manifest.embeddings_path)
        )
        self.descriptor = BackendDescriptor(
            kind="file",
            embedding_dim=keys[0].dim if keys else 1,
            deterministic=True,
            concurrent_safe=True,
        )

    def object_ids(self) -> list[int]:
        return list(self._object_ids)

    def step(
        self,
        frame: FrameRef,
        bank: MemoryBank,
        prior: Optional[Sequence[ObjectMask]],
    ) -> list[ObjectMask]:
        if frame.frame_index == 0 and prior is None:
            raise MissingPriorError(
                "ground-truth prior masks are required at frame 0"
            )
        t = frame.frame_index
        if t not in self.manifest.mask_paths:
            raise UnknownFrameError(f"no stored masks for frame {t}")
        objects = read_mask_file(self.manifest.resolve(self.manifest.mask_paths[t]))
        by_id = dict(objects)
        if sorted(by_id) != sorted(self._object_ids):
            raise MissingDataError(
                f"frame {t} holds object ids {sorted(by_id)}, expected "
                f"{sorted(self._object_ids)}"
            )
        return [by_id[oid] for oid in self._object_ids]

    def memory_payload(
        self, frame: FrameRef, masks: Sequence[ObjectMask]
    ) -> Any:
        return ("file", frame.sequence_id, frame.frame_index)


class FileRefiner:
    """Replays stored proposal triples keyed by (frame, exact box)."""

    def __init__(self, manifest: SequenceManifest) -> None:
        self.manifest = manifest
        keys, _ = read_embeddings_file(
            manifest.resolve(manifest.embeddings_path)
        )
        self.descriptor = BackendDescriptor(
            kind="file",
            embedding_dim=keys[0].dim if keys else 1,
            deterministic=True,
            concurrent_safe=True,
        )

    def propose(
        self, frame: FrameRef, box: tuple[int, int, int, int]
    ) -> ProposalSet:
        check_box_in_frame(frame, box)
        entry = self.manifest.proposal_entries.get(
            (frame.frame_index, tuple(box))
        )
        if entry is None:
            raise MissingDataError(
                f"no stored proposals for frame {frame.frame_index} "
                f"box {box}"
            )
        mask_paths, app_path = entry[:3], entry[3]
        appearances, _ = read_embeddings_file(self.manifest.resolve(app_path))
        if len(appearances) != 3:
            raise MissingDataError(
                f"proposal appearance file {app_path} must hold 3 vectors"
            )
        proposals = []
        for rank, rel in enumerate(mask_paths, start=1):
            objects = read_mask_file(self.manifest.resolve(rel))
            if len(objects) != 1:
                raise MissingDataError(
                    f"proposal file {rel} must hold exactly one mask"
                )
            proposals.append(
                Proposal(
                    mask=objects[0][1],
                    appearance=appearances[rank - 1],
                    source_rank=rank,
                )
            )
        return ProposalSet(proposals)


def make_file_backends(
    manifest: SequenceManifest,
) -> tuple[FileEmbedder, FileSegmenter, FileRefiner]:
    return (
        FileEmbedder(manifest),
        FileSegmenter(manifest),
        FileRefiner(manifest),
    )


def file_source(manifest: SequenceManifest):
    """RunSource that replays a manifest; the stored masks double as the
    reference ground truth."""
    from ..pipeline import RunSource, SequenceDescriptor

    embedder, segmenter, refiner = make_file_backends(manifest)
    gt = []
    for t in range(manifest.frames):
        objects = read_mask_file(manifest.resolve(manifest.mask_paths[t]))
        by_id = dict(objects)
        gt.append([by_id[oid] for oid in segmenter.object_ids()])
    descriptor = SequenceDescriptor(
        manifest.sequence_id, manifest.frames, manifest.height, manifest.width
    )
    return RunSource(
        descriptor, gt, embedder, segmenter, refiner,
        object_ids=segmenter.object_ids(),
    )
