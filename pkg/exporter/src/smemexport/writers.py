"""Standalone writers for the interchange formats.

Deliberately independent of the tracking package: this tool only has to
produce bytes the tracker's validators accept, so the formats are written
from their specification here (SMRL v1 run-length masks, SMEM v1 binary
embeddings, line-oriented sequence manifests). All writes are atomic.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np


def atomic_write(path: Path | str, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _runs(flat: np.ndarray) -> list[tuple[int, int]]:
    idx = np.flatnonzero(flat)
    if idx.size == 0:
        return []
    breaks = np.nonzero(np.diff(idx) > 1)[0]
    starts = np.concatenate(([0], breaks + 1))
    ends = np.concatenate((breaks, [idx.size - 1]))
    return [(int(idx[s]), int(idx[e] - idx[s] + 1)) for s, e in zip(starts, ends)]


def mask_file_bytes(masks: Sequence[np.ndarray], ids: Sequence[int]) -> bytes:
    """SMRL v1: header line, then one run-length line per object."""
    if not masks:
        raise ValueError("at least one object mask is required")
    h, w = masks[0].shape
    lines = [f"SMRL 1 {h} {w} {len(masks)}"]
    for oid, mask in zip(ids, masks):
        if mask.shape != (h, w):
            raise ValueError("all masks in one frame must share dimensions")
        body = " ".join(f"{s}:{n}" for s, n in _runs(mask.reshape(-1)))
        lines.append(f"obj {oid} {body}" if body else f"obj {oid}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_mask_file(
    path: Path | str, masks: Sequence[np.ndarray], ids: Sequence[int]
) -> None:
    atomic_write(path, mask_file_bytes(masks, ids))


def smem_bytes(vectors: np.ndarray, metadata: str) -> bytes:
    """SMEM v1: magic, u32 version/count/dim, metadata, float32 LE payload."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2:
        raise ValueError("vectors must be a (count, dim) array")
    count, dim = vectors.shape
    meta = metadata.encode("utf-8")
    head = b"SMEM" + struct.pack("<III", 1, count, max(dim, 1))
    return head + struct.pack("<I", len(meta)) + meta + vectors.astype("<f4").tobytes()


def write_smem(path: Path | str, vectors: np.ndarray, metadata: str) -> None:
    atomic_write(path, smem_bytes(vectors, metadata))


def manifest_bytes(
    sequence_id: str,
    frames: int,
    height: int,
    width: int,
    embeddings_rel: str,
    mask_rels: dict[int, str],
    feature_rels: dict[int, str] | None = None,
    proposal_entries: dict[tuple[int, tuple[int, int, int, int]], tuple[str, ...]]
    | None = None,
) -> bytes:
    lines = [
        f"sequence = {sequence_id}",
        f"frames = {frames}",
        f"height = {height}",
        f"width = {width}",
        f"embeddings = {embeddings_rel}",
    ]
    for t in sorted(mask_rels):
        lines.append(f"mask {t} = {mask_rels[t]}")
    for t in sorted(feature_rels or {}):
        lines.append(f"features {t} = {feature_rels[t]}")
    for (t, box), rels in sorted((proposal_entries or {}).items()):
        box_s = " ".join(str(v) for v in box)
        lines.append(f"proposals {t} {box_s} = " + " ".join(rels))
    return ("\n".join(lines) + "\n").encode("utf-8")
