"""Bit-exact file formats: run-length masks, binary embeddings, sequence
manifests, pipeline configs, and results CSV.

Every codec round-trips byte-exactly and rejects malformed input with a
typed error; writers are whole-file atomic (write to a temp file in the
same directory, then rename).
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .masks import ObjectMask, masks_overlap
from .memory import Embedding


class FormatError(ValueError):
    """Base class for malformed interchange data."""


class MaskParseError(FormatError):
    """Base class for malformed mask files."""


class MaskHeaderError(MaskParseError):
    """The SMRL header line is malformed or inconsistent."""


class MaskRunBoundsError(MaskParseError):
    """A run lies outside the pixel grid or runs are not ascending."""


class MaskOverlapError(MaskParseError):
    """Two objects in one mask file claim the same pixel."""


class EmbeddingParseError(FormatError):
    """Base class for malformed embedding files."""


class EmbeddingMagicError(EmbeddingParseError):
    """Bad magic bytes or unsupported version."""


class EmbeddingTruncationError(EmbeddingParseError):
    """The file ends before the declared payload does (or has trailing bytes)."""


class ManifestError(FormatError):
    """A sequence manifest is malformed or references missing files."""


class ConfigParseError(FormatError):
    """A pipeline config file is malformed."""


# -- atomic writes ----------------------------------------------------------


def atomic_write_bytes(path: Path | str, data: bytes) -> None:
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


# -- SMRL v1: run-length mask files -----------------------------------------


def _runs_of(bits_flat: np.ndarray) -> list[tuple[int, int]]:
    idx = np.flatnonzero(bits_flat)
    if idx.size == 0:
        return []
    breaks = np.nonzero(np.diff(idx) > 1)[0]
    starts = np.concatenate(([0], breaks + 1))
    ends = np.concatenate((breaks, [idx.size - 1]))
    return [
        (int(idx[s]), int(idx[e] - idx[s] + 1)) for s, e in zip(starts, ends)
    ]


def encode_mask(masks: Sequence[ObjectMask], ids: Sequence[int]) -> bytes:
    """Encode per-object masks of one frame as an SMRL v1 text file."""
    if len(masks) != len(ids):
        raise ValueError("one object id per mask is required")
    if len(masks) == 0:
        raise ValueError("at least one object is required")
    if len(set(ids)) != len(ids):
        raise ValueError("object ids must be unique")
    h, w = masks[0].shape
    for m in masks[1:]:
        masks[0].require_same_shape(m)
    if masks_overlap(list(masks)):
        raise MaskOverlapError("objects within one frame must not overlap")
    lines = [f"SMRL 1 {h} {w} {len(masks)}"]
    for oid, m in zip(ids, masks):
        runs = _runs_of(m.bits.ravel())
        body = " ".join(f"{s}:{n}" for s, n in runs)
        lines.append(f"obj {oid} {body}" if body else f"obj {oid}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_mask(data: bytes) -> list[tuple[int, ObjectMask]]:
    """Decode an SMRL v1 file into (object_id, mask) pairs."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MaskHeaderError(f"not UTF-8 text: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    else:
        raise MaskHeaderError("file must end with a newline")
    if not lines:
        raise MaskHeaderError("empty file")
    header = lines[0].split(" ")
    if len(header) != 5 or header[0] != "SMRL":
        raise MaskHeaderError(f"bad header line: {lines[0]!r}")
    if header[1] != "1":
        raise MaskHeaderError(f"unsupported version {header[1]!r}")
    try:
        h, w, count = int(header[2]), int(header[3]), int(header[4])
    except ValueError as exc:
        raise MaskHeaderError(f"non-integer header field: {exc}") from exc
    if h < 1 or w < 1 or count < 0:
        raise MaskHeaderError(f"invalid dimensions {h}x{w} or count {count}")
    if len(lines) - 1 != count:
        raise MaskHeaderError(
            f"expected {count} object lines, found {len(lines) - 1}"
        )
    total = h * w
    claimed = np.zeros(total, dtype=bool)
    out: list[tuple[int, ObjectMask]] = []
    seen_ids: set[int] = set()
    for line in lines[1:]:
        parts = line.split(" ")
        if len(parts) < 2 or parts[0] != "obj":
            raise MaskHeaderError(f"bad object line: {line!r}")
        try:
            oid = int(parts[1])
        except ValueError as exc:
            raise MaskHeaderError(f"bad object id in {line!r}") from exc
        if oid in seen_ids:
            raise MaskHeaderError(f"duplicate object id {oid}")
        seen_ids.add(oid)
        flat = np.zeros(total, dtype=bool)
        prev_end = -1
        for token in parts[2:]:
            try:
                start_s, len_s = token.split(":")
                start, length = int(start_s), int(len_s)
            except ValueError as exc:
                raise MaskHeaderError(f"bad run token {token!r}") from exc
            if length < 1 or start < 0 or start + length > total:
                raise MaskRunBoundsError(
                    f"run {token} outside 0..{total} grid"
                )
            if start <= prev_end:
                raise MaskRunBoundsError(
                    f"run {token} not ascending/disjoint within object {oid}"
                )
            if claimed[start : start + length].any():
                raise MaskOverlapError(
                    f"run {token} overlaps another object"
                )
            flat[start : start + length] = True
            claimed[start : start + length] = True
            prev_end = start + length - 1
        out.append((oid, ObjectMask(flat.reshape(h, w))))
    return out


def write_mask_file(
    path: Path | str, masks: Sequence[ObjectMask], ids: Sequence[int]
) -> None:
    atomic_write_bytes(path, encode_mask(masks, ids))


def read_mask_file(path: Path | str) -> list[tuple[int, ObjectMask]]:
    return decode_mask(Path(path).read_bytes())


# -- SMEM v1: binary embedding files -----------------------------------------

_SMEM_MAGIC = b"SMEM"


def encode_embeddings(
    embeddings: Sequence[Embedding], metadata: str = ""
) -> bytes:
    """Encode embeddings as an SMEM v1 binary blob (float32, little-endian,
    frame-major). Metadata records provenance such as the pooling method."""
    if embeddings:
        dim = embeddings[0].dim
        for e in embeddings[1:]:
            if e.dim != dim:
                raise ValueError("all embeddings must share one dim")
    else:
        dim = 1
    meta = metadata.encode("utf-8")
    buf = io.BytesIO()
    buf.write(_SMEM_MAGIC)
    buf.write(struct.pack("<III", 1, len(embeddings), dim))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for e in embeddings:
        buf.write(e.values.astype("<f4").tobytes())
    return buf.getvalue()


def decode_embeddings(data: bytes) -> tuple[list[Embedding], str]:
    """Decode an SMEM v1 blob into (embeddings, metadata)."""
    if len(data) < 16:
        raise EmbeddingTruncationError(
            f"file too short for header: {len(data)} bytes"
        )
    if data[:4] != _SMEM_MAGIC:
        raise EmbeddingMagicError(f"bad magic {data[:4]!r}")
    version, count, dim = struct.unpack("<III", data[4:16])
    if version != 1:
        raise EmbeddingMagicError(f"unsupported version {version}")
    if dim < 1:
        raise EmbeddingParseError(f"dim must be >= 1, got {dim}")
    if len(data) < 20:
        raise EmbeddingTruncationError("missing metadata length")
    (meta_len,) = struct.unpack("<I", data[16:20])
    expected = 20 + meta_len + 4 * count * dim
    if len(data) < expected:
        raise EmbeddingTruncationError(
            f"expected {expected} bytes, got {len(data)}"
        )
    if len(data) > expected:
        raise EmbeddingTruncationError(
            f"{len(data) - expected} trailing bytes after payload"
        )
    try:
        metadata = data[20 : 20 + meta_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EmbeddingParseError(f"metadata not UTF-8: {exc}") from exc
    values = np.frombuffer(
        data, dtype="<f4", count=count * dim, offset=20 + meta_len
    )
    if not np.all(np.isfinite(values)):
        raise EmbeddingParseError("non-finite embedding values")
    rows = values.astype(np.float64).reshape(count, dim)
    return [Embedding(row) for row in rows], metadata


def write_embeddings_file(
    path: Path | str, embeddings: Sequence[Embedding], metadata: str = ""
) -> None:
    atomic_write_bytes(path, encode_embeddings(embeddings, metadata))


def read_embeddings_file(path: Path | str) -> tuple[list[Embedding], str]:
    return decode_embeddings(Path(path).read_bytes())


# -- sequence manifests ------------------------------------------------------


@dataclass
class SequenceManifest:
    """Line-oriented description of one replayable sequence.

    Paths are stored relative to the manifest file. `features` (per-frame
    patch-feature embedding files) and `proposals` (per box prompt: three
    mask files plus one appearance embedding file) are optional.
    """

    sequence_id: str
    frames: int
    height: int
    width: int
    embeddings_path: str
    mask_paths: dict[int, str]
    feature_paths: dict[int, str] = field(default_factory=dict)
    proposal_entries: dict[
        tuple[int, tuple[int, int, int, int]], tuple[str, str, str, str]
    ] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return (self.base_dir / rel).resolve()


def write_manifest(path: Path | str, manifest: SequenceManifest) -> None:
    lines = [
        f"sequence = {manifest.sequence_id}",
        f"frames = {manifest.frames}",
        f"height = {manifest.height}",
        f"width = {manifest.width}",
        f"embeddings = {manifest.embeddings_path}",
    ]
    for t in sorted(manifest.mask_paths):
        lines.append(f"mask {t} = {manifest.mask_paths[t]}")
    for t in sorted(manifest.feature_paths):
        lines.append(f"features {t} = {manifest.feature_paths[t]}")
    for (t, box), paths in sorted(manifest.proposal_entries.items()):
        box_s = " ".join(str(v) for v in box)
        lines.append(f"proposals {t} {box_s} = " + " ".join(paths))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path: Path | str) -> SequenceManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    fields: dict[str, str] = {}
    mask_paths: dict[int, str] = {}
    feature_paths: dict[int, str] = {}
    proposal_entries: dict = {}
    for lineno, raw in enumerate(path.read_text().split("\n"), start=1):
        if not raw.strip():
            continue
        if " = " not in raw:
            raise ManifestError(f"{path}:{lineno}: expected 'key = value'")
        key, value = raw.split(" = ", 1)
        tokens = key.split(" ")
        if tokens[0] in {"sequence", "frames", "height", "width", "embeddings"}:
            if len(tokens) != 1:
                raise ManifestError(f"{path}:{lineno}: bad key {key!r}")
            fields[key] = value
        elif tokens[0] == "mask" and len(tokens) == 2:
            mask_paths[int(tokens[1])] = value
        elif tokens[0] == "features" and len(tokens) == 2:
            feature_paths[int(tokens[1])] = value
        elif tokens[0] == "proposals" and len(tokens) == 6:
            t = int(tokens[1])
            box = tuple(int(v) for v in tokens[2:6])
            paths = tuple(value.split(" "))
            if len(paths) != 4:
                raise ManifestError(
                    f"{path}:{lineno}: proposals need 3 mask paths + 1 "
                    "appearance path"
                )
            proposal_entries[(t, box)] = paths
        else:
            raise ManifestError(f"{path}:{lineno}: unknown key {key!r}")
    for required in ("sequence", "frames", "height", "width", "embeddings"):
        if required not in fields:
            raise ManifestError(f"{path}: missing required key {required!r}")
    try:
        manifest = SequenceManifest(
            sequence_id=fields["sequence"],
            frames=int(fields["frames"]),
            height=int(fields["height"]),
            width=int(fields["width"]),
            embeddings_path=fields["embeddings"],
            mask_paths=mask_paths,
            feature_paths=feature_paths,
            proposal_entries=proposal_entries,
            base_dir=path.parent,
        )
    except ValueError as exc:
        raise ManifestError(f"{path}: bad numeric field: {exc}") from exc
    if manifest.frames < 1:
        raise ManifestError(f"{path}: frames must be positive")
    if set(mask_paths) != set(range(manifest.frames)):
        raise ManifestError(
            f"{path}: mask lines must cover frames 0..{manifest.frames - 1}"
        )
    for rel in _all_referenced(manifest):
        target = manifest.resolve(rel)
        if not target.exists():
            raise ManifestError(f"{path}: referenced file missing: {target}")
    return manifest


def _all_referenced(manifest: SequenceManifest) -> list[str]:
    refs = [manifest.embeddings_path]
    refs += list(manifest.mask_paths.values())
    refs += list(manifest.feature_paths.values())
    for paths in manifest.proposal_entries.values():
        refs += list(paths)
    return refs


def validate_manifest(manifest: SequenceManifest) -> None:
    """Deep consistency check: every referenced file parses and agrees with
    the declared dimensions."""
    embeddings, _ = read_embeddings_file(
        manifest.resolve(manifest.embeddings_path)
    )
    if len(embeddings) != manifest.frames:
        raise ManifestError(
            f"embedding count {len(embeddings)} != frames {manifest.frames}"
        )
    for t, rel in manifest.mask_paths.items():
        objects = read_mask_file(manifest.resolve(rel))
        for _, mask in objects:
            if mask.shape != (manifest.height, manifest.width):
                raise ManifestError(
                    f"mask file {rel} has shape {mask.shape}, manifest says "
                    f"{(manifest.height, manifest.width)}"
                )
    for rel in manifest.feature_paths.values():
        read_embeddings_file(manifest.resolve(rel))
    for paths in manifest.proposal_entries.values():
        for rel in paths[:3]:
            read_mask_file(manifest.resolve(rel))
        apps, _ = read_embeddings_file(manifest.resolve(paths[3]))
        if len(apps) != 3:
            raise ManifestError(
                f"proposal appearance file {paths[3]} must hold 3 vectors"
            )


# -- pipeline config ---------------------------------------------------------

_CONFIG_KEYS = (
    "seed",
    "lambda",
    "tau_mem",
    "tau_fuse",
    "cadence",
    "enable_smem",
    "enable_hqtf",
    "capacity_limit",
)


def write_config(path: Path | str, cfg) -> None:
    atomic_write_bytes(path, config_to_bytes(cfg))


def config_to_bytes(cfg) -> bytes:
    cadence = f"{cfg.cadence.kind} {cfg.cadence.value}"
    cap = "none" if cfg.capacity_limit is None else str(cfg.capacity_limit)
    lines = [
        f"seed = {cfg.seed}",
        f"lambda = {cfg.lam!r}",
        f"tau_mem = {cfg.tau_mem!r}",
        f"tau_fuse = {cfg.tau_fuse!r}",
        f"cadence = {cadence}",
        f"enable_smem = {'true' if cfg.enable_smem else 'false'}",
        f"enable_hqtf = {'true' if cfg.enable_hqtf else 'false'}",
        f"capacity_limit = {cap}",
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def read_config(path: Path | str):
    path = Path(path)
    if not path.exists():
        raise ConfigParseError(f"config not found: {path}")
    return config_from_bytes(path.read_bytes(), str(path))


def config_from_bytes(data: bytes, origin: str = "<config>"):
    from .pipeline import Cadence, PipelineConfig  # local import: no cycle

    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigParseError(f"{origin}: not UTF-8: {exc}") from exc
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.split("\n"), start=1):
        if not raw.strip():
            continue
        if " = " not in raw:
            raise ConfigParseError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = raw.split(" = ", 1)
        if key not in _CONFIG_KEYS:
            raise ConfigParseError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigParseError(f"{origin}:{lineno}: duplicate key {key!r}")
        values[key] = value
    missing = [k for k in _CONFIG_KEYS if k not in values]
    if missing:
        raise ConfigParseError(f"{origin}: missing keys: {', '.join(missing)}")
    try:
        cadence_kind, cadence_value = values["cadence"].split(" ")
        cadence = Cadence(cadence_kind, int(cadence_value))
        cap_raw = values["capacity_limit"]
        return PipelineConfig(
            seed=int(values["seed"]),
            lam=float(values["lambda"]),
            tau_mem=float(values["tau_mem"]),
            tau_fuse=float(values["tau_fuse"]),
            cadence=cadence,
            enable_smem=values["enable_smem"] == "true",
            enable_hqtf=values["enable_hqtf"] == "true",
            capacity_limit=None if cap_raw == "none" else int(cap_raw),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigParseError(f"{origin}: bad value: {exc}") from exc


# -- results CSV -------------------------------------------------------------

RESULT_COLUMNS = (
    "sequence_id",
    "object_id",
    "Q",
    "Acc",
    "Rob",
    "NRE",
    "DRE",
    "ADQ",
    "J",
    "F",
    "JF",
    "final_memory_size",
)

RESULTS_HEADER_NOTE = (
    "# VOTS-style rows use textual metric definitions, "
    "not the official toolkit protocol"
)


def format_metric(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.9f}"


def results_csv_bytes(rows: Sequence[dict]) -> bytes:
    """Serialize result rows; metric values are fixed-precision strings so
    output is byte-stable."""
    out = io.StringIO()
    out.write(RESULTS_HEADER_NOTE + "\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in rows:
        writer.writerow([str(row.get(c, "")) for c in RESULT_COLUMNS])
    return out.getvalue().encode("utf-8")


def write_results_csv(path: Path | str, rows: Sequence[dict]) -> None:
    atomic_write_bytes(path, results_csv_bytes(rows))
