"""Export jobs: frame features, proposal triples, and palette-mask
conversion, emitted as tracker interchange files plus a sequence manifest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .features import PatchExtractor
from .writers import (
    atomic_write,
    manifest_bytes,
    write_mask_file,
    write_smem,
)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ExportError(RuntimeError):
    """A job-level failure (bad inputs, unreadable frames)."""


@dataclass
class ExportJob:
    """One sequence export: where frames live, which model/pooling to use,
    and where the manifest goes."""

    frames_dir: Path
    out_dir: Path
    model_id: str = "builtin-gray-patch"
    dim: int = 16
    grid: tuple[int, int] = (8, 12)
    sequence_id: str = "sequence"
    manifest_name: str = "sequence.manifest"

    def extractor(self) -> PatchExtractor:
        return PatchExtractor(self.model_id, self.dim, self.grid)

    @property
    def manifest_path(self) -> Path:
        return Path(self.out_dir) / self.manifest_name


@dataclass
class ExportReport:
    """What a job produced and which per-item failures it tolerated."""

    frames: int = 0
    height: int = 0
    width: int = 0
    embeddings_rel: Optional[str] = None
    feature_rels: dict[int, str] = field(default_factory=dict)
    mask_rels: dict[int, str] = field(default_factory=dict)
    proposal_entries: dict = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)


def list_frames(frames_dir: Path) -> list[Path]:
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise ExportError(f"frames directory not found: {frames_dir}")
    frames = sorted(
        p for p in frames_dir.iterdir()
        if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not frames:
        raise ExportError(f"no image frames in {frames_dir}")
    return frames


def load_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise ExportError(f"unreadable frame {path}: {exc}") from exc


def export_embeddings(
    job: ExportJob, with_patch_features: bool = True
) -> ExportReport:
    """One pooled key per frame (gap pooling) plus, optionally, per-frame
    patch-feature files for masked appearance pooling downstream. Any
    unreadable frame fails the job, naming the frame."""
    frames = list_frames(job.frames_dir)
    extractor = job.extractor()
    report = ExportReport(frames=len(frames))
    keys = []
    shape: Optional[tuple[int, int]] = None
    for t, frame_path in enumerate(frames):
        rgb = load_rgb(frame_path)
        if shape is None:
            shape = rgb.shape[:2]
        elif rgb.shape[:2] != shape:
            raise ExportError(
                f"frame {frame_path} has shape {rgb.shape[:2]}, expected {shape}"
            )
        keys.append(extractor.frame_key(rgb))
        if with_patch_features:
            rel = f"features/frame_{t:05d}.smem"
            gh, gw = job.grid
            write_smem(
                Path(job.out_dir) / rel,
                extractor.cell_features(rgb),
                f"grid={gh}x{gw};pool=patch-mean;{extractor.metadata_tag}",
            )
            report.feature_rels[t] = rel
    assert shape is not None
    report.height, report.width = int(shape[0]), int(shape[1])
    report.embeddings_rel = "keys.smem"
    write_smem(
        Path(job.out_dir) / report.embeddings_rel,
        np.stack(keys),
        f"pool=gap;{extractor.metadata_tag}",
    )
    return report


def _propose_in_box(
    rgb: np.ndarray, box: tuple[int, int, int, int]
) -> list[np.ndarray]:
    """Three candidate masks inside the box: a color-coherent region grown
    from the box center, the full box, and a centered half-box."""
    h, w, _ = rgb.shape
    r0, c0, r1, c1 = box
    full = np.zeros((h, w), dtype=bool)
    full[r0 : r1 + 1, c0 : c1 + 1] = True
    crop = rgb[r0 : r1 + 1, c0 : c1 + 1].astype(np.float32)
    ch, cw = crop.shape[:2]
    center = crop[
        max(0, ch // 2 - 1) : ch // 2 + 2, max(0, cw // 2 - 1) : cw // 2 + 2
    ].reshape(-1, 3).mean(axis=0)
    dist = np.linalg.norm(crop - center, axis=2)
    threshold = max(float(np.median(dist)), 1e-6)
    region = np.zeros((h, w), dtype=bool)
    region[r0 : r1 + 1, c0 : c1 + 1] = dist <= threshold
    half = np.zeros((h, w), dtype=bool)
    hr0 = r0 + (r1 - r0 + 1) // 4
    hr1 = r1 - (r1 - r0 + 1) // 4
    hc0 = c0 + (c1 - c0 + 1) // 4
    hc1 = c1 - (c1 - c0 + 1) // 4
    half[hr0 : hr1 + 1, hc0 : hc1 + 1] = True
    return [region, full, half]


def export_proposals(
    job: ExportJob, boxes: Sequence[tuple[int, int, int, int, int]]
) -> ExportReport:
    """Three proposal masks plus their appearance vectors per (frame, box)
    prompt. Per-item failures are recorded and the job continues."""
    frames = list_frames(job.frames_dir)
    extractor = job.extractor()
    report = ExportReport(frames=len(frames))
    for item in boxes:
        t, r0, c0, r1, c1 = (int(v) for v in item)
        if not 0 <= t < len(frames):
            report.failures.append(f"box for unknown frame {t}")
            continue
        rgb = load_rgb(frames[t])
        h, w, _ = rgb.shape
        if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
            report.failures.append(
                f"frame {t}: box ({r0},{c0},{r1},{c1}) outside {h}x{w}"
            )
            continue
        masks = _propose_in_box(rgb, (r0, c0, r1, c1))
        rels = []
        for rank, mask in enumerate(masks, start=1):
            rel = f"proposals/f{t:05d}_{r0}_{c0}_{r1}_{c1}_r{rank}.smrl"
            write_mask_file(Path(job.out_dir) / rel, [mask], [rank])
            rels.append(rel)
        apps = np.stack([extractor.masked_mean(rgb, m) for m in masks])
        rel_app = f"proposals/f{t:05d}_{r0}_{c0}_{r1}_{c1}_apps.smem"
        write_smem(
            Path(job.out_dir) / rel_app,
            apps,
            f"pool=masked-mean;{extractor.metadata_tag}",
        )
        report.proposal_entries[(t, (r0, c0, r1, c1))] = tuple(rels) + (rel_app,)
    return report


def convert_palette_masks(masks_dir: Path, out_dir: Path) -> ExportReport:
    """Convert palette-indexed mask images to run-length files, losslessly:
    object id = palette index; index 0 is background. Every object id seen
    anywhere in the sequence is written in every frame (empty when absent),
    so object order is constant."""
    masks_dir = Path(masks_dir)
    if not masks_dir.is_dir():
        raise ExportError(f"mask directory not found: {masks_dir}")
    files = sorted(
        p for p in masks_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not files:
        raise ExportError(f"no palette mask images in {masks_dir}")
    report = ExportReport(frames=len(files))
    index_maps: list[Optional[np.ndarray]] = []
    all_ids: set[int] = set()
    shape: Optional[tuple[int, int]] = None
    for path in files:
        try:
            with Image.open(path) as img:
                if img.mode != "P":
                    report.failures.append(
                        f"{path}: is mode {img.mode}, expected palette mode P"
                    )
                    index_maps.append(None)
                    continue
                indices = np.asarray(img)
        except (OSError, UnidentifiedImageError) as exc:
            report.failures.append(f"{path}: {exc}")
            index_maps.append(None)
            continue
        if shape is None:
            shape = indices.shape
        elif indices.shape != shape:
            report.failures.append(
                f"{path}: shape {indices.shape} differs from {shape}"
            )
            index_maps.append(None)
            continue
        index_maps.append(indices)
        all_ids.update(int(v) for v in np.unique(indices) if v != 0)
    if shape is None or not all_ids:
        raise ExportError(f"no usable palette masks in {masks_dir}")
    ids = sorted(all_ids)
    report.height, report.width = int(shape[0]), int(shape[1])
    for t, indices in enumerate(index_maps):
        if indices is None:
            continue
        rel = f"masks/frame_{t:05d}.smrl"
        write_mask_file(
            Path(out_dir) / rel, [indices == oid for oid in ids], ids
        )
        report.mask_rels[t] = rel
    return report


def boxes_from_mask_files(
    out_dir: Path, mask_rels: dict[int, str]
) -> list[tuple[int, int, int, int, int]]:
    """Derive one box prompt per (frame, object) as the tight bounding box
    of each converted mask — exactly the prompt the tracker will issue when
    replaying these masks, so stored proposals line up at runtime."""
    boxes = []
    for t in sorted(mask_rels):
        data = (Path(out_dir) / mask_rels[t]).read_bytes().decode()
        lines = data.strip("\n").split("\n")
        _, _, h, w, _ = lines[0].split(" ")
        h, w = int(h), int(w)
        for line in lines[1:]:
            parts = line.split(" ")
            runs = [tuple(int(v) for v in tok.split(":")) for tok in parts[2:]]
            if not runs:
                continue
            pixels = np.concatenate(
                [np.arange(start, start + n) for start, n in runs]
            )
            rows, cols = pixels // w, pixels % w
            boxes.append(
                (t, int(rows.min()), int(cols.min()),
                 int(rows.max()), int(cols.max()))
            )
    return boxes


def export_sequence(
    job: ExportJob,
    palette_masks_dir: Optional[Path] = None,
    boxes: Sequence[tuple[int, int, int, int, int]] = (),
    with_patch_features: bool = True,
    boxes_from_masks: bool = False,
) -> ExportReport:
    """Full export: embeddings (+ patch features), optional palette-mask
    conversion, optional proposal triples, and the manifest tying them
    together. The manifest is only written when masks cover every frame."""
    report = export_embeddings(job, with_patch_features=with_patch_features)
    if palette_masks_dir is not None:
        mask_report = convert_palette_masks(palette_masks_dir, job.out_dir)
        if mask_report.frames != report.frames:
            raise ExportError(
                f"{mask_report.frames} mask files for {report.frames} frames"
            )
        if (mask_report.height, mask_report.width) != (
            report.height,
            report.width,
        ):
            raise ExportError(
                "palette masks and frames disagree on dimensions: "
                f"{(mask_report.height, mask_report.width)} vs "
                f"{(report.height, report.width)}"
            )
        report.mask_rels = mask_report.mask_rels
        report.failures += mask_report.failures
    all_boxes = list(boxes)
    if boxes_from_masks:
        if not report.mask_rels:
            raise ExportError("boxes_from_masks needs converted masks")
        all_boxes += boxes_from_mask_files(job.out_dir, report.mask_rels)
    if all_boxes:
        prop_report = export_proposals(job, all_boxes)
        report.proposal_entries = prop_report.proposal_entries
        report.failures += prop_report.failures
    if set(report.mask_rels) == set(range(report.frames)) and report.frames:
        atomic_write(
            job.manifest_path,
            manifest_bytes(
                sequence_id=job.sequence_id,
                frames=report.frames,
                height=report.height,
                width=report.width,
                embeddings_rel=report.embeddings_rel,
                mask_rels=report.mask_rels,
                feature_rels=report.feature_rels,
                proposal_entries=report.proposal_entries,
            ),
        )
    return report


def read_boxes_file(path: Path) -> list[tuple[int, int, int, int, int]]:
    """Box prompts, one per line: `frame r0 c0 r1 c1`."""
    path = Path(path)
    if not path.exists():
        raise ExportError(f"boxes file not found: {path}")
    boxes = []
    for lineno, line in enumerate(path.read_text().split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ExportError(f"{path}:{lineno}: expected 'frame r0 c0 r1 c1'")
        try:
            boxes.append(tuple(int(v) for v in parts))
        except ValueError as exc:
            raise ExportError(f"{path}:{lineno}: {exc}") from exc
    return boxes
