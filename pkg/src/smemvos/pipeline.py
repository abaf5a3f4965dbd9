"""Per-sequence tracking loop: decode with memory and prior, fuse, feed the
refined masks back, and update the bank on cadence frames.

The loop is strictly sequential within a sequence (autoregressive); distinct
sequences are independent and may run in parallel workers.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .backends import BackendError, Embedder, FrameRef, Refiner, Segmenter
from .fusion import fuse_frame
from .masks import ObjectMask
from .memory import Embedding, EmbeddingDimensionMismatch, MemoryBank, MemoryEntry
from .metrics import MetricBundle, vots_bundle


@dataclass(frozen=True)
class Cadence:
    """How often a frame is offered to the memory bank.

    "every_k N" inserts every N frames; "fraction_of_length N" inserts at
    interval max(1, floor(L / N)) for a sequence of length L.
    """

    kind: str
    value: int

    def __post_init__(self) -> None:
        if self.kind not in ("every_k", "fraction_of_length"):
            raise ValueError(f"unknown cadence kind {self.kind!r}")
        if self.value < 1:
            raise ValueError("cadence value must be >= 1")

    @classmethod
    def every(cls, k: int) -> "Cadence":
        return cls("every_k", k)

    @classmethod
    def fraction(cls, denominator: int) -> "Cadence":
        return cls("fraction_of_length", denominator)

    def interval_for(self, length: int) -> int:
        if self.kind == "every_k":
            return self.value
        return max(1, length // self.value)


@dataclass(frozen=True)
class PipelineConfig:
    lam: float = 1.0
    tau_mem: float = 0.85
    tau_fuse: float = 0.6
    cadence: Cadence = Cadence("fraction_of_length", 30)
    enable_smem: bool = True
    enable_hqtf: bool = True
    capacity_limit: Optional[int] = None
    seed: int = 0
    # Reserved: per-object banks are a config stub only; the bank is shared
    # per sequence (frame-level keys).
    object_wise_banks: bool = False

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        for name in ("tau_mem", "tau_fuse"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1]")
        if self.capacity_limit is not None and self.capacity_limit < 1:
            raise ValueError("capacity_limit must be positive when set")


@dataclass(frozen=True)
class SequenceDescriptor:
    sequence_id: str
    length: int
    height: int
    width: int


@dataclass
class SequenceResult:
    """Everything one tracked sequence produced.

    ``masks`` holds the final per-frame outputs (after fusion when enabled);
    ``raw_masks`` the decoder outputs before fusion. ``frame_seconds`` is
    wall-clock and is excluded from serialized artifacts so reruns stay
    byte-identical.
    """

    sequence_id: str
    masks: list[list[ObjectMask]]
    raw_masks: list[list[ObjectMask]]
    memory_sizes: list[int]
    fusion_accepted: list[list[bool]]
    frame_seconds: list[float] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.masks)

    @property
    def num_objects(self) -> int:
        return len(self.masks[0]) if self.masks else 0

    @property
    def final_memory_size(self) -> int:
        return self.memory_sizes[-1] if self.memory_sizes else 0


class SequenceAborted(RuntimeError):
    """A backend error stopped the sequence; ``partial`` holds the frames
    completed before the failure."""

    def __init__(self, partial: SequenceResult, frame: int, cause: Exception):
        super().__init__(
            f"sequence {partial.sequence_id!r} aborted at frame {frame}: {cause}"
        )
        self.partial = partial
        self.frame = frame
        self.cause = cause


def frame_key_of(
    frame: FrameRef, embedder: Embedder, expected_dim: Optional[int] = None
) -> Embedding:
    """Fetch the frame key, validating dimensionality before any decoding
    depends on it."""
    key = embedder.frame_key(frame)
    if expected_dim is not None and key.dim != expected_dim:
        raise EmbeddingDimensionMismatch(
            f"frame key dim {key.dim} does not match expected {expected_dim}"
        )
    return key


def _check_backend_dims(
    embedder: Embedder, segmenter: Segmenter, refiner: Optional[Refiner]
) -> None:
    dims = {embedder.descriptor.embedding_dim, segmenter.descriptor.embedding_dim}
    if refiner is not None:
        dims.add(refiner.descriptor.embedding_dim)
    if len(dims) != 1:
        raise EmbeddingDimensionMismatch(
            f"backends disagree on embedding dim: {sorted(dims)}"
        )


def run_sequence(
    descriptor: SequenceDescriptor,
    gt_first_frame: Sequence[ObjectMask],
    cfg: PipelineConfig,
    embedder: Embedder,
    segmenter: Segmenter,
    refiner: Optional[Refiner] = None,
) -> SequenceResult:
    """Track one sequence.

    Frame 0 outputs the ground truth and seeds the bank with a protected
    entry. From frame 1 on, the decoder gets the previous frame's fused
    masks as prior when fusion is enabled, the raw masks otherwise; memory
    insertion is attempted only on cadence frames, and with smart memory
    disabled those insertions append without eviction (linear baseline).
    """
    if cfg.object_wise_banks:
        raise NotImplementedError(
            "object-wise banks are a reserved config stub"
        )
    if len(gt_first_frame) < 1:
        raise ValueError("gt_first_frame must contain at least one object")
    if cfg.enable_hqtf and refiner is None:
        raise ValueError("enable_hqtf requires a refiner backend")
    _check_backend_dims(embedder, segmenter, refiner)
    num_objects = len(gt_first_frame)
    frame_shape = (descriptor.height, descriptor.width)
    for m in gt_first_frame:
        if m.shape != frame_shape:
            raise ValueError(
                f"ground-truth mask shape {m.shape} != frame {frame_shape}"
            )

    interval = cfg.cadence.interval_for(descriptor.length)
    bank = MemoryBank(
        lam=cfg.lam,
        tau_mem=cfg.tau_mem,
        capacity_limit=cfg.capacity_limit if cfg.enable_smem else None,
    )

    result = SequenceResult(
        sequence_id=descriptor.sequence_id,
        masks=[],
        raw_masks=[],
        memory_sizes=[],
        fusion_accepted=[],
        frame_seconds=[],
    )

    start = time.perf_counter()
    frame0 = FrameRef(descriptor.sequence_id, 0, *frame_shape)
    gt_first = list(gt_first_frame)
    try:
        key0 = frame_key_of(frame0, embedder)
        bank.insert(
            MemoryEntry(
                frame_index=0,
                key=key0,
                payload=segmenter.memory_payload(frame0, gt_first),
                protected=True,
            )
        )
    except BackendError as exc:
        raise SequenceAborted(result, 0, exc) from exc
    result.masks.append(gt_first)
    result.raw_masks.append(gt_first)
    result.memory_sizes.append(len(bank))
    result.fusion_accepted.append([False] * num_objects)
    result.frame_seconds.append(time.perf_counter() - start)

    prev_raw = gt_first
    prev_final = gt_first
    for t in range(1, descriptor.length):
        start = time.perf_counter()
        frame = FrameRef(descriptor.sequence_id, t, *frame_shape)
        prior = prev_final if cfg.enable_hqtf else prev_raw
        try:
            raw = segmenter.step(frame, bank, prior)
            if len(raw) != num_objects:
                raise ValueError(
                    f"segmenter returned {len(raw)} masks for {num_objects} "
                    "objects"
                )
            if cfg.enable_hqtf:
                assert refiner is not None
                outcomes = fuse_frame(
                    raw, refiner, embedder, frame, cfg.tau_fuse
                )
                final = [o.mask for o in outcomes]
                accepted = [o.accepted for o in outcomes]
            else:
                final = list(raw)
                accepted = [False] * num_objects
            if t % interval == 0:
                key = frame_key_of(frame, embedder, expected_dim=bank.dim)
                payload = segmenter.memory_payload(frame, final)
                if cfg.enable_smem:
                    bank.update(key, t, payload)
                else:
                    bank.insert(MemoryEntry(t, key, payload))
        except BackendError as exc:
            raise SequenceAborted(result, t, exc) from exc
        result.masks.append(final)
        result.raw_masks.append(list(raw))
        result.memory_sizes.append(len(bank))
        result.fusion_accepted.append(accepted)
        result.frame_seconds.append(time.perf_counter() - start)
        prev_raw, prev_final = list(raw), final
    return result


# -- batch running and the component ablation --------------------------------


@dataclass
class RunSource:
    """One runnable sequence: descriptor, full ground truth, and backends."""

    descriptor: SequenceDescriptor
    gt: list[list[ObjectMask]]
    embedder: Embedder
    segmenter: Segmenter
    refiner: Optional[Refiner] = None
    object_ids: Optional[list[int]] = None

    @property
    def gt_first(self) -> list[ObjectMask]:
        return self.gt[0]


@dataclass
class AblationRow:
    name: str
    bundle: MetricBundle
    mean_final_memory: float


ABLATION_ROWS = (
    ("base", False, False),
    ("base+smem", True, False),
    ("base+hqtf", False, True),
    ("full", True, True),
)


def run_batch(
    sources: Sequence[RunSource], cfg: PipelineConfig, workers: int = 1
) -> list[SequenceResult]:
    """Run several sequences under one config; output order always matches
    input order regardless of worker count."""
    if workers <= 1 or len(sources) <= 1:
        return [
            run_sequence(
                s.descriptor, s.gt_first, cfg, s.embedder, s.segmenter, s.refiner
            )
            for s in sources
        ]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(
                run_sequence,
                s.descriptor,
                s.gt_first,
                cfg,
                s.embedder,
                s.segmenter,
                s.refiner,
            )
            for s in sources
        ]
        return [f.result() for f in futures]


def ablate(
    sources: Sequence[RunSource],
    base_cfg: PipelineConfig,
    workers: int = 1,
) -> list[AblationRow]:
    """Four-row component table: base, base+smem, base+hqtf, full.

    Every row runs the same sequences with the same seeds; only the two
    component toggles change.
    """
    if not sources:
        raise ValueError("ablate needs at least one sequence")
    rows: list[AblationRow] = []
    for name, smem, hqtf in ABLATION_ROWS:
        cfg = replace(base_cfg, enable_smem=smem, enable_hqtf=hqtf)
        results = run_batch(sources, cfg, workers=workers)
        bundle = vots_bundle(
            [r.masks for r in results], [s.gt for s in sources]
        )
        mean_final = sum(r.final_memory_size for r in results) / len(results)
        rows.append(AblationRow(name, bundle, mean_final))
    return rows
