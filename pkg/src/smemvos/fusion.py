"""Proposal selection and appearance-verified mask fusion.

Each coarse tracker mask is turned into a box prompt; a refiner backend
answers with three candidate masks. The candidate whose appearance feature
best matches the tracker's object is kept only when the match clears a
similarity threshold — otherwise the original mask passes through
unchanged, so fusion can never silently swap in a wrong object.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .backends import BackendError, Embedder, FrameRef, Refiner
from .masks import ObjectMask
from .memory import Embedding, relevance


@dataclass
class Proposal:
    """One candidate mask with the appearance feature of its own region."""

    mask: ObjectMask
    appearance: Embedding
    source_rank: int

    def __post_init__(self) -> None:
        if self.source_rank not in (1, 2, 3):
            raise ValueError("source_rank must be 1, 2, or 3")


class ProposalSet:
    """Exactly three proposals with matching mask dimensions."""

    __slots__ = ("proposals",)

    def __init__(self, proposals: Sequence[Proposal]) -> None:
        members = tuple(proposals)
        if len(members) != 3:
            raise ValueError("a proposal set holds exactly three proposals")
        ranks = sorted(p.source_rank for p in members)
        if ranks != [1, 2, 3]:
            raise ValueError("proposal ranks must cover {1, 2, 3}")
        shape = members[0].mask.shape
        dim = members[0].appearance.dim
        for p in members[1:]:
            if p.mask.shape != shape:
                raise ValueError("proposal mask dimensions must all match")
            if p.appearance.dim != dim:
                raise ValueError("proposal appearance dims must all match")
        self.proposals = members

    def by_rank(self) -> list[Proposal]:
        return sorted(self.proposals, key=lambda p: p.source_rank)


@dataclass
class FusionOutcome:
    """Per-object result of one fusion step.

    When ``accepted`` is False the mask is bit-identical to the tracker's
    input mask. ``chosen_rank`` is None when refinement was skipped (empty
    input mask) or failed; ``error`` carries the backend failure, if any.
    """

    mask: ObjectMask
    accepted: bool
    best_similarity: float
    chosen_rank: Optional[int] = None
    error: Optional[str] = None


def select_proposal(
    pset: ProposalSet, vos_appearance: Embedding
) -> tuple[Proposal, float]:
    """Pick the proposal whose appearance is most similar to the tracker
    object's appearance; ties go to the smallest source rank."""
    best: Optional[Proposal] = None
    best_sim = 0.0
    for p in pset.by_rank():
        sim = relevance(p.appearance, vos_appearance)
        if best is None or sim > best_sim:
            best, best_sim = p, sim
    assert best is not None
    return best, best_sim


def verify(
    best: Proposal,
    best_similarity: float,
    vos_mask: ObjectMask,
    tau_fuse: float,
) -> FusionOutcome:
    """Accept the selected proposal only on a strict threshold win;
    equality rejects and the tracker mask passes through verbatim."""
    best.mask.require_same_shape(vos_mask)
    if best_similarity > tau_fuse:
        return FusionOutcome(
            mask=best.mask,
            accepted=True,
            best_similarity=best_similarity,
            chosen_rank=best.source_rank,
        )
    return FusionOutcome(
        mask=vos_mask,
        accepted=False,
        best_similarity=best_similarity,
        chosen_rank=best.source_rank,
    )


def mask_to_box_prompt(
    mask: ObjectMask,
) -> Optional[tuple[int, int, int, int]]:
    """Tight inclusive bounding box (row_min, col_min, row_max, col_max)
    of the set pixels; None for an empty mask."""
    if mask.is_empty:
        return None
    rows = mask.bits.any(axis=1).nonzero()[0]
    cols = mask.bits.any(axis=0).nonzero()[0]
    return (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def fuse_frame(
    vos_masks: Sequence[ObjectMask],
    refiner: Refiner,
    embedder: Embedder,
    frame: FrameRef,
    tau_fuse: float,
) -> list[FusionOutcome]:
    """Run select-and-verify fusion for every object of one frame.

    Empty tracker masks skip refinement (absence predictions pass through).
    Backend failures are captured per object and the tracker mask is kept,
    so one flaky object never poisons the frame.
    """
    if len(vos_masks) < 1:
        raise ValueError("fuse_frame needs at least one object mask")
    outcomes: list[FusionOutcome] = []
    for vos_mask in vos_masks:
        if vos_mask.is_empty:
            outcomes.append(FusionOutcome(vos_mask, False, -1.0))
            continue
        box = mask_to_box_prompt(vos_mask)
        assert box is not None
        try:
            pset = refiner.propose(frame, box)
            vos_app = embedder.object_appearance(frame, vos_mask)
            best, sim = select_proposal(pset, vos_app)
            outcomes.append(verify(best, sim, vos_mask, tau_fuse))
        except BackendError as exc:
            outcomes.append(
                FusionOutcome(vos_mask, False, -1.0, error=str(exc))
            )
    return outcomes
