"""Tracking-quality metrics: overlap quality, robustness/absence rates,
and region/boundary scores.

Inputs are nested mask lists indexed [sequence][frame][object]; predictions
and ground truth must align exactly. The VOTS-style rates follow the
textual metric definitions, not the official toolkit's anchor protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .masks import MaskShapeMismatch, ObjectMask

SequenceMasks = Sequence[Sequence[ObjectMask]]  # [frame][object]


class MetricAlignmentError(ValueError):
    """Predictions and ground truth disagree on sequence/frame/object shape."""


@dataclass(frozen=True)
class MetricBundle:
    """All scores in [0, 1]; NRE + DRE never exceeds 1."""

    Q: float
    Acc: float
    Rob: float
    NRE: float
    DRE: float
    ADQ: float
    J_mean: float
    F_mean: float
    JF_mean: float

    def __post_init__(self) -> None:
        for name in ("Q", "Acc", "Rob", "NRE", "DRE", "ADQ",
                     "J_mean", "F_mean", "JF_mean"):
            v = getattr(self, name)
            if not -1e-9 <= v <= 1.0 + 1e-9:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.NRE + self.DRE > 1.0 + 1e-9:
            raise ValueError("NRE + DRE exceeds 1")


def iou(a: ObjectMask, b: ObjectMask, both_empty: float = 1.0) -> float:
    """Intersection over union; two empty masks score ``both_empty``
    (crediting a correct absence prediction by default)."""
    a.require_same_shape(b)
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return both_empty
    return inter / union


def _check_alignment(results: Sequence[SequenceMasks], gts: Sequence[SequenceMasks]) -> None:
    if len(results) != len(gts):
        raise MetricAlignmentError(
            f"{len(results)} predicted sequences vs {len(gts)} ground truth"
        )
    for s, (res, gt) in enumerate(zip(results, gts)):
        if len(res) != len(gt):
            raise MetricAlignmentError(
                f"sequence {s}: {len(res)} predicted frames vs {len(gt)}"
            )
        for t, (rf, gf) in enumerate(zip(res, gt)):
            if len(rf) != len(gf):
                raise MetricAlignmentError(
                    f"sequence {s} frame {t}: {len(rf)} predicted objects "
                    f"vs {len(gf)}"
                )
            for ro, go in zip(rf, gf):
                if ro.shape != go.shape:
                    raise MaskShapeMismatch(
                        f"sequence {s} frame {t}: mask shapes differ "
                        f"{ro.shape} vs {go.shape}"
                    )


def quality(
    results: Sequence[SequenceMasks],
    gts: Sequence[SequenceMasks],
    skip_absent: bool = False,
) -> float:
    """Overall quality: mean over sequences of the per-sequence mean IoU
    over every (frame, object) cell.

    With ``skip_absent`` the per-sequence average runs over frames where
    the object is visible instead of crediting absences with IoU 1.
    """
    _check_alignment(results, gts)
    if not results:
        raise MetricAlignmentError("no sequences to evaluate")
    per_sequence = []
    for res, gt in zip(results, gts):
        values = []
        for rf, gf in zip(res, gt):
            for ro, go in zip(rf, gf):
                if skip_absent and go.is_empty:
                    continue
                values.append(iou(ro, go))
        if not values:
            raise MetricAlignmentError(
                "sequence has no frames to average (empty or all-absent)"
            )
        per_sequence.append(sum(values) / len(values))
    return sum(per_sequence) / len(per_sequence)


@dataclass
class _TrackStats:
    visible: int = 0
    tracked: int = 0
    drifted: int = 0
    not_reported: int = 0
    absent: int = 0
    correct_absent: int = 0
    tracked_iou_sum: float = 0.0


def _track_stats(
    pred_frames: Sequence[Sequence[ObjectMask]],
    gt_frames: Sequence[Sequence[ObjectMask]],
    obj: int,
    track_threshold: float,
) -> _TrackStats:
    st = _TrackStats()
    for rf, gf in zip(pred_frames, gt_frames):
        pred, gt = rf[obj], gf[obj]
        visible = not gt.is_empty
        reported = not pred.is_empty
        if visible:
            st.visible += 1
            if reported:
                overlap = iou(pred, gt)
                if overlap > track_threshold:
                    st.tracked += 1
                    st.tracked_iou_sum += overlap
                else:
                    st.drifted += 1
            else:
                st.not_reported += 1
        else:
            st.absent += 1
            if not reported:
                st.correct_absent += 1
    return st


def _mean(values: list[float], when_empty: float) -> float:
    return sum(values) / len(values) if values else when_empty


def vots_bundle(
    results: Sequence[SequenceMasks],
    gts: Sequence[SequenceMasks],
    track_threshold: float = 0.0,
    boundary_tolerance: float | None = None,
) -> MetricBundle:
    """Full score bundle.

    Frame classes per object track: tracked (visible, reported, IoU above
    the threshold), drifted (visible, reported, IoU at or below it), and
    not-reported (visible, absent prediction). Rates are averaged per track,
    then per sequence, then overall; ADQ defaults to 1 when a track is never
    absent. Acc averages IoU over tracked frames only.
    """
    _check_alignment(results, gts)
    if not results:
        raise MetricAlignmentError("no sequences to evaluate")
    seq_acc, seq_rob, seq_nre, seq_dre, seq_adq = [], [], [], [], []
    for res, gt in zip(results, gts):
        num_objects = len(gt[0]) if gt else 0
        t_acc, t_rob, t_nre, t_dre, t_adq = [], [], [], [], []
        for obj in range(num_objects):
            st = _track_stats(res, gt, obj, track_threshold)
            if st.tracked:
                t_acc.append(st.tracked_iou_sum / st.tracked)
            if st.visible:
                t_rob.append(st.tracked / st.visible)
                t_nre.append(st.not_reported / st.visible)
                t_dre.append(st.drifted / st.visible)
            t_adq.append(
                st.correct_absent / st.absent if st.absent else 1.0
            )
        if t_acc:
            seq_acc.append(_mean(t_acc, 0.0))
        if t_rob:
            seq_rob.append(_mean(t_rob, 0.0))
            seq_nre.append(_mean(t_nre, 0.0))
            seq_dre.append(_mean(t_dre, 0.0))
        seq_adq.append(_mean(t_adq, 1.0))
    j_mean, f_mean, jf_mean = jf_bundle(results, gts, boundary_tolerance)
    return MetricBundle(
        Q=quality(results, gts),
        Acc=_mean(seq_acc, 0.0),
        Rob=_mean(seq_rob, 0.0),
        NRE=_mean(seq_nre, 0.0),
        DRE=_mean(seq_dre, 0.0),
        ADQ=_mean(seq_adq, 1.0),
        J_mean=j_mean,
        F_mean=f_mean,
        JF_mean=jf_mean,
    )


def _boundary(mask: ObjectMask) -> np.ndarray:
    """Set pixels with an unset 4-neighbour or sitting on the image border."""
    bits = mask.bits
    padded = np.pad(bits, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    return bits & ~interior


def default_boundary_tolerance(height: int, width: int) -> float:
    """Conventional tolerance: 0.8% of the image diagonal, rounded up."""
    return float(math.ceil(0.008 * math.hypot(height, width)))


def boundary_f(
    a: ObjectMask, b: ObjectMask, tolerance_px: float
) -> float:
    """Boundary F-measure: precision/recall of boundary pixels matched
    within a Euclidean distance tolerance."""
    if tolerance_px <= 0:
        raise ValueError("tolerance_px must be positive")
    a.require_same_shape(b)
    ba, bb = _boundary(a), _boundary(b)
    na, nb = int(ba.sum()), int(bb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    dist_to_b = ndimage.distance_transform_edt(~bb)
    dist_to_a = ndimage.distance_transform_edt(~ba)
    precision = float(np.count_nonzero(dist_to_b[ba] <= tolerance_px)) / na
    recall = float(np.count_nonzero(dist_to_a[bb] <= tolerance_px)) / nb
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def jf_bundle(
    results: Sequence[SequenceMasks],
    gts: Sequence[SequenceMasks],
    boundary_tolerance: float | None = None,
) -> tuple[float, float, float]:
    """(J_mean, F_mean, JF_mean) pooled over every (frame, object) cell with
    a visible ground-truth object. Errors out when nothing is visible."""
    _check_alignment(results, gts)
    j_values: list[float] = []
    f_values: list[float] = []
    for res, gt in zip(results, gts):
        for rf, gf in zip(res, gt):
            for ro, go in zip(rf, gf):
                if go.is_empty:
                    continue
                tol = boundary_tolerance
                if tol is None:
                    tol = default_boundary_tolerance(go.height, go.width)
                j_values.append(iou(ro, go))
                f_values.append(boundary_f(ro, go, tol))
    if not j_values:
        raise MetricAlignmentError(
            "no visible ground-truth objects anywhere; J/F undefined"
        )
    j = sum(j_values) / len(j_values)
    f = sum(f_values) / len(f_values)
    return (j, f, (j + f) / 2.0)
