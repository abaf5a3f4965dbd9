"""Deterministic synthetic sequences: moving shapes with scripted events.

Scenes are described analytically (shape, trajectory, per-region appearance
vectors) so ground-truth masks, feature pooling, and frame keys are all
hand-checkable. Scripted events cover the stress cases that matter for a
tracker: appearance shifts, occlusion spans, and topology splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

from .backends import FrameRef
from .masks import ObjectMask
from .memory import Embedding


class SceneValidationError(ValueError):
    """A scene spec is inconsistent; ``fields`` lists the offenders."""

    def __init__(self, problems: list[str]) -> None:
        super().__init__("invalid scene spec: " + "; ".join(problems))
        self.fields = problems


@dataclass(frozen=True)
class AppearanceShift:
    at_frame: int
    new: Embedding
    kind: str = field(default="appearance_shift", init=False)


@dataclass(frozen=True)
class Occlusion:
    at_frame: int
    span: int
    kind: str = field(default="occlusion", init=False)


@dataclass(frozen=True)
class Split:
    at_frame: int
    parts: int
    kind: str = field(default="split", init=False)


Event = Union[AppearanceShift, Occlusion, Split]


@dataclass(frozen=True)
class ObjectSpec:
    shape: str  # "rectangle" | "ellipse"
    size: int  # nominal diameter in pixels
    waypoints: tuple[tuple[float, float], ...]  # (row, col) centers
    appearance: Embedding
    events: tuple[Event, ...] = ()


@dataclass(frozen=True)
class SceneSpec:
    name: str
    height: int
    width: int
    length: int
    objects: tuple[ObjectSpec, ...]
    background_appearance: Embedding
    seed: int


def validate_scene(spec: SceneSpec) -> None:
    problems: list[str] = []
    if spec.height < 1 or spec.width < 1:
        problems.append("height/width must be positive")
    if spec.length < 1:
        problems.append("length must be positive")
    if not spec.objects:
        problems.append("objects must not be empty")
    dim = spec.background_appearance.dim
    for i, obj in enumerate(spec.objects):
        tag = f"objects[{i}]"
        if obj.shape not in ("rectangle", "ellipse"):
            problems.append(f"{tag}.shape unknown: {obj.shape!r}")
        if obj.size < 1:
            problems.append(f"{tag}.size must be positive")
        if not obj.waypoints:
            problems.append(f"{tag}.waypoints must not be empty")
        for j, (r, c) in enumerate(obj.waypoints):
            if not (0 <= r < spec.height and 0 <= c < spec.width):
                problems.append(f"{tag}.waypoints[{j}] outside frame bounds")
        if obj.appearance.dim != dim:
            problems.append(f"{tag}.appearance dim differs from background")
        for j, ev in enumerate(obj.events):
            if not (0 <= ev.at_frame < spec.length):
                problems.append(f"{tag}.events[{j}].at_frame outside sequence")
            if isinstance(ev, Occlusion) and ev.span < 1:
                problems.append(f"{tag}.events[{j}].span must be positive")
            if isinstance(ev, Split) and ev.parts < 2:
                problems.append(f"{tag}.events[{j}].parts must be >= 2")
            if isinstance(ev, AppearanceShift) and ev.new.dim != dim:
                problems.append(f"{tag}.events[{j}].new dim differs")
    if problems:
        raise SceneValidationError(problems)


# -- geometry -------------------------------------------------------------


def _position(
    waypoints: Sequence[tuple[float, float]], t: int, length: int
) -> tuple[float, float]:
    if len(waypoints) == 1 or length == 1:
        return waypoints[0]
    u = (t / (length - 1)) * (len(waypoints) - 1)
    i = min(int(u), len(waypoints) - 2)
    frac = u - i
    r0, c0 = waypoints[i]
    r1, c1 = waypoints[i + 1]
    return (r0 + frac * (r1 - r0), c0 + frac * (c1 - c0))


def _motion_axis(
    waypoints: Sequence[tuple[float, float]], t: int, length: int
) -> int:
    """1 when the object moves mostly along columns, else 0."""
    if len(waypoints) == 1 or length == 1:
        return 1
    u = (t / (length - 1)) * (len(waypoints) - 1)
    i = min(int(u), len(waypoints) - 2)
    dr = waypoints[i + 1][0] - waypoints[i][0]
    dc = waypoints[i + 1][1] - waypoints[i][1]
    return 1 if abs(dc) >= abs(dr) else 0


def _raster(
    shape: str, center: tuple[float, float], size: int, h: int, w: int
) -> np.ndarray:
    r, c = center
    if shape == "rectangle":
        r0 = int(round(r)) - size // 2
        c0 = int(round(c)) - size // 2
        out = np.zeros((h, w), dtype=bool)
        out[max(0, r0) : max(0, r0 + size), max(0, c0) : max(0, c0 + size)] = (
            True
        )
        return out
    # ellipse (circle of diameter `size`)
    radius = size / 2.0
    rows = np.arange(h)[:, None] - r
    cols = np.arange(w)[None, :] - c
    return rows * rows + cols * cols <= radius * radius


def _split_mask(mask: np.ndarray, parts: int, axis: int) -> np.ndarray:
    """Slice a mask into `parts` chunks along `axis` and shift each chunk
    outward so consecutive chunks sit 2 px apart."""
    extent = np.nonzero(mask.any(axis=1 - axis))[0]
    if extent.size == 0:
        return mask
    lo, hi = int(extent[0]), int(extent[-1]) + 1
    edges = np.round(np.linspace(lo, hi, parts + 1)).astype(int)
    out = np.zeros_like(mask)
    limit = mask.shape[axis]
    for k in range(parts):
        a, b = edges[k], edges[k + 1]
        if b <= a:
            continue
        shift = 2 * k
        target_a, target_b = a + shift, min(b + shift, limit)
        span = target_b - target_a
        if span <= 0:
            continue
        if axis == 1:
            out[:, target_a:target_b] |= mask[:, a : a + span]
        else:
            out[target_a:target_b, :] |= mask[a : a + span, :]
    return out


# -- dataset --------------------------------------------------------------


class SyntheticDataset:
    """Concrete frames generated from a scene spec.

    All queries are pure functions of (spec, frame); overlapping objects are
    carved by z-order (the last object in the spec list is topmost), so
    ground-truth masks never overlap.
    """

    def __init__(self, spec: SceneSpec) -> None:
        validate_scene(spec)
        self.spec = spec
        self.sequence_id = spec.name
        self.height = spec.height
        self.width = spec.width
        self.length = spec.length
        self.num_objects = len(spec.objects)
        self.embedding_dim = spec.background_appearance.dim
        self._frame_state = lru_cache(maxsize=None)(self._compute_frame)

    # frame-level state ---------------------------------------------------

    def _occluded(self, obj: ObjectSpec, t: int) -> bool:
        return any(
            isinstance(ev, Occlusion) and ev.at_frame <= t < ev.at_frame + ev.span
            for ev in obj.events
        )

    def _parts(self, obj: ObjectSpec, t: int) -> int:
        parts = 1
        for ev in obj.events:
            if isinstance(ev, Split) and ev.at_frame <= t:
                parts = ev.parts
        return parts

    def _appearance_at(self, obj: ObjectSpec, t: int) -> Embedding:
        current = obj.appearance
        for ev in obj.events:
            if isinstance(ev, AppearanceShift) and ev.at_frame <= t:
                current = ev.new
        return current

    def _compute_frame(self, t: int):
        raws: list[np.ndarray] = []
        for obj in self.spec.objects:
            if self._occluded(obj, t):
                raws.append(np.zeros((self.height, self.width), dtype=bool))
                continue
            center = _position(obj.waypoints, t, self.length)
            raw = _raster(obj.shape, center, obj.size, self.height, self.width)
            parts = self._parts(obj, t)
            if parts > 1:
                raw = _split_mask(raw, parts, _motion_axis(obj.waypoints, t, self.length))
            raws.append(raw)
        label_map = np.zeros((self.height, self.width), dtype=np.int16)
        for i, raw in enumerate(raws):
            label_map[raw] = i + 1  # later objects overwrite: z-order top
        carved = tuple(
            np.ascontiguousarray(label_map == i + 1) for i in range(len(raws))
        )
        return carved, label_map

    # public queries -------------------------------------------------------

    def frame_ref(self, t: int) -> FrameRef:
        self._check_frame(t)
        return FrameRef(self.sequence_id, t, self.height, self.width)

    def gt_masks(self, t: int) -> list[ObjectMask]:
        self._check_frame(t)
        carved, _ = self._frame_state(t)
        return [ObjectMask(bits) for bits in carved]

    def visibility(self, t: int) -> list[bool]:
        self._check_frame(t)
        carved, _ = self._frame_state(t)
        return [bool(bits.any()) for bits in carved]

    def appearances(self, t: int) -> list[Embedding]:
        self._check_frame(t)
        return [self._appearance_at(obj, t) for obj in self.spec.objects]

    def _appearance_table(self, t: int) -> np.ndarray:
        rows = [self.spec.background_appearance.values]
        rows += [a.values for a in self.appearances(t)]
        return np.stack(rows)

    def pooled_vector(self, t: int, bits: np.ndarray) -> np.ndarray:
        """Masked mean of the per-pixel feature field (zero vector when the
        mask is empty)."""
        self._check_frame(t)
        n = int(bits.sum())
        if n == 0:
            return np.zeros(self.embedding_dim)
        _, label_map = self._frame_state(t)
        counts = np.bincount(
            label_map[bits], minlength=self.num_objects + 1
        ).astype(np.float64)
        table = self._appearance_table(t)
        return counts @ table / n

    def frame_key(self, t: int) -> Embedding:
        """Mean feature over foreground pixels; pure background when every
        object is absent. Foreground pooling makes the key track object
        appearance rather than being swamped by the backdrop."""
        self._check_frame(t)
        _, label_map = self._frame_state(t)
        fg = label_map > 0
        if not fg.any():
            return self.spec.background_appearance
        return Embedding(self.pooled_vector(t, fg))

    def feature_field(self, t: int) -> np.ndarray:
        """Materialized (H, W, dim) per-pixel feature array (test aid)."""
        self._check_frame(t)
        _, label_map = self._frame_state(t)
        return self._appearance_table(t)[label_map]

    def _check_frame(self, t: int) -> None:
        if not 0 <= t < self.length:
            raise IndexError(
                f"frame {t} outside sequence of length {self.length}"
            )


def generate(spec: SceneSpec) -> SyntheticDataset:
    """Validate a scene spec and wrap it as a queryable dataset."""
    return SyntheticDataset(spec)


# -- benchmark catalogue ----------------------------------------------------


def _unit(dim: int, i: int, scale: float = 1.0) -> Embedding:
    v = np.zeros(dim)
    v[i] = scale
    return Embedding(v)


def benchmark_suite(seed: int = 0) -> dict[str, SceneSpec]:
    """Fixed five-scene catalogue covering the stress categories: long
    constant content, appearance shifts, occlusion, topology change, and
    identical-appearance twins."""
    dim = 8
    bg = _unit(dim, 0)
    specs = {
        "constant-1000": SceneSpec(
            name="constant-1000",
            height=64,
            width=96,
            length=1000,
            objects=(
                ObjectSpec(
                    shape="ellipse",
                    size=24,
                    waypoints=((32.0, 28.0), (32.0, 68.0), (32.0, 28.0)),
                    appearance=_unit(dim, 1),
                ),
            ),
            background_appearance=bg,
            seed=seed,
        ),
        "shift-200": SceneSpec(
            name="shift-200",
            height=64,
            width=96,
            length=200,
            objects=(
                ObjectSpec(
                    shape="rectangle",
                    size=24,
                    waypoints=((32.0, 26.0), (32.0, 70.0)),
                    appearance=_unit(dim, 1),
                    events=(
                        AppearanceShift(40, _unit(dim, 2)),
                        AppearanceShift(80, _unit(dim, 3)),
                        AppearanceShift(120, _unit(dim, 4)),
                        AppearanceShift(160, _unit(dim, 5)),
                    ),
                ),
            ),
            background_appearance=bg,
            seed=seed,
        ),
        "occlude-100": SceneSpec(
            name="occlude-100",
            height=64,
            width=96,
            length=100,
            objects=(
                ObjectSpec(
                    shape="ellipse",
                    size=22,
                    waypoints=((32.0, 26.0), (32.0, 70.0)),
                    appearance=_unit(dim, 1),
                    events=(Occlusion(30, 10), Occlusion(65, 8)),
                ),
            ),
            background_appearance=bg,
            seed=seed,
        ),
        "split-100": SceneSpec(
            name="split-100",
            height=64,
            width=96,
            length=100,
            objects=(
                ObjectSpec(
                    shape="rectangle",
                    size=24,
                    waypoints=((32.0, 26.0), (32.0, 62.0)),
                    appearance=_unit(dim, 1),
                    events=(Split(50, 2),),
                ),
            ),
            background_appearance=bg,
            seed=seed,
        ),
        "twin-100": SceneSpec(
            name="twin-100",
            height=64,
            width=96,
            length=100,
            objects=(
                ObjectSpec(
                    shape="ellipse",
                    size=20,
                    waypoints=((20.0, 26.0), (20.0, 70.0)),
                    appearance=_unit(dim, 1),
                ),
                ObjectSpec(
                    shape="ellipse",
                    size=20,
                    waypoints=((44.0, 70.0), (44.0, 26.0)),
                    appearance=_unit(dim, 1),
                ),
            ),
            background_appearance=bg,
            seed=seed,
        ),
    }
    for spec in specs.values():
        validate_scene(spec)
    return specs


# -- scene spec serialization ----------------------------------------------


def _event_to_obj(ev: Event) -> dict:
    if isinstance(ev, AppearanceShift):
        return {
            "kind": ev.kind,
            "at_frame": ev.at_frame,
            "new": list(ev.new.values),
        }
    if isinstance(ev, Occlusion):
        return {"kind": ev.kind, "at_frame": ev.at_frame, "span": ev.span}
    return {"kind": ev.kind, "at_frame": ev.at_frame, "parts": ev.parts}


def _event_from_obj(obj: dict) -> Event:
    kind = obj.get("kind")
    if kind == "appearance_shift":
        return AppearanceShift(int(obj["at_frame"]), Embedding(obj["new"]))
    if kind == "occlusion":
        return Occlusion(int(obj["at_frame"]), int(obj["span"]))
    if kind == "split":
        return Split(int(obj["at_frame"]), int(obj["parts"]))
    raise SceneValidationError([f"unknown event kind {kind!r}"])


def scene_to_json(spec: SceneSpec) -> str:
    payload = {
        "name": spec.name,
        "height": spec.height,
        "width": spec.width,
        "length": spec.length,
        "seed": spec.seed,
        "background_appearance": list(spec.background_appearance.values),
        "objects": [
            {
                "shape": o.shape,
                "size": o.size,
                "waypoints": [[r, c] for r, c in o.waypoints],
                "appearance": list(o.appearance.values),
                "events": [_event_to_obj(ev) for ev in o.events],
            }
            for o in spec.objects
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def scene_from_json(text: str) -> SceneSpec:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneValidationError([f"not valid JSON: {exc}"]) from exc
    try:
        spec = SceneSpec(
            name=str(payload["name"]),
            height=int(payload["height"]),
            width=int(payload["width"]),
            length=int(payload["length"]),
            seed=int(payload["seed"]),
            background_appearance=Embedding(payload["background_appearance"]),
            objects=tuple(
                ObjectSpec(
                    shape=str(o["shape"]),
                    size=int(o["size"]),
                    waypoints=tuple(
                        (float(r), float(c)) for r, c in o["waypoints"]
                    ),
                    appearance=Embedding(o["appearance"]),
                    events=tuple(
                        _event_from_obj(ev) for ev in o.get("events", [])
                    ),
                )
                for o in payload["objects"]
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneValidationError([f"malformed scene payload: {exc}"]) from exc
    validate_scene(spec)
    return spec
