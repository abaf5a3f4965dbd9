"""Binary per-object masks on a fixed pixel grid."""

from __future__ import annotations

import numpy as np


class MaskShapeMismatch(ValueError):
    """Two masks (or a mask and its frame) disagree on height/width."""


class ObjectMask:
    """Immutable row-major binary mask for one object in one frame.

    The pixel grid is exposed as a read-only boolean array; an all-False
    (empty) mask is legal and means "object absent".
    """

    __slots__ = ("_bits",)

    def __init__(self, bits) -> None:
        arr = np.array(bits, dtype=bool)
        if arr.ndim != 2:
            raise ValueError("mask bits must form a 2-D row-major grid")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("mask height and width must be positive")
        arr.setflags(write=False)
        self._bits = arr

    @classmethod
    def empty(cls, height: int, width: int) -> "ObjectMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, height: int, width: int) -> "ObjectMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def height(self) -> int:
        return int(self._bits.shape[0])

    @property
    def width(self) -> int:
        return int(self._bits.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def area(self) -> int:
        return int(self._bits.sum())

    @property
    def is_empty(self) -> bool:
        return not self._bits.any()

    def same_shape(self, other: "ObjectMask") -> bool:
        return self.shape == other.shape

    def require_same_shape(self, other: "ObjectMask") -> None:
        if not self.same_shape(other):
            raise MaskShapeMismatch(
                f"mask shapes differ: {self.shape} vs {other.shape}"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ObjectMask):
            return NotImplemented
        return self.shape == other.shape and bool(
            np.array_equal(self._bits, other._bits)
        )

    __hash__ = None  # mask contents are bulky; identity hashing would mislead

    def __repr__(self) -> str:
        return f"ObjectMask({self.height}x{self.width}, area={self.area})"


def masks_overlap(masks: list[ObjectMask]) -> bool:
    """True when any pixel is claimed by more than one mask."""
    if len(masks) < 2:
        return False
    total = np.zeros(masks[0].shape, dtype=np.int32)
    for m in masks:
        masks[0].require_same_shape(m)
        total += m.bits
    return bool((total > 1).any())
