"""Bounding boxes, coordinate bins and overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass

NUM_BINS = 1001
MAX_BIN = NUM_BINS - 1


class RangeError(ValueError):
    pass


def quantize(v: float) -> int:
    """Map a normalised coordinate in [0, 1] to a bin in [0, 1000], rounding half up."""
    if not (0.0 <= v <= 1.0):
        raise RangeError(f"coordinate {v!r} outside [0, 1]")
    # rounding to 9 places first keeps decimal half-way points (e.g. 0.0005) exact
    return int(math.floor(round(v * MAX_BIN, 9) + 0.5))


def quantize_fraction(num: int, den: int) -> int:
    """Integer-only ``quantize(num / den)``; used where results must be platform exact."""
    if den <= 0 or not (0 <= num <= den):
        raise RangeError(f"fraction {num}/{den} outside [0, 1]")
    return (2 * num * MAX_BIN + den) // (2 * den)


def dequantize(b: int) -> float:
    if not (0 <= b <= MAX_BIN) or int(b) != b:
        raise RangeError(f"bin {b!r} outside [0, {MAX_BIN}]")
    return b / MAX_BIN


@dataclass(frozen=True, order=True)
class BBox:
    """Quantised box, corners as bins; treated as half-open ranges for area."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not (isinstance(v, int) and 0 <= v <= MAX_BIN):
                raise RangeError(f"bin {v!r} outside [0, {MAX_BIN}]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise RangeError(f"inverted box {self.astuple()}")

    def astuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @classmethod
    def from_norm(cls, nb: "NormBox") -> "BBox":
        return cls(quantize(nb.x1), quantize(nb.y1), quantize(nb.x2), quantize(nb.y2))


@dataclass(frozen=True)
class NormBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not (0.0 <= v <= 1.0):
                raise RangeError(f"coordinate {v!r} outside [0, 1]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise RangeError("inverted box")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; zero-area boxes overlap nothing, themselves included."""
    if a.area == 0 or b.area == 0:
        return 0.0
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)
