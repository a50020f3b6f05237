"""Axis-aligned box arithmetic.

Boxes are stored in corner form ``(x1, y1, x2, y2)`` with real-valued pixel
coordinates. Scalar helpers operate on :class:`Box`; the ``*_array`` variants
take ``(..., 4)`` numpy arrays and are used by the vectorised code paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class Point(NamedTuple):
    x: float
    y: float


class LtrbDistances(NamedTuple):
    """Distances from a location to the left, top, right and bottom sides."""

    l: float
    t: float
    r: float
    b: float

    @property
    def max(self) -> float:
        return max(self.l, self.t, self.r, self.b)

    @property
    def min(self) -> float:
        return min(self.l, self.t, self.r, self.b)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box {self.as_tuple()}: need x1 <= x2 and y1 <= y2")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> Point:
        return Point(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def clip(self, width: float, height: float) -> "Box":
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return Box(x1, y1, x2, y2)


def ltrb(location: Point, box: Box) -> LtrbDistances:
    """Signed distances from ``location`` to the four sides of ``box``.

    Values are negative on the sides where the location lies outside.
    """
    x, y = location
    return LtrbDistances(x - box.x1, y - box.y1, box.x2 - x, box.y2 - y)


def area(box: Box) -> float:
    return (box.x2 - box.x1) * (box.y2 - box.y1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; zero when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def strictly_contains(box: Box, location: Point) -> bool:
    return ltrb(location, box).min > 0.0


def closed_contains(box: Box, location: Point) -> bool:
    x, y = location
    return box.x1 <= x <= box.x2 and box.y1 <= y <= box.y2


# -- array variants ---------------------------------------------------------


def area_array(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of broadcastable ``(..., 4)`` box arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = area_array(a) + area_array(b) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(N, 4)`` x ``(M, 4)`` -> ``(N, M)`` IoU matrix."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    return iou_array(a[:, None, :], b[None, :, :])


def decode_array(points: np.ndarray, distances: np.ndarray) -> np.ndarray:
    """Boxes from ``(N, 2)`` locations and ``(N, 4)`` ltrb distances."""
    points = np.asarray(points, dtype=float)
    d = np.asarray(distances, dtype=float)
    x, y = points[..., 0], points[..., 1]
    return np.stack([x - d[..., 0], y - d[..., 1], x + d[..., 2], y + d[..., 3]], axis=-1)
