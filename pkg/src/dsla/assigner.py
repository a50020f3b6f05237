"""Per-location classification targets across feature-pyramid levels.

Two modes are supported:

``fcos-hard``
    The binary FCOS rule: a location is positive for a ground truth when it lies
    strictly inside the box and the largest side distance falls in the level's
    range. Ambiguous locations go to the smallest box.

``dsla-smooth``
    Relaxed level ranges with linear ramps, centerness with a stride-sized core
    zone forced to 1.0, and ``label_s = centerness_s * head_s``. Ambiguous
    locations go to the ground truth with the highest ``label_s``.

Dynamic labels (``label_d = label_s * IoU``) are filled in separately by
:meth:`AssignmentTable.couple_iou` once predicted boxes are available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from dsla.geometry import (
    Box,
    LtrbDistances,
    Point,
    closed_contains,
    iou,
    iou_array,
    ltrb,
)

MODES = ("fcos-hard", "dsla-smooth")
RAMPS = ("continuous", "printed")

DEFAULT_STRIDES = (8, 16, 32, 64, 128)
DEFAULT_RANGES = (0.0, 64.0, 128.0, 256.0, 512.0, math.inf)
DEFAULT_KAPPA = 0.2


@dataclass(frozen=True)
class AssignerConfig:
    """Level layout and relaxation settings.

    ``ranges`` holds the boundaries ``m_0 .. m_L`` (one more than the number of
    levels). ``ramp="printed"`` evaluates the relaxation ramps in the
    orientation that drops to zero at the original boundary; it exists only for
    comparison with the default continuous ramps.
    """

    strides: tuple[int, ...] = DEFAULT_STRIDES
    ranges: tuple[float, ...] = DEFAULT_RANGES
    kappa: float = DEFAULT_KAPPA
    mode: str = "dsla-smooth"
    core_zone: bool = True
    ramp: str = "continuous"

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "ranges", tuple(float(m) for m in self.ranges))
        if not self.strides:
            raise ValueError("at least one level is required")
        if any(s <= 0 for s in self.strides):
            raise ValueError(f"strides must be positive, got {self.strides}")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        if len(self.ranges) != len(self.strides) + 1:
            raise ValueError(
                f"need {len(self.strides) + 1} range boundaries for {len(self.strides)} levels, "
                f"got {len(self.ranges)}"
            )
        if self.ranges[0] < 0:
            raise ValueError("first range boundary must be >= 0")
        if any(b <= a for a, b in zip(self.ranges, self.ranges[1:])):
            raise ValueError(f"range boundaries must be strictly increasing, got {self.ranges}")
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError(f"kappa must lie in [0, 1), got {self.kappa}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ramp not in RAMPS:
            raise ValueError(f"ramp must be one of {RAMPS}, got {self.ramp!r}")

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    def levels(self) -> list["LevelSpec"]:
        return relaxed_bounds(self)


@dataclass(frozen=True)
class LevelSpec:
    index: int  # 1-based, level i covers (ranges[i-1], ranges[i]]
    stride: int
    lower: float
    upper: float
    relaxed_lower: float
    relaxed_upper: float


@dataclass
class LocationTarget:
    level: int
    row: int
    col: int
    x: float
    y: float
    gt_index: Optional[int] = None
    cls: Optional[int] = None
    head_s: float = 0.0
    centerness_s: float = 0.0
    label_s: float = 0.0
    label_d: float = 0.0
    ltrb: Optional[LtrbDistances] = None
    candidates: int = 0

    @property
    def matched(self) -> bool:
        return self.gt_index is not None


def relaxed_bounds(config: AssignerConfig) -> list[LevelSpec]:
    """Level specs with boundaries widened by ``kappa``.

    Interior boundaries ``m_j`` get ``m_j (1 - kappa)`` and ``m_j (1 + kappa)``;
    the outermost lower and upper boundaries stay put.
    """
    m = config.ranges
    n = len(m) - 1
    low = [m[j] * (1.0 - config.kappa) for j in range(len(m))]
    up = [m[j] * (1.0 + config.kappa) for j in range(len(m))]
    low[0] = m[0]
    up[n] = m[n]
    return [
        LevelSpec(
            index=i,
            stride=config.strides[i - 1],
            lower=m[i - 1],
            upper=m[i],
            relaxed_lower=low[i - 1],
            relaxed_upper=up[i],
        )
        for i in range(1, n + 1)
    ]


def head_score(max_dist: float, level: LevelSpec, ramp: str = "continuous") -> float:
    """Relaxed level-membership score for a location's largest side distance."""
    lo, hi = level.lower, level.upper
    rlo, rhi = level.relaxed_lower, level.relaxed_upper
    if lo < max_dist <= hi:
        return 1.0
    if rlo < max_dist <= lo:
        if ramp == "printed":
            return (lo - max_dist) / (lo - rlo)
        return (max_dist - rlo) / (lo - rlo)
    if hi < max_dist <= rhi:
        if ramp == "printed":
            return (max_dist - hi) / (rhi - hi)
        return (rhi - max_dist) / (rhi - hi)
    return 0.0


def hard_head_score(max_dist: float, min_dist: float, level: LevelSpec) -> float:
    if level.lower < max_dist <= level.upper and min_dist > 0:
        return 1.0
    return 0.0


def centerness(d: LtrbDistances) -> float:
    l, t, r, b = d
    if min(l, t, r, b) <= 0:
        raise ValueError(f"centerness needs an interior location, got {tuple(d)}")
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b)))


def core_zone(box: Box, stride: float) -> Box:
    """Stride-sized square at the box center, clipped to the box."""
    cx, cy = box.center
    half = stride / 2.0
    return Box(
        max(cx - half, box.x1),
        max(cy - half, box.y1),
        min(cx + half, box.x2),
        min(cy + half, box.y2),
    )


def smooth_centerness(location: Point, box: Box, stride: float, use_core_zone: bool = True) -> float:
    d = ltrb(location, box)
    if d.min <= 0:
        raise ValueError(f"location {tuple(location)} is not strictly inside {box.as_tuple()}")
    if use_core_zone and closed_contains(core_zone(box, stride), location):
        return 1.0
    return centerness(d)


def smooth_label(
    location: Point,
    box: Box,
    level: LevelSpec,
    use_core_zone: bool = True,
    ramp: str = "continuous",
) -> float:
    d = ltrb(location, box)
    if d.min <= 0:
        return 0.0
    return smooth_centerness(location, box, level.stride, use_core_zone) * head_score(d.max, level, ramp)


def dynamic_label(label_s: float, predicted_box: Box, gt_box: Box) -> float:
    """Smooth label scaled by the current predicted-box IoU; negatives stay 0."""
    if label_s <= 0:
        return 0.0
    return label_s * iou(predicted_box, gt_box)


def resolve_ambiguity(candidates: Sequence[tuple[int, float, float]]) -> int:
    """Pick a ground truth for a location claimed by several.

    Each candidate is ``(gt_index, label_s, gt_area)``. Highest label wins,
    then the smaller box, then the lower index.
    """
    if not candidates:
        raise ValueError("resolve_ambiguity needs at least one candidate")
    best = min(candidates, key=lambda c: (-c[1], c[2], c[0]))
    return best[0]


# -- full assignment -------------------------------------------------------


def grid_shape(image_size: tuple[int, int], stride: int) -> tuple[int, int]:
    """``(rows, cols)`` of a level's feature map for a ``(width, height)`` image."""
    width, height = image_size
    return math.ceil(height / stride), math.ceil(width / stride)


def grid_points(image_size: tuple[int, int], stride: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows, cols and image-space ``(x, y)`` of every location, row-major."""
    rows, cols = grid_shape(image_size, stride)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    xy = np.stack([stride / 2.0 + cc * stride, stride / 2.0 + rr * stride], axis=1).astype(float)
    return rr, cc, xy


@dataclass
class AssignmentTable:
    """Flat per-location targets in canonical ``(level, row, col)`` order.

    Unmatched locations carry ``gt_index == cls == -1`` and NaN regression
    targets. ``gt_boxes`` are the clipped ground truths the indices refer to.
    """

    levels: list[LevelSpec]
    grid_shapes: list[tuple[int, int]]
    level: np.ndarray
    row: np.ndarray
    col: np.ndarray
    points: np.ndarray
    gt_index: np.ndarray
    cls: np.ndarray
    head_s: np.ndarray
    centerness_s: np.ndarray
    label_s: np.ndarray
    label_d: np.ndarray
    ltrb: np.ndarray
    candidates: np.ndarray
    gt_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __len__(self) -> int:
        return len(self.level)

    @property
    def positive(self) -> np.ndarray:
        return self.label_s > 0

    @property
    def strides(self) -> np.ndarray:
        by_index = {lv.index: lv.stride for lv in self.levels}
        return np.array([by_index[i] for i in self.level], dtype=float)

    def level_grid(self, index: int, name: str = "label_s") -> np.ndarray:
        """One field of one level reshaped to its ``(rows, cols)`` grid."""
        pos = [lv.index for lv in self.levels].index(index)
        values = getattr(self, name)[self.level == index]
        return np.asarray(values, dtype=float).reshape(self.grid_shapes[pos])

    def couple_iou(self, predicted_boxes: np.ndarray) -> "AssignmentTable":
        """Return a copy with ``label_d = label_s * IoU(pred, matched gt)``.

        ``predicted_boxes`` is ``(N, 4)`` aligned with the table rows. Boxes are
        used as predicted, without clipping to the image.
        """
        predicted_boxes = np.asarray(predicted_boxes, dtype=float)
        if predicted_boxes.shape != (len(self), 4):
            raise ValueError(f"expected predicted boxes of shape {(len(self), 4)}, got {predicted_boxes.shape}")
        label_d = np.zeros(len(self))
        pos = self.positive
        if pos.any():
            gts = self.gt_boxes[self.gt_index[pos]]
            label_d[pos] = self.label_s[pos] * iou_array(predicted_boxes[pos], gts)
        return replace(self, label_d=label_d)

    def records(self) -> Iterator[LocationTarget]:
        for k in range(len(self)):
            matched = self.gt_index[k] >= 0
            yield LocationTarget(
                level=int(self.level[k]),
                row=int(self.row[k]),
                col=int(self.col[k]),
                x=float(self.points[k, 0]),
                y=float(self.points[k, 1]),
                gt_index=int(self.gt_index[k]) if matched else None,
                cls=int(self.cls[k]) if matched else None,
                head_s=float(self.head_s[k]),
                centerness_s=float(self.centerness_s[k]),
                label_s=float(self.label_s[k]),
                label_d=float(self.label_d[k]),
                ltrb=LtrbDistances(*map(float, self.ltrb[k])) if matched else None,
                candidates=int(self.candidates[k]),
            )


def _ltrb_grid(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    x = points[:, 0][:, None]
    y = points[:, 1][:, None]
    return np.stack(
        [x - boxes[None, :, 0], y - boxes[None, :, 1], boxes[None, :, 2] - x, boxes[None, :, 3] - y],
        axis=-1,
    )


def _head_scores(maxd: np.ndarray, level: LevelSpec, ramp: str) -> np.ndarray:
    lo, hi = level.lower, level.upper
    rlo, rhi = level.relaxed_lower, level.relaxed_upper
    out = np.zeros_like(maxd)
    out[(maxd > lo) & (maxd <= hi)] = 1.0
    below = (maxd > rlo) & (maxd <= lo)
    if below.any():
        v = maxd[below]
        out[below] = (lo - v) / (lo - rlo) if ramp == "printed" else (v - rlo) / (lo - rlo)
    above = (maxd > hi) & (maxd <= rhi)
    if above.any():
        v = maxd[above]
        out[above] = (v - hi) / (rhi - hi) if ramp == "printed" else (rhi - v) / (rhi - hi)
    return out


def _centerness_grid(d: np.ndarray, inside: np.ndarray) -> np.ndarray:
    l, t, r, b = (np.where(inside, d[..., k], 1.0) for k in range(4))
    c = np.sqrt((np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b)))
    return np.where(inside, c, 0.0)


def _core_zone_mask(points: np.ndarray, boxes: np.ndarray, inside: np.ndarray, stride: int) -> np.ndarray:
    """Locations whose centerness is forced to 1.0, including the fallback."""
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    half = stride / 2.0
    zl = np.maximum(cx - half, boxes[:, 0])
    zr = np.minimum(cx + half, boxes[:, 2])
    zt = np.maximum(cy - half, boxes[:, 1])
    zb = np.minimum(cy + half, boxes[:, 3])
    x = points[:, 0][:, None]
    y = points[:, 1][:, None]
    in_zone = (x >= zl) & (x <= zr) & (y >= zt) & (y <= zb)
    for g in range(boxes.shape[0]):
        if (in_zone[:, g] & inside[:, g]).any() or not inside[:, g].any():
            continue
        # zone caught no interior grid point: the interior location nearest the center stands in
        cand = np.flatnonzero(inside[:, g])
        dist2 = (points[cand, 0] - cx[g]) ** 2 + (points[cand, 1] - cy[g]) ** 2
        in_zone[cand[np.argmin(dist2)], g] = True
    return in_zone & inside


def assign_all(
    gt_boxes: Sequence[tuple[Box, int]],
    image_size: tuple[int, int],
    config: AssignerConfig = AssignerConfig(),
) -> AssignmentTable:
    """Assign every location on every level to at most one ground truth.

    Args:
        gt_boxes: ``(box, class_id)`` pairs; boxes are clipped to the image.
        image_size: ``(width, height)`` in pixels.
        config: level layout, relaxation and mode.

    Returns:
        An :class:`AssignmentTable` with ``label_d`` equal to ``label_s``
        (no predictions coupled yet).
    """
    width, height = image_size
    if width <= 0 or height <= 0:
        raise ValueError(f"image dimensions must be positive, got {image_size}")
    boxes = np.array(
        [b.clip(width, height).as_tuple() for b, _ in gt_boxes], dtype=float
    ).reshape(-1, 4)
    classes = np.array([int(c) for _, c in gt_boxes], dtype=int)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    k = boxes.shape[0]
    hard = config.mode == "fcos-hard"

    levels = relaxed_bounds(config)
    columns: dict[str, list[np.ndarray]] = {name: [] for name in (
        "level", "row", "col", "points", "gt_index", "cls", "head_s",
        "centerness_s", "label_s", "ltrb", "candidates")}
    shapes = []
    for lv in levels:
        rr, cc, pts = grid_points(image_size, lv.stride)
        n = len(rr)
        shapes.append(grid_shape(image_size, lv.stride))
        d = _ltrb_grid(pts, boxes)  # (n, k, 4)
        maxd = d.max(axis=-1) if k else np.zeros((n, 0))
        mind = d.min(axis=-1) if k else np.zeros((n, 0))
        inside = mind > 0
        cent = _centerness_grid(d, inside)
        if hard:
            head = np.where(inside & (maxd > lv.lower) & (maxd <= lv.upper), 1.0, 0.0)
            label = head.copy()
        else:
            head = np.where(inside, _head_scores(maxd, lv, config.ramp), 0.0)
            if config.core_zone and k:
                cent = np.where(_core_zone_mask(pts, boxes, inside, lv.stride), 1.0, cent)
            label = cent * head

        cand = label > 0
        best = np.full(n, -1, dtype=int)
        best_label = np.zeros(n)
        best_area = np.full(n, np.inf)
        for g in range(k):
            better = cand[:, g] & (
                (label[:, g] > best_label) | ((label[:, g] == best_label) & (areas[g] < best_area))
            )
            best = np.where(better, g, best)
            best_label = np.where(better, label[:, g], best_label)
            best_area = np.where(better, areas[g], best_area)

        matched = best >= 0
        pick = np.where(matched, best, 0)
        idx = np.arange(n)
        take = (lambda a: np.where(matched, a[idx, pick], 0.0)) if k else (lambda a: np.zeros(n))
        columns["level"].append(np.full(n, lv.index, dtype=int))
        columns["row"].append(rr)
        columns["col"].append(cc)
        columns["points"].append(pts)
        columns["gt_index"].append(best)
        columns["cls"].append(np.where(matched, classes[pick], -1) if k else np.full(n, -1))
        columns["head_s"].append(take(head))
        columns["centerness_s"].append(take(cent))
        columns["label_s"].append(take(label))
        columns["ltrb"].append(
            np.where(matched[:, None], d[idx, pick], np.nan) if k else np.full((n, 4), np.nan)
        )
        columns["candidates"].append(cand.sum(axis=1).astype(int))

    cat = {name: np.concatenate(parts) for name, parts in columns.items()}
    return AssignmentTable(
        levels=levels,
        grid_shapes=shapes,
        label_d=cat["label_s"].copy(),
        gt_boxes=boxes,
        **cat,
    )
