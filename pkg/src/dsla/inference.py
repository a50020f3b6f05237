"""Box decoding, ranking scores and greedy NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from dsla.geometry import Box, LtrbDistances, Point, pairwise_iou

RANK_MODES = ("dsla", "fcos")


@dataclass(frozen=True)
class Detection:
    box: Box
    cls: int
    score: float
    level: int = 0
    row: int = 0
    col: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def decode_box(location: Point, d: LtrbDistances) -> Box:
    if min(d) < 0:
        raise ValueError(f"distances must be non-negative, got {tuple(d)}")
    x, y = location
    l, t, r, b = d
    return Box(x - l, y - t, x + r, y + b)


def rank_score(cls_score: float, quality: Optional[float] = None, mode: str = "dsla") -> float:
    """NMS ranking score.

    ``dsla`` ranks by the classification score alone (it already carries
    localization quality); ``fcos`` multiplies in a separate quality estimate.
    """
    if mode == "dsla":
        return cls_score
    if mode == "fcos":
        if quality is None:
            raise ValueError("fcos ranking needs a quality score")
        return cls_score * quality
    raise ValueError(f"unknown ranking mode {mode!r}")


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.6
    score_threshold: float = 0.05
    max_pre: int = 1000
    max_post: int = 100
    class_agnostic: bool = False

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in [0, 1], got {self.iou_threshold}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError(f"score_threshold must lie in [0, 1], got {self.score_threshold}")
        if self.max_pre < 0 or self.max_post < 0:
            raise ValueError("max_pre and max_post must be non-negative")


def nms_indices(
    boxes: np.ndarray,
    scores: np.ndarray,
    classes: np.ndarray,
    iou_threshold: float = 0.6,
    score_threshold: float = 0.05,
    max_pre: int = 1000,
    max_post: int = 100,
    class_agnostic: bool = False,
) -> list[int]:
    """Indices of the detections kept by greedy NMS, highest score first.

    Detections scoring at or below ``score_threshold`` are dropped, the best
    ``max_pre`` survivors enter suppression, and at most ``max_post`` are
    returned. Equal scores are ordered by input index.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float).ravel()
    classes = np.asarray(classes).ravel()
    cand = np.flatnonzero(scores > score_threshold)
    # stable sort on -score keeps the input order among ties
    cand = cand[np.argsort(-scores[cand], kind="stable")][:max_pre]
    if cand.size == 0:
        return []
    ious = pairwise_iou(boxes[cand], boxes[cand])
    same = np.ones_like(ious, dtype=bool) if class_agnostic else classes[cand][:, None] == classes[cand][None, :]
    suppressed = np.zeros(cand.size, dtype=bool)
    keep = []
    for i in range(cand.size):
        if suppressed[i]:
            continue
        keep.append(int(cand[i]))
        if len(keep) == max_post:
            break
        suppressed |= same[i] & (ious[i] > iou_threshold)
    return keep


def greedy_nms(
    detections: Sequence[Detection],
    iou_threshold: float = 0.6,
    score_threshold: float = 0.05,
    max_pre: int = 1000,
    max_post: int = 100,
    class_agnostic: bool = False,
) -> list[Detection]:
    if not detections:
        return []
    boxes = np.array([d.box.as_tuple() for d in detections], dtype=float)
    scores = np.array([d.score for d in detections], dtype=float)
    classes = np.array([d.cls for d in detections])
    keep = nms_indices(
        boxes, scores, classes, iou_threshold, score_threshold, max_pre, max_post, class_agnostic
    )
    return [detections[i] for i in keep]
