"""Desk-scale testbed for the label-assignment inconsistencies.

A synthetic grey image holds bright axis-aligned rectangles on a noisy
background. Every feature location (on every pyramid level) sees the flattened
image patch around its back-projected point, so neighbouring locations get
overlapping inputs. One linear map shared by all locations produces a class
logit and four exponential-link box distances, and plain gradient descent
trains it under one of three supervision schemes:

``fl-hard``
    binary FCOS assignment, focal loss;
``gfl-smooth-static``
    smooth labels, generalized focal loss;
``gfl-dsla-dynamic``
    smooth labels coupled with the current predicted-box IoU every iteration.

The two metrics are this package's operationalisation of the inconsistencies:
:func:`boundary_gap_metric` for classification and
:func:`ranking_correlation_metric` for quality estimation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from dsla.assigner import AssignerConfig, AssignmentTable, assign_all
from dsla.geometry import Box, decode_array, pairwise_iou
from dsla.inference import Detection
from dsla.losses import LossParams, focal_gpart, gfl_gpart, sigmoid, total_loss

TRAIN_MODES = ("fl-hard", "gfl-smooth-static", "gfl-dsla-dynamic")


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class SceneSpec:
    width: int = 96
    height: int = 96
    num_rects: int = 3
    size_range: tuple[int, int] = (16, 56)
    intensity_range: tuple[float, float] = (0.6, 1.0)
    noise: float = 0.1
    seed: int = 42

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("scene dimensions must be positive")
        if self.num_rects < 0:
            raise ValueError("num_rects must be >= 0")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid size range {self.size_range}")
        if self.num_rects and hi > min(self.width, self.height):
            raise ValueError(
                f"rectangles up to {hi}px cannot fit in a {self.width}x{self.height} scene"
            )
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass
class Scene:
    image: np.ndarray  # (height, width)
    gt_boxes: list[tuple[Box, int]]
    spec: SceneSpec

    @property
    def size(self) -> tuple[int, int]:
        return self.spec.width, self.spec.height


def make_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    image = rng.normal(0.0, spec.noise, size=(spec.height, spec.width))
    boxes = []
    lo, hi = spec.size_range
    for _ in range(spec.num_rects):
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(0, spec.width - w + 1))
        y = int(rng.integers(0, spec.height - h + 1))
        level = rng.uniform(*spec.intensity_range)
        image[y:y + h, x:x + w] += level
        boxes.append((Box(float(x), float(y), float(x + w), float(y + h)), 0))
    return Scene(image=image, gt_boxes=boxes, spec=spec)


def patch_features(image: np.ndarray, points: np.ndarray, radius: int) -> np.ndarray:
    """Flattened ``(2r+1)^2`` zero-padded patches centred on each point."""
    padded = np.pad(image, radius)
    k = 2 * radius + 1
    cols = np.floor(points[:, 0]).astype(int)
    rows = np.floor(points[:, 1]).astype(int)
    out = np.zeros((len(points), k * k))
    h, w = image.shape
    for n, (r, c) in enumerate(zip(rows, cols)):
        r = min(max(r, 0), h - 1)
        c = min(max(c, 0), w - 1)
        out[n] = padded[r:r + k, c:c + k].ravel()
    return out


def patch_overlap(radius: int, stride: int) -> float:
    """Fraction of a patch shared with its neighbour, along one axis."""
    k = 2 * radius + 1
    return max(k - stride, 0) / k


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "gfl-dsla-dynamic"
    learning_rate: float = 0.1
    iterations: int = 2000
    patch_radius: int = 6
    loss: LossParams = field(default_factory=LossParams)
    assigner: AssignerConfig = field(default_factory=AssignerConfig)
    prior_prob: float = 0.01
    init_scale: float = 0.01
    seed: int = 42

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be >= 0")


@dataclass
class RunReport:
    mode: str
    iterations: int
    final_loss: float
    boundary_gap: float
    ranking_correlation: float
    loss_trace: list[float]
    conflict_trace: list[float]

    @property
    def mean_conflict(self) -> float:
        return float(np.mean(self.conflict_trace)) if self.conflict_trace else math.nan


# -- problem setup ---------------------------------------------------------


@dataclass
class Problem:
    """Everything fixed during training: features, targets, adjacency."""

    table: AssignmentTable
    features: np.ndarray  # (N, F)
    strides: np.ndarray  # (N,)
    pairs: tuple[np.ndarray, np.ndarray]  # boundary pairs, see boundary_pairs()
    classification: str
    params: LossParams
    dynamic: bool


def assigner_for_mode(mode: str, config: AssignerConfig) -> AssignerConfig:
    return replace(config, mode="fcos-hard" if mode == "fl-hard" else "dsla-smooth")


def build_problem(scene: Scene, config: TrainConfig) -> Problem:
    table = assign_all(scene.gt_boxes, scene.size, assigner_for_mode(config.mode, config.assigner))
    # scaled so a patch has O(1) norm whatever the radius
    patches = patch_features(scene.image, table.points, config.patch_radius) / (2 * config.patch_radius + 1)
    # per-level indicator columns act as level-specific biases
    onehot = (table.level[:, None] == np.array([lv.index for lv in table.levels])[None, :]).astype(float)
    features = np.hstack([patches, onehot])
    return Problem(
        table=table,
        features=features,
        strides=table.strides,
        pairs=boundary_pairs(table),
        classification="focal" if config.mode == "fl-hard" else "gfl",
        params=config.loss,
        dynamic=config.mode == "gfl-dsla-dynamic",
    )


def init_weights(num_features: int, config: TrainConfig) -> np.ndarray:
    """``(F, 5)`` weights: column 0 is the class logit, 1..4 the log-distances."""
    rng = np.random.default_rng(config.seed)
    w = rng.normal(0.0, config.init_scale, size=(num_features, 5))
    # level indicators sum to one per location, so they carry the prior bias
    prior = -math.log((1.0 - config.prior_prob) / config.prior_prob)
    w[-_num_levels_in(num_features, config):, 0] += prior
    return w


def _num_levels_in(num_features: int, config: TrainConfig) -> int:
    return num_features - (2 * config.patch_radius + 1) ** 2


def forward(problem: Problem, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scores, ltrb distances and decoded boxes for every location."""
    out = problem.features @ weights
    p = np.atleast_1d(sigmoid(out[:, 0]))
    dist = problem.strides[:, None] * np.exp(np.clip(out[:, 1:], -30.0, 30.0))
    boxes = decode_array(problem.table.points, dist)
    return p, dist, boxes


def classification_targets(problem: Problem, boxes: np.ndarray) -> np.ndarray:
    """Targets for the current iterate; only the dynamic scheme depends on ``boxes``."""
    if problem.dynamic:
        return problem.table.couple_iou(boxes).label_d
    return problem.table.label_s.copy()


def loss_and_grad(
    problem: Problem, weights: np.ndarray, targets: Optional[np.ndarray] = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """Total loss and its gradient with respect to all shared weights.

    Classification targets are treated as constants (no gradient flows through
    the IoU used for the dynamic labels). When ``targets`` is omitted they are
    computed from the current iterate.

    Returns:
        ``(loss, grad, g_cls)`` with ``g_cls`` the per-location logit gradient.
    """
    p, dist, boxes = forward(problem, weights)
    if targets is None:
        targets = classification_targets(problem, boxes)
    table = problem.table
    target_ltrb = np.where(table.positive[:, None], table.ltrb, 1.0)
    loss, g_cls, g_reg = total_loss(
        targets, table.positive, p, dist, target_ltrb, problem.params, problem.classification
    )
    grad = np.empty_like(weights)
    grad[:, 0] = problem.features.T @ g_cls
    grad[:, 1:] = problem.features.T @ (g_reg * dist)
    return loss, grad, g_cls


def raw_gparts(problem: Problem, p: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Unnormalised per-location classification G-parts."""
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    if problem.classification == "focal":
        return np.atleast_1d(focal_gpart(p, targets > 0.5, problem.params))
    return np.atleast_1d(gfl_gpart(p, targets, problem.params))


def gradient_conflict(g: np.ndarray, pairs: tuple[np.ndarray, np.ndarray]) -> float:
    """Mean over ``pairs`` of ``min(|g_a|, |g_b|)`` where the signs oppose."""
    a, b = pairs
    if len(a) == 0:
        return 0.0
    ga, gb = g[a], g[b]
    opposed = np.sign(ga) * np.sign(gb) < 0
    return float(np.mean(np.where(opposed, np.minimum(np.abs(ga), np.abs(gb)), 0.0)))


# -- metrics ---------------------------------------------------------------


def adjacent_pairs(table: AssignmentTable) -> tuple[np.ndarray, np.ndarray]:
    """4-neighbour location pairs ``(i, j)`` on each level's grid, each pair once."""
    first, second = [], []
    offset = 0
    for lv, (rows, cols) in zip(table.levels, table.grid_shapes):
        idx = offset + np.arange(rows * cols).reshape(rows, cols)
        first += [idx[:, :-1].ravel(), idx[:-1, :].ravel()]
        second += [idx[:, 1:].ravel(), idx[1:, :].ravel()]
        offset += rows * cols
    if not first:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.concatenate(first).astype(int), np.concatenate(second).astype(int)


def boundary_pairs(table: AssignmentTable) -> tuple[np.ndarray, np.ndarray]:
    """Adjacent pairs whose matched ground truth differs (matched vs. unmatched included)."""
    a, b = adjacent_pairs(table)
    keep = table.gt_index[a] != table.gt_index[b]
    return a[keep], b[keep]


def boundary_gap_metric(table: AssignmentTable, scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean ``|target difference - score difference|`` over boundary pairs.

    Zero means the predicted scores change across every assignment boundary
    exactly as the assigned targets do. Returns NaN when the assignment has no
    boundary pairs.
    """
    scores = np.asarray(scores, dtype=float)
    targets = np.asarray(targets, dtype=float)
    a, b = boundary_pairs(table)
    if len(a) == 0:
        return math.nan
    return float(np.mean(np.abs((targets[a] - targets[b]) - (scores[a] - scores[b]))))


def ranking_correlation_metric(detections: Sequence[Detection], gt_boxes: Sequence[Box]) -> float:
    """Spearman correlation between ranking score and IoU with the matched gt.

    Each detection is matched to the ground truth it overlaps most; detections
    overlapping nothing are ignored. Ties take mean ranks.
    """
    if not gt_boxes:
        raise ValueError("ranking correlation needs ground-truth boxes")
    boxes = np.array([d.box.as_tuple() for d in detections], dtype=float).reshape(-1, 4)
    gts = np.array([g.as_tuple() for g in gt_boxes], dtype=float)
    best = pairwise_iou(boxes, gts).max(axis=1) if len(boxes) else np.zeros(0)
    matched = best > 0
    if matched.sum() < 2:
        raise ValueError("ranking correlation needs at least two matched detections")
    scores = np.array([d.score for d in detections])[matched]
    rho = spearmanr(scores, best[matched]).statistic
    return float(rho)


def foreground_detections(problem: Problem, p: np.ndarray, boxes: np.ndarray) -> list[Detection]:
    """Decoded predictions at locations lying strictly inside any ground truth."""
    table = problem.table
    gts = table.gt_boxes
    x = table.points[:, 0][:, None]
    y = table.points[:, 1][:, None]
    inside = ((x > gts[None, :, 0]) & (y > gts[None, :, 1]) & (x < gts[None, :, 2]) & (y < gts[None, :, 3])).any(axis=1)
    out = []
    for k in np.flatnonzero(inside):
        x1, y1, x2, y2 = boxes[k]
        out.append(Detection(Box(x1, y1, x2, y2), 0, float(p[k]), int(table.level[k]), int(table.row[k]), int(table.col[k])))
    return out


def evaluate(problem: Problem, weights: np.ndarray) -> tuple[float, float, float]:
    """``(loss, boundary_gap, ranking_correlation)`` at the given weights."""
    p, _, boxes = forward(problem, weights)
    targets = classification_targets(problem, boxes)
    loss, _, _ = loss_and_grad(problem, weights, targets)
    gap = boundary_gap_metric(problem.table, p, targets)
    gts = [Box(*map(float, g)) for g in problem.table.gt_boxes]
    try:
        rho = ranking_correlation_metric(foreground_detections(problem, p, boxes), gts)
    except ValueError:
        rho = math.nan
    return loss, gap, rho


def train(
    scene: Scene,
    config: TrainConfig = TrainConfig(),
    on_iteration: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None,
) -> RunReport:
    """Run plain gradient descent and report metrics at the final weights.

    ``on_iteration(t, weights, targets)`` is called before each update with the
    classification targets used at that step.
    """
    problem = build_problem(scene, config)
    weights = init_weights(problem.features.shape[1], config)
    loss_trace, conflict_trace = [], []
    for t in range(config.iterations):
        p, dist, boxes = forward(problem, weights)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(dist))):
            raise TrainingDiverged(f"{config.mode}: non-finite predictions at iteration {t}")
        targets = classification_targets(problem, boxes)
        if on_iteration is not None:
            on_iteration(t, weights, targets)
        loss, grad, _ = loss_and_grad(problem, weights, targets)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"{config.mode}: non-finite loss at iteration {t}")
        loss_trace.append(loss)
        conflict_trace.append(gradient_conflict(raw_gparts(problem, p, targets), problem.pairs))
        weights = weights - config.learning_rate * grad
    loss, gap, rho = evaluate(problem, weights)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{config.mode}: non-finite final loss")
    return RunReport(
        mode=config.mode,
        iterations=config.iterations,
        final_loss=loss,
        boundary_gap=gap,
        ranking_correlation=rho,
        loss_trace=loss_trace,
        conflict_trace=conflict_trace,
    )


def compare_modes(
    scene: Scene, config: TrainConfig = TrainConfig(), modes: Sequence[str] = TRAIN_MODES
) -> dict[str, RunReport]:
    return {mode: train(scene, replace(config, mode=mode)) for mode in modes}
