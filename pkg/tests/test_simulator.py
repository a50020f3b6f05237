import math
from dataclasses import replace

import numpy as np
import pytest

from dsla.assigner import AssignerConfig, assign_all
from dsla.geometry import Box
from dsla.inference import Detection
from dsla.simulator import (
    TRAIN_MODES,
    SceneSpec,
    TrainConfig,
    TrainingDiverged,
    adjacent_pairs,
    boundary_gap_metric,
    boundary_pairs,
    build_problem,
    compare_modes,
    evaluate,
    forward,
    gradient_conflict,
    init_weights,
    loss_and_grad,
    make_scene,
    patch_features,
    patch_overlap,
    ranking_correlation_metric,
    train,
)

SMALL = SceneSpec(width=48, height=48, num_rects=2, size_range=(12, 30), seed=7)


def test_scene_determinism():
    a, b = make_scene(SMALL), make_scene(SMALL)
    assert np.array_equal(a.image, b.image)
    assert a.gt_boxes == b.gt_boxes
    c = make_scene(replace(SMALL, seed=8))
    assert not np.array_equal(a.image, c.image)


def test_zero_rectangles_is_pure_noise():
    scene = make_scene(replace(SMALL, num_rects=0))
    assert scene.gt_boxes == []
    assert abs(scene.image.mean()) < 0.02
    assert scene.image.std() == pytest.approx(SMALL.noise, rel=0.1)


def test_scene_boxes_lie_inside_the_image():
    scene = make_scene(SceneSpec(num_rects=5))
    for box, cls in scene.gt_boxes:
        assert 0 <= box.x1 < box.x2 <= 96 and 0 <= box.y1 < box.y2 <= 96
        assert 16 <= box.width <= 56 and cls == 0


@pytest.mark.parametrize("kwargs", [dict(size_range=(16, 200)), dict(size_range=(0, 10)), dict(noise=-1), dict(width=0)])
def test_scene_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SceneSpec(**kwargs)


@pytest.mark.parametrize("radius, stride", [(6, 8), (6, 4), (3, 8), (2, 5)])
def test_patch_overlap(radius, stride):
    k = 2 * radius + 1
    expected = (k - stride) / k if stride <= k else 0.0
    assert patch_overlap(radius, stride) == pytest.approx(expected)
    # count shared pixels between neighbouring patches directly
    image = np.arange(64 * 64, dtype=float).reshape(64, 64)
    pts = np.array([[30.0, 30.0], [30.0 + stride, 30.0]])
    pa, pb = patch_features(image, pts, radius).reshape(2, k, k)
    shared_cols = len(set(pa[0]) & set(pb[0]))
    assert shared_cols / k == pytest.approx(expected)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="sgd")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_zero_iterations_reports_baseline():
    scene = make_scene(SMALL)
    config = TrainConfig(iterations=0)
    report = train(scene, config)
    problem = build_problem(scene, config)
    loss, gap, rho = evaluate(problem, init_weights(problem.features.shape[1], config))
    assert report.loss_trace == [] and report.conflict_trace == []
    assert report.final_loss == loss and report.boundary_gap == gap
    assert report.ranking_correlation == rho or (math.isnan(rho) and math.isnan(report.ranking_correlation))
    assert math.isnan(report.mean_conflict)


def test_training_is_deterministic_and_reduces_loss():
    scene = make_scene(SMALL)
    config = TrainConfig(iterations=60)
    a, b = train(scene, config), train(scene, config)
    assert a == b
    assert a.final_loss < a.loss_trace[0]


@pytest.mark.parametrize("mode", TRAIN_MODES)
def test_gradient_matches_finite_differences(mode, rng):
    scene = make_scene(SMALL)
    config = TrainConfig(mode=mode, patch_radius=2)
    problem = build_problem(scene, config)
    w = init_weights(problem.features.shape[1], config) + rng.normal(0, 0.3, size=(problem.features.shape[1], 5))
    _, _, boxes = forward(problem, w)
    from dsla.simulator import classification_targets
    targets = classification_targets(problem, boxes)
    _, grad, _ = loss_and_grad(problem, w, targets)
    h = 1e-6
    for _ in range(25):
        i, j = int(rng.integers(w.shape[0])), int(rng.integers(5))
        wp, wm = w.copy(), w.copy()
        wp[i, j] += h
        wm[i, j] -= h
        fd = (loss_and_grad(problem, wp, targets)[0] - loss_and_grad(problem, wm, targets)[0]) / (2 * h)
        assert grad[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_dynamic_targets_bounded_by_static_labels():
    scene = make_scene(SMALL)
    config = TrainConfig(iterations=30)
    static = assign_all(scene.gt_boxes, scene.size, AssignerConfig()).label_s
    seen = []

    def check(t, weights, targets):
        assert (targets <= static + 1e-15).all()
        assert (targets[static == 0] == 0).all()
        seen.append(t)

    train(scene, config, on_iteration=check)
    assert seen == list(range(30))


def test_static_targets_do_not_move():
    scene = make_scene(SMALL)
    first = []

    def check(t, weights, targets):
        if not first:
            first.append(targets.copy())
        assert np.array_equal(targets, first[0])

    train(scene, TrainConfig(mode="gfl-smooth-static", iterations=10), on_iteration=check)


def test_boundary_gap_examples():
    table = assign_all([(Box(8, 8, 40, 40), 0)], (64, 64), AssignerConfig(mode="fcos-hard"))
    t = table.label_s
    assert boundary_gap_metric(table, t, t) == 0.0
    assert boundary_gap_metric(table, np.full(len(t), 0.3), t) == pytest.approx(1.0)
    empty = assign_all([], (32, 32))
    assert math.isnan(boundary_gap_metric(empty, np.zeros(len(empty)), empty.label_s))


def test_pairs():
    table = assign_all([(Box(8, 8, 40, 40), 0)], (32, 16), AssignerConfig(strides=(8, 16), ranges=(0, 64, math.inf)))
    a, b = adjacent_pairs(table)
    # level 1 is 2x4 (10 pairs), level 2 is 1x2 (1 pair)
    assert len(a) == 11
    ba, bb = boundary_pairs(table)
    assert (table.gt_index[ba] != table.gt_index[bb]).all()


def test_gradient_conflict():
    g = np.array([-1.0, 0.5, 0.2, 0.3])
    assert gradient_conflict(g, (np.array([0, 2]), np.array([1, 3]))) == pytest.approx(0.25)
    assert gradient_conflict(g, (np.zeros(0, int), np.zeros(0, int))) == 0.0


def _det(box, score):
    return Detection(Box(*box), 0, score)


def test_ranking_correlation_examples():
    gt = [Box(0, 0, 10, 10)]
    boxes = [(0, 0, 10, w) for w in (2, 4, 6, 8, 10)]
    ious = [w / 10 for w in (2, 4, 6, 8, 10)]
    assert ranking_correlation_metric([_det(b, s) for b, s in zip(boxes, ious)], gt) == pytest.approx(1.0)
    assert ranking_correlation_metric([_det(b, 1 - s) for b, s in zip(boxes, ious)], gt) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        ranking_correlation_metric([_det(boxes[0], 0.5)], gt)
    with pytest.raises(ValueError):
        ranking_correlation_metric([], [])


def test_divergence_raises():
    # logits are clipped and the IoU loss is floored, so a corrupted input is
    # the practical way to reach a non-finite loss
    scene = make_scene(SMALL)
    x1, y1 = int(scene.gt_boxes[0][0].x1), int(scene.gt_boxes[0][0].y1)
    scene.image[y1 + 2, x1 + 2] = np.nan
    with pytest.raises(TrainingDiverged):
        train(scene, TrainConfig(iterations=5))


def test_compare_modes_runs_all():
    reports = compare_modes(make_scene(SMALL), TrainConfig(iterations=5))
    assert list(reports) == list(TRAIN_MODES)
    assert all(len(r.loss_trace) == 5 for r in reports.values())
