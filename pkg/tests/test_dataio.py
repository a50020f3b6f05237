import json
import math
from pathlib import Path

import numpy as np
import pytest

from dsla import dataio
from dsla.assigner import AssignerConfig, assign_all, grid_shape
from dsla.geometry import Box
from dsla.inference import Detection
from dsla.losses import LossParams, gpart_curves
from dsla.simulator import RunReport

FIXTURES = Path(__file__).parent / "fixtures" / "datasets"


# -- datasets -----------------------------------------------------------------


def test_load_minimal_dataset():
    ds = dataio.load_dataset(FIXTURES / "valid_minimal.json")
    assert (len(ds.images), len(ds.annotations)) == (1, 1)
    assert ds.annotations[0].box == Box(10, 20, 40, 60)
    assert ds.boxes_for(1) == [(Box(10, 20, 40, 60), 3)]
    assert ds.categories == {3: "car"}
    assert ds.images[1].file_name == "a.jpg"


@pytest.mark.parametrize("name, kind", [
    ("bad_json.json", "parse"),
    ("bad_missing_bbox.json", "parse"),
    ("bad_dangling.json", "dangling-reference"),
    ("bad_negative_extent.json", "negative-extent"),
    ("bad_image_size.json", "negative-extent"),
])
def test_malformed_fixtures_are_rejected(name, kind):
    with pytest.raises(dataio.DatasetError) as info:
        dataio.load_dataset(FIXTURES / name)
    assert info.value.kind == kind
    assert name in info.value.location


def test_every_fixture_is_classified():
    # exactly the bad_* fixtures fail
    for path in sorted(FIXTURES.glob("*.json")):
        if path.name.startswith("bad_"):
            with pytest.raises(dataio.DatasetError):
                dataio.load_dataset(path)
        else:
            dataio.load_dataset(path)


def test_error_locations_point_at_the_record():
    with pytest.raises(dataio.DanglingReferenceError) as info:
        dataio.parse_dataset({"images": [], "annotations": [
            {"id": 1, "image_id": 9, "category_id": 0, "bbox": [0, 0, 1, 1]}]}, "x.json")
    assert info.value.location == "x.json:annotations[0]"
    with pytest.raises(dataio.DatasetParseError):
        dataio.parse_dataset({"images": [{"id": 1, "width": 4, "height": 4}] * 2})
    with pytest.raises(dataio.DatasetParseError):
        dataio.parse_dataset([])


# -- assignments ----------------------------------------------------------------


def _table():
    return assign_all([(Box(3, 4, 40, 30), 2), (Box(20, 10, 60, 60), 5)], (64, 64),
                      AssignerConfig(strides=(8, 16), ranges=(0, 16, math.inf)))


def test_assignment_round_trip(tmp_path):
    table = _table()
    rng = np.random.default_rng(0)
    coupled = table.couple_iou(np.hstack([table.points - rng.uniform(1, 9, (len(table), 2)),
                                          table.points + rng.uniform(1, 9, (len(table), 2))]))
    path = tmp_path / "a.csv"
    dataio.write_assignments(path, coupled)
    back = dataio.read_assignments(path)
    assert back == list(coupled.records())


def test_assignment_header_and_row_count(tmp_path):
    path = tmp_path / "a.csv"
    dataio.write_assignments(path, _table())
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:15] == "level,row,col,img_x,img_y,gt_index,class,head_s,centerness_s,label_s,label_d,l,t,r,b".split(",")
    cells = sum(r * c for r, c in (grid_shape((64, 64), 8), grid_shape((64, 64), 16)))
    assert len(lines) - 1 == cells == 80


def test_empty_assignment_is_header_only(tmp_path):
    path = tmp_path / "a.csv"
    dataio.write_assignments(path, [])
    assert path.read_text() == ",".join(dataio.ASSIGNMENT_COLUMNS) + "\n"
    assert dataio.read_assignments(path) == []


def test_assignments_without_candidates_column(tmp_path):
    path = tmp_path / "a.csv"
    dataio.write_assignments(path, _table())
    lines = [",".join(line.split(",")[:15]) for line in path.read_text().splitlines()]
    path.write_text("\n".join(lines) + "\n")
    back = dataio.read_assignments(path)
    assert all(t.candidates == 0 for t in back)
    assert [t.label_s for t in back] == [t.label_s for t in _table().records()]


def test_bad_assignment_table(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("level,row\n1,2\n")
    with pytest.raises(dataio.TableFormatError):
        dataio.read_assignments(path)
    path.write_text("")
    with pytest.raises(dataio.TableFormatError):
        dataio.read_assignments(path)


# -- detections -----------------------------------------------------------------


def test_detection_round_trip(tmp_path):
    dets = [Detection(Box(0.1, 0.2, 10 / 3, 7.25), 1, 2 / 3, 2, 3, 4), Detection(Box(5, 5, 9, 9), 0, 0.5)]
    path = tmp_path / "d.csv"
    dataio.write_detections(path, dets)
    assert dataio.read_detections(path) == (dets, None)
    dataio.write_detections(path, dets, [0.1, 1 / 7])
    assert dataio.read_detections(path) == (dets, [0.1, 1 / 7])


# -- curves, heatmaps, reports -------------------------------------------------------


def test_curves_round_trip(tmp_path):
    path = tmp_path / "c.csv"
    pts = gpart_curves(y_values=(0.3, 0.7))
    dataio.write_curves(path, pts, (0.3, 0.7))
    header, data = dataio.read_curves(path)
    assert header == ["p", "g_a", "g_b", "g_gfl_y=0.3", "g_gfl_y=0.7"]
    assert data.shape == (99, 5)
    assert data[10, 1] == pts[10].g_a


@pytest.mark.parametrize("value, pixel", [(0.0, 0), (1.0, 255), (0.53125, 135), (0.5, 128)])
def test_heatmap_pixels(tmp_path, value, pixel):
    path = tmp_path / "h.pgm"
    dataio.write_heatmap(path, np.full((2, 3), value))
    assert path.read_bytes().startswith(b"P5\n3 2\n255\n")
    assert (dataio.read_heatmap(path) == pixel).all()


def test_heatmap_rejects_out_of_range():
    with pytest.raises(ValueError):
        dataio.heatmap_bytes(np.array([[1.5]]))
    with pytest.raises(ValueError):
        dataio.heatmap_bytes(np.array([[math.nan]]))


def test_report_round_trip(tmp_path):
    report = RunReport("fl-hard", 3, 0.1234567890123, math.nan, -0.25, [1.0, 0.5, 1 / 3], [0.0, 1e-17, 2.0])
    path = tmp_path / "r.json"
    dataio.write_report(path, report)
    doc = json.loads(path.read_text())
    assert doc["boundary_gap"] is None
    assert doc["mean_conflict"] == pytest.approx((2 + 1e-17) / 3)
    back = dataio.read_report(path)
    assert math.isnan(back.boundary_gap)
    back.boundary_gap = report.boundary_gap = 0.0
    assert back == report


def test_trace_file(tmp_path):
    report = RunReport("fl-hard", 2, 0.1, 0.2, 0.3, [1.0, 0.5], [0.1, 0.2])
    path = tmp_path / "t.csv"
    dataio.write_trace(path, report)
    assert path.read_text().splitlines() == ["iteration,loss,conflict", "0,1,0.10000000000000001", "1,0.5,0.20000000000000001"]


def test_atomic_write_leaves_no_temp_files(tmp_path):
    dataio.atomic_write(tmp_path / "sub" / "x.txt", "hi")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.txt"]


# -- config -------------------------------------------------------------------------


def test_empty_config_is_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("")
    for cfg in (dataio.load_config(None), dataio.load_config(path), dataio.parse_config({})):
        assert cfg == dataio.Config()
        assert cfg.assigner.ranges == (0, 64, 128, 256, 512, math.inf)
        assert cfg.assigner.kappa == 0.2
        assert (cfg.loss.alpha, cfg.loss.gamma) == (0.25, 2.0)


def test_config_kappa_out_of_domain():
    with pytest.raises(dataio.ConfigError) as info:
        dataio.parse_config({"assigner": {"kappa": 1.5}})
    assert info.value.path == "assigner.kappa"


def test_config_partial_override():
    cfg = dataio.parse_config({"nms": {"iou_threshold": 0.5}})
    assert cfg.nms.iou_threshold == 0.5
    assert cfg.nms.score_threshold == dataio.Config().nms.score_threshold
    assert cfg.assigner == dataio.Config().assigner


def test_config_sections():
    cfg = dataio.parse_config({
        "assigner": {"ranges": [0, 32, 64, 128, 256, None], "mode": "fcos-hard"},
        "loss": {"gamma": 1},
        "nms": {"mode": "fcos"},
        "simulator": {"iterations": 10, "seed": 7, "modes": ["fl-hard"], "scene": {"width": 64}},
    })
    assert cfg.assigner.ranges[-1] == math.inf and cfg.assigner.mode == "fcos-hard"
    assert cfg.rank_mode == "fcos"
    sim = cfg.simulator
    assert sim.train.iterations == 10 and sim.train.seed == 7 and sim.scene.seed == 7
    assert sim.modes == ("fl-hard",) and sim.scene.width == 64
    assert sim.train.loss == cfg.loss == LossParams(gamma=1.0)
    assert sim.train.assigner == cfg.assigner


@pytest.mark.parametrize("doc, path", [
    ({"assigner": {"stride": [8]}}, "assigner.stride"),
    ({"loss": {"alpha": "x"}}, "loss.alpha"),
    ({"nms": {"mode": "soft"}}, "nms.mode"),
    ({"simulator": {"modes": ["sgd"]}}, "simulator.modes[0]"),
    ({"simulator": {"scene": {"size_range": [1]}}}, "simulator.scene.size_range"),
    ({"extra": {}}, "extra"),
    ({"assigner": {"core_zone": 1}}, "assigner.core_zone"),
])
def test_config_errors_carry_field_path(doc, path):
    with pytest.raises(dataio.ConfigError) as info:
        dataio.parse_config(doc)
    assert info.value.path == path


def test_config_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{")
    with pytest.raises(dataio.ConfigError):
        dataio.load_config(path)


def test_config_overrides_are_validated_together():
    # a smaller scene is only valid together with a smaller size range
    cfg = dataio.parse_config({"simulator": {"scene": {"width": 48, "size_range": [8, 20]}}})
    assert cfg.simulator.scene.width == 48
    with pytest.raises(dataio.ConfigError) as info:
        dataio.parse_config({"simulator": {"scene": {"width": 48}}})
    assert info.value.path == "simulator.scene.width"
