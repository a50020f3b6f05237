"""Reading annotations and configs; writing assignments, curves, detections,
heatmaps and simulator reports.

Tabular outputs are comma-separated with a header row and floats written with
17 significant digits, so every round-trip is exact. Heatmaps are binary PGM.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from dsla.assigner import AssignerConfig, AssignmentTable, LocationTarget
from dsla.geometry import Box, LtrbDistances
from dsla.inference import Detection, NmsConfig
from dsla.losses import GPoint, LossParams
from dsla.simulator import TRAIN_MODES, RunReport, SceneSpec, TrainConfig

PathLike = Union[str, os.PathLike]

ASSIGNMENT_COLUMNS = (
    "level", "row", "col", "img_x", "img_y", "gt_index", "class",
    "head_s", "centerness_s", "label_s", "label_d", "l", "t", "r", "b", "candidates",
)
DETECTION_COLUMNS = ("class", "score", "x1", "y1", "x2", "y2", "level", "row", "col")


# -- errors ----------------------------------------------------------------


class DatasetError(ValueError):
    """Base for annotation-file problems. ``location`` says where."""

    kind = "dataset"

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class DatasetParseError(DatasetError):
    kind = "parse"


class DanglingReferenceError(DatasetError):
    kind = "dangling-reference"


class NegativeExtentError(DatasetError):
    kind = "negative-extent"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class TableFormatError(ValueError):
    pass


# -- helpers ---------------------------------------------------------------


def fmt(value: float) -> str:
    return format(float(value), ".17g")


def atomic_write(path: PathLike, data: Union[str, bytes]) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _read_csv(path: PathLike) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TableFormatError(f"{path}: missing header row")
    return rows[0], rows[1:]


# -- dataset ---------------------------------------------------------------


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str = ""


@dataclass(frozen=True)
class AnnotationRecord:
    id: int
    image_id: int
    category_id: int
    box: Box


@dataclass
class DatasetRecord:
    images: dict[int, ImageRecord]
    annotations: list[AnnotationRecord]
    categories: dict[int, str] = field(default_factory=dict)

    def boxes_for(self, image_id: int) -> list[tuple[Box, int]]:
        return [(a.box, a.category_id) for a in self.annotations if a.image_id == image_id]


def _require(obj: dict, key: str, where: str, kind=(int, float)) -> Any:
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetParseError(f"missing field {key!r}", where)
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise DatasetParseError(f"field {key!r} has wrong type {type(value).__name__}", where)
    return value


def parse_dataset(doc: Any, source: str = "") -> DatasetRecord:
    prefix = f"{source}:" if source else ""
    if not isinstance(doc, dict):
        raise DatasetParseError("top level must be an object", source)
    images_raw = doc.get("images")
    anns_raw = doc.get("annotations", [])
    if not isinstance(images_raw, list):
        raise DatasetParseError("'images' must be a list", f"{prefix}images")
    if not isinstance(anns_raw, list):
        raise DatasetParseError("'annotations' must be a list", f"{prefix}annotations")

    images: dict[int, ImageRecord] = {}
    for i, img in enumerate(images_raw):
        where = f"{prefix}images[{i}]"
        image_id = _require(img, "id", where, int)
        width = _require(img, "width", where)
        height = _require(img, "height", where)
        if width <= 0 or height <= 0:
            raise NegativeExtentError(f"image size {width}x{height} is not positive", where)
        if image_id in images:
            raise DatasetParseError(f"duplicate image id {image_id}", where)
        images[image_id] = ImageRecord(image_id, width, height, str(img.get("file_name", "")))

    categories = {}
    for i, cat in enumerate(doc.get("categories", []) or []):
        where = f"{prefix}categories[{i}]"
        categories[_require(cat, "id", where, int)] = str(cat.get("name", ""))

    annotations = []
    for i, ann in enumerate(anns_raw):
        where = f"{prefix}annotations[{i}]"
        ann_id = _require(ann, "id", where, int)
        image_id = _require(ann, "image_id", where, int)
        category_id = _require(ann, "category_id", where, int)
        bbox = _require(ann, "bbox", where, list)
        if len(bbox) != 4 or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in bbox):
            raise DatasetParseError("bbox must be four numbers [x, y, w, h]", where)
        if image_id not in images:
            raise DanglingReferenceError(f"annotation {ann_id} references missing image {image_id}", where)
        x, y, w, h = map(float, bbox)
        if w < 0 or h < 0:
            raise NegativeExtentError(f"bbox has negative extent w={w}, h={h}", where)
        annotations.append(AnnotationRecord(ann_id, image_id, category_id, Box.from_xywh(x, y, w, h)))
    return DatasetRecord(images, annotations, categories)


def load_dataset(path: PathLike) -> DatasetRecord:
    """Load a COCO-style instance file (images, annotations, categories)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from exc
    return parse_dataset(doc, str(path))


# -- assignments -----------------------------------------------------------


def _target_rows(targets: Iterable[LocationTarget]) -> Iterable[list[str]]:
    for t in targets:
        matched = t.gt_index is not None
        d = t.ltrb if t.ltrb is not None else ("", "", "", "")
        yield [
            str(t.level), str(t.row), str(t.col), fmt(t.x), fmt(t.y),
            str(t.gt_index) if matched else "",
            str(t.cls) if t.cls is not None else "",
            fmt(t.head_s), fmt(t.centerness_s), fmt(t.label_s), fmt(t.label_d),
            *(fmt(v) if v != "" else "" for v in d),
            str(t.candidates),
        ]


def write_assignments(path: PathLike, targets: Union[AssignmentTable, Iterable[LocationTarget]]) -> None:
    if isinstance(targets, AssignmentTable):
        targets = targets.records()
    atomic_write(path, _csv_text(ASSIGNMENT_COLUMNS, _target_rows(targets)))


def read_assignments(path: PathLike) -> list[LocationTarget]:
    """Read an assignments table; the trailing ``candidates`` column is optional."""
    header, rows = _read_csv(path)
    required = list(ASSIGNMENT_COLUMNS[:-1])
    if header[: len(required)] != required:
        raise TableFormatError(f"{path}: unexpected assignment header {header}")
    has_candidates = len(header) > len(required) and header[len(required)] == "candidates"
    out = []
    for n, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise TableFormatError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
        rec = dict(zip(header, row))
        try:
            ltrb = None
            if rec["l"] != "":
                ltrb = LtrbDistances(float(rec["l"]), float(rec["t"]), float(rec["r"]), float(rec["b"]))
            out.append(LocationTarget(
                level=int(rec["level"]), row=int(rec["row"]), col=int(rec["col"]),
                x=float(rec["img_x"]), y=float(rec["img_y"]),
                gt_index=int(rec["gt_index"]) if rec["gt_index"] != "" else None,
                cls=int(rec["class"]) if rec["class"] != "" else None,
                head_s=float(rec["head_s"]), centerness_s=float(rec["centerness_s"]),
                label_s=float(rec["label_s"]), label_d=float(rec["label_d"]),
                ltrb=ltrb,
                candidates=int(rec["candidates"]) if has_candidates else 0,
            ))
        except ValueError as exc:
            raise TableFormatError(f"{path}:{n}: {exc}") from exc
    return out


# -- detections ------------------------------------------------------------


def write_detections(
    path: PathLike, detections: Sequence[Detection], quality: Optional[Sequence[float]] = None
) -> None:
    header = list(DETECTION_COLUMNS) + (["quality"] if quality is not None else [])
    rows = []
    for i, d in enumerate(detections):
        row = [str(d.cls), fmt(d.score), *map(fmt, d.box.as_tuple()), str(d.level), str(d.row), str(d.col)]
        if quality is not None:
            row.append(fmt(quality[i]))
        rows.append(row)
    atomic_write(path, _csv_text(header, rows))


def read_detections(path: PathLike) -> tuple[list[Detection], Optional[list[float]]]:
    """Detections plus the optional ``quality`` column (``None`` when absent)."""
    header, rows = _read_csv(path)
    if header[: len(DETECTION_COLUMNS)] != list(DETECTION_COLUMNS):
        raise TableFormatError(f"{path}: unexpected detection header {header}")
    has_quality = "quality" in header[len(DETECTION_COLUMNS):]
    dets, qualities = [], []
    for n, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise TableFormatError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
        rec = dict(zip(header, row))
        try:
            box = Box(float(rec["x1"]), float(rec["y1"]), float(rec["x2"]), float(rec["y2"]))
            dets.append(Detection(box, int(rec["class"]), float(rec["score"]),
                                  int(rec["level"]), int(rec["row"]), int(rec["col"])))
            if has_quality:
                qualities.append(float(rec["quality"]))
        except ValueError as exc:
            raise TableFormatError(f"{path}:{n}: {exc}") from exc
    return dets, (qualities if has_quality else None)


# -- curves, heatmaps, reports ---------------------------------------------


def write_curves(path: PathLike, points: Sequence[GPoint], y_values: Sequence[float]) -> None:
    header = ["p", "g_a", "g_b"] + [f"g_gfl_y={y:g}" for y in y_values]
    rows = [[fmt(pt.p), fmt(pt.g_a), fmt(pt.g_b), *map(fmt, pt.g_gfl)] for pt in points]
    atomic_write(path, _csv_text(header, rows))


def read_curves(path: PathLike) -> tuple[list[str], np.ndarray]:
    header, rows = _read_csv(path)
    return header, np.array([[float(v) for v in row] for row in rows], dtype=float).reshape(-1, len(header))


def heatmap_bytes(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise ValueError("heatmap grid must be two-dimensional")
    if np.any(~((grid >= 0) & (grid <= 1))):
        raise ValueError("heatmap values must lie in [0, 1]")
    rows, cols = grid.shape
    # round half away from zero, unlike np.round's banker's rounding
    pixels = np.floor(255.0 * grid + 0.5).astype(np.uint8)
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def write_heatmap(path: PathLike, grid: np.ndarray) -> None:
    atomic_write(path, heatmap_bytes(grid))


def read_heatmap(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5":
        raise TableFormatError(f"{path}: not a binary PGM")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise TableFormatError(f"{path}: expected max value 255, got {maxval}")
    pixels = data[len(data) - rows * cols:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(rows, cols)


def _nan_to_none(x: float) -> Optional[float]:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def report_json(report: RunReport) -> str:
    doc = asdict(report)
    for key in ("final_loss", "boundary_gap", "ranking_correlation"):
        doc[key] = _nan_to_none(doc[key])
    doc["mean_conflict"] = _nan_to_none(report.mean_conflict)
    return json.dumps(doc, indent=2) + "\n"


def write_report(path: PathLike, report: RunReport) -> None:
    atomic_write(path, report_json(report))


def read_report(path: PathLike) -> RunReport:
    with open(path) as fh:
        doc = json.load(fh)
    doc.pop("mean_conflict", None)
    for key in ("final_loss", "boundary_gap", "ranking_correlation"):
        if doc.get(key) is None:
            doc[key] = math.nan
    return RunReport(**doc)


def write_trace(path: PathLike, report: RunReport) -> None:
    rows = [[str(i), fmt(loss), fmt(c)] for i, (loss, c) in enumerate(zip(report.loss_trace, report.conflict_trace))]
    atomic_write(path, _csv_text(["iteration", "loss", "conflict"], rows))


# -- config ----------------------------------------------------------------


@dataclass(frozen=True)
class SimulatorSettings:
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    modes: tuple[str, ...] = TRAIN_MODES


@dataclass(frozen=True)
class Config:
    assigner: AssignerConfig = field(default_factory=AssignerConfig)
    loss: LossParams = field(default_factory=LossParams)
    nms: NmsConfig = field(default_factory=NmsConfig)
    rank_mode: str = "dsla"
    simulator: SimulatorSettings = field(default_factory=SimulatorSettings)

    def with_seed(self, seed: int) -> "Config":
        sim = self.simulator
        return replace(self, simulator=replace(
            sim, scene=replace(sim.scene, seed=seed), train=replace(sim.train, seed=seed)))


def _expect(value: Any, kind, path: str) -> Any:
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(path, f"expected {kind.__name__ if isinstance(kind, type) else 'number'}, got bool")
    if kind is float:
        if not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {type(value).__name__}")
        return float(value)
    if not isinstance(value, kind):
        raise ConfigError(path, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _boundary(value: Any, path: str) -> float:
    if value is None or value == "inf":
        return math.inf
    return _expect(value, float, path)


def _build(cls, defaults, section: dict, path: str, types: dict[str, Any]):
    """Construct ``cls`` from ``defaults`` overridden by ``section``.

    When the combined overrides are invalid, each one is retried on its own
    so the error can point at the offending field where possible.
    """
    if not isinstance(section, dict):
        raise ConfigError(path, "expected an object")
    known = {f.name for f in fields(cls)}
    values = {}
    for key, raw in section.items():
        if key not in known or key not in types:
            raise ConfigError(f"{path}.{key}", "unknown field")
        values[key] = types[key](raw, f"{path}.{key}")
    try:
        return replace(defaults, **values)
    except ValueError as exc:
        for key, value in values.items():
            try:
                replace(defaults, **{key: value})
            except ValueError as single:
                raise ConfigError(f"{path}.{key}", str(single)) from exc
        raise ConfigError(path, str(exc)) from exc


def _of(kind):
    return lambda v, p: _expect(v, kind, p)


def _list_of(convert):
    def parse(v, p):
        _expect(v, list, p)
        return tuple(convert(item, f"{p}[{i}]") for i, item in enumerate(v))
    return parse


def _pair_of(convert):
    def parse(v, p):
        items = _list_of(convert)(v, p)
        if len(items) != 2:
            raise ConfigError(p, "expected two values")
        return items
    return parse


_ASSIGNER_TYPES = {
    "strides": _list_of(_of(int)),
    "ranges": _list_of(_boundary),
    "kappa": _of(float),
    "mode": _of(str),
    "core_zone": _of(bool),
    "ramp": _of(str),
}
_LOSS_TYPES = {k: _of(float) for k in ("alpha", "gamma", "beta", "lambda1", "lambda2")}
_NMS_TYPES = {
    "iou_threshold": _of(float),
    "score_threshold": _of(float),
    "max_pre": _of(int),
    "max_post": _of(int),
    "class_agnostic": _of(bool),
}
_SCENE_TYPES = {
    "width": _of(int),
    "height": _of(int),
    "num_rects": _of(int),
    "size_range": _pair_of(_of(int)),
    "intensity_range": _pair_of(_of(float)),
    "noise": _of(float),
}
_TRAIN_TYPES = {
    "learning_rate": _of(float),
    "iterations": _of(int),
    "patch_radius": _of(int),
    "prior_prob": _of(float),
    "init_scale": _of(float),
}


def parse_config(doc: Any) -> Config:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    unknown = set(doc) - {"assigner", "loss", "nms", "simulator"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")

    assigner = _build(AssignerConfig, AssignerConfig(), doc.get("assigner", {}), "assigner", _ASSIGNER_TYPES)
    loss = _build(LossParams, LossParams(), doc.get("loss", {}), "loss", _LOSS_TYPES)

    nms_doc = dict(_expect(doc.get("nms", {}), dict, "nms"))
    rank_mode = nms_doc.pop("mode", "dsla")
    if rank_mode not in ("dsla", "fcos"):
        raise ConfigError("nms.mode", f"must be 'dsla' or 'fcos', got {rank_mode!r}")
    nms = _build(NmsConfig, NmsConfig(), nms_doc, "nms", _NMS_TYPES)

    sim_doc = dict(_expect(doc.get("simulator", {}), dict, "simulator"))
    scene_doc = sim_doc.pop("scene", {})
    modes = sim_doc.pop("modes", list(TRAIN_MODES))
    seed = sim_doc.pop("seed", None)
    modes = _list_of(_of(str))(modes, "simulator.modes")
    for i, m in enumerate(modes):
        if m not in TRAIN_MODES:
            raise ConfigError(f"simulator.modes[{i}]", f"must be one of {TRAIN_MODES}, got {m!r}")
    scene = _build(SceneSpec, SceneSpec(), scene_doc, "simulator.scene", _SCENE_TYPES)
    train = _build(TrainConfig, TrainConfig(), sim_doc, "simulator", _TRAIN_TYPES)
    train = replace(train, loss=loss, assigner=assigner)
    config = Config(assigner, loss, nms, rank_mode, SimulatorSettings(scene, train, modes))
    if seed is not None:
        config = config.with_seed(_expect(seed, int, "simulator.seed"))
    return config


def load_config(path: Optional[PathLike]) -> Config:
    """Load a JSON config; ``None`` or an empty document yields all defaults."""
    if path is None:
        return Config()
    text = Path(path).read_text()
    if not text.strip():
        return Config()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from exc
    return parse_config(doc)
