"""Command-line entry point: ``dsla {assign,curves,simulate,nms,stats}``.

Exit codes: 0 on success, 1 when a computation fails (e.g. a diverged
simulation), 2 for usage and input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dsla import dataio
from dsla.assigner import MODES, assign_all
from dsla.inference import nms_indices, rank_score
from dsla.losses import gpart_curves
from dsla.simulator import TRAIN_MODES, TrainingDiverged, make_scene, train

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
HIST_BINS = 20


class UsageError(Exception):
    pass


def _check_outputs(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {existing[0]} (use --force)")


def _require_file(path: Optional[str], what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _config(args) -> dataio.Config:
    if args.config is not None:
        _require_file(args.config, "config")
    config = dataio.load_config(args.config)
    seed = getattr(args, "seed", None)
    return config.with_seed(seed) if seed is not None else config


# -- subcommands -----------------------------------------------------------


def cmd_assign(args) -> int:
    dataset = dataio.load_dataset(_require_file(args.dataset, "dataset"))
    config = _config(args)
    assigner = replace(config.assigner, mode=args.mode) if args.mode else config.assigner
    out = Path(args.out)

    planned = []
    for image in sorted(dataset.images.values(), key=lambda im: im.id):
        table = assign_all(dataset.boxes_for(image.id), (image.width, image.height), assigner)
        planned.append((image, table))
    paths = [out / f"assignments_{im.id}.csv" for im, _ in planned]
    if args.heatmaps:
        paths += [out / f"label_s_{im.id}_level{lv.index}.pgm" for im, t in planned for lv in t.levels]
    _check_outputs(paths, args.force)

    for image, table in planned:
        dataio.write_assignments(out / f"assignments_{image.id}.csv", table)
        if args.heatmaps:
            for lv in table.levels:
                dataio.write_heatmap(out / f"label_s_{image.id}_level{lv.index}.pgm", table.level_grid(lv.index))
    print(f"wrote assignments for {len(planned)} image(s) to {out}")
    return EXIT_OK


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}")


def cmd_curves(args) -> int:
    config = _config(args)
    y_values = _parse_floats(args.y)
    if not y_values or any(not 0.0 <= y <= 1.0 for y in y_values):
        raise UsageError("--y values must lie in [0, 1]")
    out = Path(args.out)
    _check_outputs([out], args.force)
    points = gpart_curves(None, config.loss, y_values)
    dataio.write_curves(out, points, y_values)
    print(f"wrote {len(points)} rows to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _config(args)
    sim = config.simulator
    train_cfg = sim.train
    if args.iterations is not None:
        if args.iterations < 0:
            raise UsageError("--iterations must be >= 0")
        train_cfg = replace(train_cfg, iterations=args.iterations)
    modes = args.modes.split(",") if args.modes else list(sim.modes)
    for m in modes:
        if m not in TRAIN_MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {', '.join(TRAIN_MODES)}")
    out = Path(args.out)
    paths = [out / "summary.json"]
    for m in modes:
        paths += [out / f"report_{m}.json", out / f"trace_{m}.csv"]
    _check_outputs(paths, args.force)

    scene = make_scene(sim.scene)
    summary = {"seed": train_cfg.seed, "iterations": train_cfg.iterations, "modes": {}}
    failed = False
    for m in modes:
        try:
            report = train(scene, replace(train_cfg, mode=m))
        except TrainingDiverged as exc:
            failed = True
            summary["modes"][m] = {"status": "diverged", "error": str(exc)}
            print(f"{m}: diverged ({exc})", file=sys.stderr)
            continue
        dataio.write_report(out / f"report_{m}.json", report)
        dataio.write_trace(out / f"trace_{m}.csv", report)
        doc = json.loads(dataio.report_json(report))
        summary["modes"][m] = {
            "status": "ok",
            **{k: doc[k] for k in ("final_loss", "boundary_gap", "ranking_correlation", "mean_conflict")},
        }
    dataio.atomic_write(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    for m, row in summary["modes"].items():
        if row["status"] == "ok":
            print(f"{m}: boundary_gap={row['boundary_gap']} ranking_correlation={row['ranking_correlation']} "
                  f"mean_conflict={row['mean_conflict']}")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_nms(args) -> int:
    detections, quality = dataio.read_detections(_require_file(args.detections, "detections"))
    config = _config(args)
    mode = args.mode or config.rank_mode
    if mode == "fcos" and quality is None:
        raise UsageError("--mode fcos needs a 'quality' column in the detections file")
    out = Path(args.out)
    _check_outputs([out], args.force)
    scores = [rank_score(d.score, quality[i] if quality else None, mode) for i, d in enumerate(detections)]
    nms = config.nms
    if args.iou_threshold is not None:
        try:
            nms = replace(nms, iou_threshold=args.iou_threshold)
        except ValueError as exc:
            raise UsageError(str(exc))
    keep = nms_indices(
        np.array([d.box.as_tuple() for d in detections], dtype=float).reshape(-1, 4),
        np.array(scores, dtype=float),
        np.array([d.cls for d in detections]),
        nms.iou_threshold, nms.score_threshold, nms.max_pre, nms.max_post, nms.class_agnostic,
    )
    kept = [detections[i] for i in keep]
    dataio.write_detections(out, kept, [quality[i] for i in keep] if quality is not None else None)
    print(f"kept {len(kept)} suppressed {len(detections) - len(kept)}")
    return EXIT_OK


def assignment_stats(targets: Sequence) -> dict:
    labels = np.array([t.label_s for t in targets], dtype=float)
    positive = labels > 0
    per_level: dict[str, int] = {}
    for t in targets:
        per_level.setdefault(str(t.level), 0)
        if t.label_s > 0:
            per_level[str(t.level)] += 1
    counts, edges = np.histogram(labels[positive], bins=HIST_BINS, range=(0.0, 1.0))
    return {
        "locations": len(targets),
        "positives": int(positive.sum()),
        "positives_per_level": per_level,
        "ambiguous": sum(1 for t in targets if t.label_s > 0 and t.candidates > 1),
        "label_s_histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
    }


def cmd_stats(args) -> int:
    targets = dataio.read_assignments(_require_file(args.assignments, "assignments"))
    text = json.dumps(assignment_stats(targets), indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        _check_outputs([out], args.force)
        dataio.atomic_write(out, text)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsla", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--config", help="JSON config with assigner/loss/nms/simulator sections")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if seed:
            p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("assign", help="compute per-location targets for every image of a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--heatmaps", action="store_true", help="also write label_s grids as PGM")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("curves", help="tabulate focal and GFL G-parts")
    common(p)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--y", default="0.5", help="comma-separated GFL targets")
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("simulate", help="train the toy predictor under each supervision mode")
    common(p, seed=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--modes", help="comma-separated subset of " + ",".join(TRAIN_MODES))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("nms", help="greedy NMS over a detections CSV")
    common(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--mode", choices=("dsla", "fcos"))
    p.add_argument("--iou-threshold", type=float)
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("stats", help="summarise an assignments CSV")
    p.add_argument("--assignments", required=True)
    p.add_argument("--out", help="also write the summary JSON here")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, dataio.DatasetError, dataio.ConfigError, dataio.TableFormatError) as exc:
        print(f"dsla {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dsla {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError) as exc:
        print(f"dsla {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
