"""Command-line entry points for every pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data/parse error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats
from .citymodel import CityModelError, raycast_sdm
from .dataset import (
    gen_dataset,
    load_dataset,
    load_experiment_config,
    stage_seed,
    write_demo_scene,
)
from .detect import detect_train, infer_confmaps
from .evaluate import evaluate, ols_sweep, sweep_to_csv
from .nn import TrainingDivergedError, pretext_train
from .pipeline import run_pipeline, run_pretext, split_frames
from .postproc import l_nms
from .waveform import WaveformConfig, derive_radar_params, load_waveform

USAGE_ERROR = 1
DATA_ERROR = 2
NUMERIC_ERROR = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(USAGE_ERROR) from None


def _build_parser() -> _Parser:
    parser = _Parser(prog="radpipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="derive radar parameters from a waveform")
    p.add_argument("--config", help="waveform JSON (defaults built in)")
    p.add_argument("--format", choices=["json", "csv"], default="json")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--demo", action="store_true",
                   help="write the demo scene + config into --out first")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("ramap", help="convert a radar cube to a range-azimuth map")
    p.add_argument("cube")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["fmap", "pgm"], default="fmap")

    p = sub.add_parser("sdm", help="raycast a semantic-depth map for one pose")
    p.add_argument("--config", required=True)
    p.add_argument("--pose", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="contrastive pretraining on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train the downstream detector")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pretext", required=True, help="pretrain output directory")
    p.add_argument("--use-sdm", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("infer", help="run inference over the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("nms", help="confidence maps to detection lists")
    p.add_argument("--config", required=True)
    p.add_argument("--confmaps", required=True, help="directory of *.fmap maps")
    p.add_argument("--out", required=True)
    p.add_argument("--peak", type=float)
    p.add_argument("--ols", type=float)

    p = sub.add_parser("eval", help="evaluate detections against ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["json", "csv"], default="json")

    p = sub.add_parser("sweep", help="sweep the NMS suppression threshold")
    p.add_argument("--config", required=True)
    p.add_argument("--confmaps", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--values", default="0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--peak", type=float)

    p = sub.add_parser("render", help="render an FMAP file to PGM/PPM")
    p.add_argument("fmap")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["pgm", "ppm"], default="pgm")
    p.add_argument("--channel", type=int, default=0)

    p = sub.add_parser("run", help="full pipeline: gen, pretrain, paired training, eval")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated training seeds")
    return parser


def _cmd_params(args) -> int:
    cfg = load_waveform(args.config) if args.config else WaveformConfig()
    params = derive_radar_params(cfg)
    if args.format == "csv":
        print("range_resolution_m,unambiguous_range_m,n_virtual,"
              "angular_resolution_deg,wavelength_m")
        print(f"{params.range_resolution},{params.unambiguous_range},"
              f"{params.n_virtual},{params.angular_resolution},{params.wavelength}")
    else:
        print(json.dumps({
            "range_resolution_m": params.range_resolution,
            "unambiguous_range_m": params.unambiguous_range,
            "n_virtual": params.n_virtual,
            "angular_resolution_deg": params.angular_resolution,
            "wavelength_m": params.wavelength,
        }, indent=1))
    return 0


def _load_config(args):
    cfg = load_experiment_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_gen(args) -> int:
    if args.demo:
        _, config_path = write_demo_scene(args.out)
        args.config = str(config_path)
    elif not args.config:
        print("gen: --config or --demo is required", file=sys.stderr)
        return USAGE_ERROR
    cfg = _load_config(args)
    out = gen_dataset(cfg, Path(args.out) / "dataset")
    print(f"dataset written to {out}")
    return 0


def _cmd_ramap(args) -> int:
    from .ramap import cube_to_ra_map

    cfg = _load_config(args)
    cube = formats.read_rdc1(args.cube, cfg.waveform)
    ra = cube_to_ra_map(cube, cfg.n_range_bins, cfg.n_azimuth_bins,
                        frame_id=Path(args.cube).stem)
    if args.format == "pgm":
        formats.write_pgm(args.out, ra.grid)
    else:
        formats.save_ramap(args.out, ra)
    print(f"map written to {args.out}")
    return 0


def _cmd_sdm(args) -> int:
    from .citymodel import parse_city_model

    cfg = _load_config(args)
    document = Path(cfg.scene.city_model).read_bytes()
    fmt = "json" if cfg.scene.city_model.endswith(".json") else "gml_lite"
    model = parse_city_model(document, fmt)
    if not 0 <= args.pose < len(cfg.scene.poses):
        print(f"sdm: pose index {args.pose} outside 0..{len(cfg.scene.poses) - 1}",
              file=sys.stderr)
        return USAGE_ERROR
    sdm = raycast_sdm(model, cfg.scene.poses[args.pose], cfg.camera,
                      cfg.sdm_max_range)
    formats.save_sdm(args.out, sdm)
    print(f"semantic-depth map written to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    records = load_dataset(args.data)
    result = run_pretext(cfg, records)
    formats.save_pretext(args.out, result)
    print(f"pretext loss {result.history[0]:.4f} -> {result.history[-1]:.4f}; "
          f"weights in {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    records = load_dataset(args.data)
    pretext = formats.load_pretext(args.pretext)
    train, _ = split_frames(records, cfg.train_fraction, cfg.seed)
    det_cfg = replace(cfg.detect, seed=stage_seed(cfg.seed, f"detect:{args.use_sdm}"),
                      sigma_scale=cfg.sigma_scale, pool_shape=cfg.ssl.pool_shape)
    dataset = [(r.ra, r.sdm if args.use_sdm else None, r.annotations) for r in train]
    model, history = detect_train(dataset, pretext.radar_encoder, args.use_sdm,
                                  det_cfg, cfg.kappa)
    formats.save_detector(args.out, model)
    print(f"detection loss {history[0]:.1f} -> {history[-1]:.1f}; "
          f"model in {args.out}")
    return 0


def _cmd_infer(args) -> int:
    cfg = _load_config(args)
    records = load_dataset(args.data)
    model = formats.load_detector(args.model)
    _, test = split_frames(records, cfg.train_fraction, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec in test:
        cm = infer_confmaps(model, rec.ra, rec.sdm if model.use_sdm else None)
        formats.save_confmaps(out / f"{rec.frame_id}.fmap", cm, rec.frame_id,
                              (rec.ra.range_axis, rec.ra.azimuth_axis))
    print(f"{len(test)} confidence maps written to {out}")
    return 0


def _iter_confmap_files(directory):
    files = sorted(Path(directory).glob("*.fmap"))
    if not files:
        raise formats.FormatError(f"no *.fmap files in {directory}")
    return files


def _cmd_nms(args) -> int:
    cfg = _load_config(args)
    peak = args.peak if args.peak is not None else cfg.peak_threshold
    ols_thr = args.ols if args.ols is not None else cfg.ols_threshold
    detections = []
    for path in _iter_confmap_files(args.confmaps):
        cm, frame_id, axes = formats.load_confmaps(path)
        for det in l_nms(cm, peak, ols_thr, cfg.kappa, axes):
            detections.append((frame_id, det))
    formats.write_detections(args.out, detections)
    print(f"{len(detections)} detections written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    dets = formats.read_detections(args.dets)
    gts = formats.read_annotations(args.gt)
    frame_ids = sorted({f for f, _ in dets} | {g.frame_id for g in gts})
    frames = []
    for fid in frame_ids:
        frames.append((
            [d for f, d in dets if f == fid],
            [g for g in gts if g.frame_id == fid],
        ))
    report = evaluate(frames, cfg.kappa)
    if args.format == "csv":
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    else:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
    print(f"mAP {report.map:.4f}  mAR {report.mar:.4f}  ({args.out})")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    peak = args.peak if args.peak is not None else cfg.peak_threshold
    gts = formats.read_annotations(args.gt)
    confmaps, gts_per_frame, axes = [], [], None
    for path in _iter_confmap_files(args.confmaps):
        cm, frame_id, axes = formats.load_confmaps(path)
        confmaps.append(cm)
        gts_per_frame.append([g for g in gts if g.frame_id == frame_id])
    rows = ols_sweep(confmaps, gts_per_frame, values, cfg.kappa, axes, peak)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_to_csv(rows), encoding="utf-8")
    plot = formats.render_line_plot({
        "map": [(v, m) for v, m, _ in rows],
        "mar": [(v, r) for v, _, r in rows],
    })
    formats.write_ppm(out / "sweep.ppm", plot)
    print(f"sweep table and plot written to {out}")
    return 0


def _cmd_render(args) -> int:
    data, _ = formats.read_fmap(args.fmap)
    if args.format == "ppm":
        if data.shape[0] >= 3:
            rgb = np.transpose(data[:3], (1, 2, 0))
        else:
            rgb = np.repeat(np.transpose(data[:1], (1, 2, 0)), 3, axis=2)
        formats.write_ppm(args.out, rgb)
    else:
        if not 0 <= args.channel < data.shape[0]:
            print(f"render: channel {args.channel} outside 0..{data.shape[0] - 1}",
                  file=sys.stderr)
            return USAGE_ERROR
        formats.write_pgm(args.out, data[args.channel])
    print(f"image written to {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    seeds = None
    if args.seeds:
        seeds = [int(v) for v in args.seeds.split(",") if v.strip()]
    result = run_pipeline(cfg, args.out, seeds=seeds)
    summary = result.summary()
    print(json.dumps(summary, indent=1))
    return 0


_COMMANDS = {
    "params": _cmd_params,
    "gen": _cmd_gen,
    "ramap": _cmd_ramap,
    "sdm": _cmd_sdm,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "nms": _cmd_nms,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "render": _cmd_render,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_ERROR
    try:
        return _COMMANDS[args.command](args)
    except TrainingDivergedError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except (CityModelError, formats.FormatError, FileNotFoundError,
            json.JSONDecodeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
