"""End-to-end orchestration: dataset -> contrastive pretraining -> paired
downstream trainings (with and without semantic-depth fusion) -> inference,
NMS, evaluation, and a with/without difference summary."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import formats
from .dataset import (
    ExperimentConfig,
    FrameRecord,
    gen_dataset,
    load_dataset,
    stage_seed,
)
from .detect import DetectorModel, detect_train, infer_confmaps
from .evaluate import EvalReport, evaluate
from .nn import PretextResult, pretext_train
from .postproc import l_nms


@dataclass
class SeedOutcome:
    seed: int
    report_without: EvalReport
    report_with: EvalReport
    loss_without: list[float]
    loss_with: list[float]


@dataclass
class PipelineResult:
    outcomes: list[SeedOutcome]
    pretext_history: list[float]
    test_frame_ids: list[str]
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def median_map_without(self) -> float:
        return float(np.median([o.report_without.map for o in self.outcomes]))

    @property
    def median_map_with(self) -> float:
        return float(np.median([o.report_with.map for o in self.outcomes]))

    def summary(self) -> dict:
        rows = [
            {
                "seed": o.seed,
                "map_without": o.report_without.map,
                "mar_without": o.report_without.mar,
                "map_with": o.report_with.map,
                "mar_with": o.report_with.mar,
                "map_gain": o.report_with.map - o.report_without.map,
            }
            for o in self.outcomes
        ]
        return {
            "per_seed": rows,
            "median_map_without": self.median_map_without,
            "median_map_with": self.median_map_with,
            "median_map_gain": self.median_map_with - self.median_map_without,
            "pretext_loss_first": self.pretext_history[0] if self.pretext_history else None,
            "pretext_loss_last": self.pretext_history[-1] if self.pretext_history else None,
            "timings_s": self.timings,
        }


def split_frames(records: list[FrameRecord], train_fraction: float, seed: int
                 ) -> tuple[list[FrameRecord], list[FrameRecord]]:
    """Deterministic shuffled train/test split shared by paired runs."""
    rng = np.random.default_rng(stage_seed(seed, "split"))
    order = rng.permutation(len(records))
    n_train = int(round(train_fraction * len(records)))
    train = [records[k] for k in order[:n_train]]
    test = [records[k] for k in order[n_train:]]
    return train, test


def run_pretext(cfg: ExperimentConfig, records: list[FrameRecord]) -> PretextResult:
    pairs = [(rec.ra.grid, rec.proxy) for rec in records]
    ssl_cfg = replace(cfg.ssl, seed=stage_seed(cfg.seed, "pretext"),
                      pool_shape=cfg.ssl.pool_shape)
    return pretext_train(pairs, ssl_cfg)


def train_and_eval(
    cfg: ExperimentConfig,
    pretext: PretextResult,
    train: list[FrameRecord],
    test: list[FrameRecord],
    use_sdm: bool,
    seed: int,
) -> tuple[DetectorModel, list[float], EvalReport, list]:
    """One downstream training plus evaluation on the test split."""
    det_cfg = replace(
        cfg.detect,
        seed=stage_seed(seed, f"detect:{use_sdm}"),
        sigma_scale=cfg.sigma_scale,
        pool_shape=cfg.ssl.pool_shape,
    )
    dataset = [
        (rec.ra, rec.sdm if use_sdm else None, rec.annotations) for rec in train
    ]
    model, history = detect_train(dataset, pretext.radar_encoder, use_sdm,
                                  det_cfg, cfg.kappa)

    axes = (test[0].ra.range_axis, test[0].ra.azimuth_axis)
    frames = []
    confmaps = []
    for rec in test:
        cm = infer_confmaps(model, rec.ra, rec.sdm if use_sdm else None)
        confmaps.append(cm)
        dets = l_nms(cm, cfg.peak_threshold, cfg.ols_threshold, cfg.kappa, axes)
        frames.append((dets, rec.annotations))
    report = evaluate(frames, cfg.kappa)
    return model, history, report, confmaps


def run_pipeline(
    cfg: ExperimentConfig,
    out_dir,
    seeds: list[int] | None = None,
    write_outputs: bool = True,
) -> PipelineResult:
    """Drive the whole pipeline; dataset and pretext run once, the paired
    downstream trainings repeat per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = seeds or [cfg.seed]
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    data_dir = out / "dataset"
    if not (data_dir / "manifest.json").exists():
        gen_dataset(cfg, data_dir)
    records = load_dataset(data_dir)
    timings["dataset"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pretext = run_pretext(cfg, records)
    timings["pretext"] = time.perf_counter() - t0

    train, test = split_frames(records, cfg.train_fraction, cfg.seed)

    outcomes = []
    diff_written = False
    t0 = time.perf_counter()
    for seed in seeds:
        _, hist_wo, report_wo, cms_wo = train_and_eval(
            cfg, pretext, train, test, use_sdm=False, seed=seed)
        _, hist_w, report_w, cms_w = train_and_eval(
            cfg, pretext, train, test, use_sdm=True, seed=seed)
        outcomes.append(SeedOutcome(
            seed=seed, report_without=report_wo, report_with=report_w,
            loss_without=hist_wo, loss_with=hist_w,
        ))
        if write_outputs and not diff_written:
            _write_diff_maps(out, test, cms_wo, cms_w)
            diff_written = True
    timings["downstream"] = time.perf_counter() - t0

    result = PipelineResult(
        outcomes=outcomes,
        pretext_history=pretext.history,
        test_frame_ids=[rec.frame_id for rec in test],
        timings=timings,
    )
    if write_outputs:
        (out / "summary.json").write_text(
            json.dumps(result.summary(), indent=1) + "\n", encoding="utf-8")
        last = outcomes[-1]
        (out / "report_without_sdm.json").write_text(
            json.dumps(last.report_without.to_dict(), indent=1) + "\n",
            encoding="utf-8")
        (out / "report_with_sdm.json").write_text(
            json.dumps(last.report_with.to_dict(), indent=1) + "\n",
            encoding="utf-8")
        (out / "report_without_sdm.csv").write_text(
            last.report_without.to_csv(), encoding="utf-8")
        (out / "report_with_sdm.csv").write_text(
            last.report_with.to_csv(), encoding="utf-8")
    return result


def _write_diff_maps(out: Path, test: list[FrameRecord], cms_wo, cms_w,
                     limit: int = 4) -> None:
    """Per-class |with - without| confidence differences as RGB images."""
    diff_dir = out / "diff_maps"
    diff_dir.mkdir(exist_ok=True)
    for rec, a, b in list(zip(test, cms_wo, cms_w))[:limit]:
        diff = np.abs(b.grid - a.grid)  # (3, R, A) -> RGB channels
        rgb = np.transpose(diff, (1, 2, 0))
        formats.write_ppm(diff_dir / f"{rec.frame_id}_diff.ppm", rgb)
