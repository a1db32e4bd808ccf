"""Detection-vs-ground-truth matching and AP/AR aggregation over a range of
location-similarity thresholds."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .detect import CLASS_ORDER, GtAnnotation, KappaTable
from .postproc import Detection, cart_distance, ols

# matching thresholds: 0.5 to 0.9 in steps of 0.05 (9 values)
DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(9))


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    assignment: list[tuple[int, int]]  # (detection index, gt index)


def match_frame(
    dets: list[Detection],
    gts: list[GtAnnotation],
    ols_threshold: float,
    kappa: KappaTable,
) -> MatchResult:
    """Greedy matching for one frame.

    Detections are visited in descending confidence; each claims the
    unclaimed same-class ground truth with the highest location similarity,
    provided it reaches ols_threshold (s is the ground truth's range).
    """
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].confidence, k))
    claimed = [False] * len(gts)
    assignment = []
    for di in order:
        det = dets[di]
        best_gt, best_sim = -1, -1.0
        for gi, gt in enumerate(gts):
            if claimed[gi] or gt.class_label != det.class_label:
                continue
            d = cart_distance(det.range_m, det.azimuth_rad, gt.range_m, gt.azimuth_rad)
            sim = ols(d, gt.range_m, kappa.for_class(gt.class_label))
            if sim > best_sim:
                best_gt, best_sim = gi, sim
        if best_gt >= 0 and best_sim >= ols_threshold:
            claimed[best_gt] = True
            assignment.append((di, best_gt))
    tp = len(assignment)
    return MatchResult(tp=tp, fp=len(dets) - tp, fn=len(gts) - tp,
                       assignment=assignment)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    """num/den with the vacuous 0/0 case defined as 1.0 (flagged)."""
    if den == 0:
        return 1.0, True
    return num / den, False


@dataclass
class EvalReport:
    """AP/AR per threshold with per-class breakdown, plus their means."""

    per_threshold: dict[float, dict] = field(default_factory=dict)
    map: float = 0.0
    mar: float = 0.0
    vacuous: bool = False  # some ratio hit the 0/0 -> 1.0 convention

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "mar": self.mar,
            "vacuous": self.vacuous,
            "per_threshold": {str(t): row for t, row in self.per_threshold.items()},
        }

    def to_csv(self) -> str:
        lines = ["threshold,ap,ar,tp,fp,fn"]
        for t, row in sorted(self.per_threshold.items()):
            tp, fp, fn = row["counts"]
            lines.append(f"{t},{row['ap']:.6f},{row['ar']:.6f},{tp},{fp},{fn}")
        lines.append(f"mean,{self.map:.6f},{self.mar:.6f},,,")
        return "\n".join(lines) + "\n"


def evaluate(
    frames: list[tuple[list[Detection], list[GtAnnotation]]],
    kappa: KappaTable,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Accumulate TP/FP/FN over frames per threshold; AP = TP/(TP+FP) and
    AR = TP/(TP+FN), pooled over classes, averaged over thresholds."""
    report = EvalReport()
    aps, ars = [], []
    for t in thresholds:
        tp = fp = fn = 0
        per_class = {c: [0, 0, 0] for c in CLASS_ORDER}
        for dets, gts in frames:
            res = match_frame(dets, gts, t, kappa)
            tp += res.tp
            fp += res.fp
            fn += res.fn
            matched_dets = {di for di, _ in res.assignment}
            matched_gts = {gi for _, gi in res.assignment}
            for di, det in enumerate(dets):
                per_class[det.class_label][0 if di in matched_dets else 1] += 1
            for gi, gt in enumerate(gts):
                if gi not in matched_gts:
                    per_class[gt.class_label][2] += 1
        ap, vac_p = _ratio(tp, tp + fp)
        ar, vac_r = _ratio(tp, tp + fn)
        report.vacuous |= vac_p or vac_r
        class_rows = {}
        for c, (ctp, cfp, cfn) in per_class.items():
            cap, v1 = _ratio(ctp, ctp + cfp)
            car, v2 = _ratio(ctp, ctp + cfn)
            class_rows[c] = {"ap": cap, "ar": car, "counts": (ctp, cfp, cfn)}
            report.vacuous |= v1 or v2
        report.per_threshold[t] = {
            "ap": ap, "ar": ar, "counts": (tp, fp, fn), "per_class": class_rows,
        }
        aps.append(ap)
        ars.append(ar)
    report.map = float(np.mean(aps))
    report.mar = float(np.mean(ars))
    return report


def ols_sweep(
    confmaps_per_frame: list,
    gts_per_frame: list[list[GtAnnotation]],
    ols_values: list[float],
    kappa: KappaTable,
    axes: tuple[np.ndarray, np.ndarray],
    peak_threshold: float = 0.3,
) -> list[tuple[float, float, float]]:
    """Run the NMS suppression threshold over ols_values and evaluate each.

    Returns rows of (ols_value, mAP, mAR). Duplicate values are dropped with
    a warning.
    """
    from .postproc import l_nms

    seen = set()
    values = []
    for v in ols_values:
        if v in seen:
            warnings.warn(f"duplicate suppression value {v} dropped", stacklevel=2)
            continue
        if not 0.0 < v < 1.0:
            raise ValueError(f"suppression values must lie in (0, 1), got {v}")
        seen.add(v)
        values.append(v)

    rows = []
    for v in values:
        frames = []
        for cm, gts in zip(confmaps_per_frame, gts_per_frame):
            dets = l_nms(cm, peak_threshold, v, kappa, axes)
            frames.append((dets, gts))
        report = evaluate(frames, kappa)
        rows.append((v, report.map, report.mar))
    return rows


def sweep_to_csv(rows: list[tuple[float, float, float]]) -> str:
    lines = ["ols,map,mar"]
    for v, m, r in rows:
        lines.append(f"{v},{m:.6f},{r:.6f}")
    return "\n".join(lines) + "\n"
