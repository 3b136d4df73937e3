"""COCO-style detection evaluation with 101-point AP and size-bucketed recall."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .matching import Detection, iou_matrix

EVAL_SCHEMA = "dronedet-eval/1"
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.arange(101) / 100
MAX_DETS = 100
SMALL, LARGE = 32 ** 2, 96 ** 2
AREA_RANGES = {
    "all": lambda a: True,
    "small": lambda a: a < SMALL,
    "medium": lambda a: SMALL <= a <= LARGE,
    "large": lambda a: a > LARGE,
}
METRIC_NAMES = (
    "ap_5095", "ap_50", "ap_75", "ap_small", "ap_medium", "ap_large",
    "ar_5095", "ar_50", "ar_75", "ar_small", "ar_medium", "ar_large",
)


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    box: tuple  # pixel corners
    class_id: int = 1


@dataclass
class EvalReport:
    ap_5095: float = 0.0
    ap_50: float = 0.0
    ap_75: float = 0.0
    ap_small: float = 0.0
    ap_medium: float = 0.0
    ap_large: float = 0.0
    ar_5095: float = 0.0
    ar_50: float = 0.0
    ar_75: float = 0.0
    ar_small: float = 0.0
    ar_medium: float = 0.0
    ar_large: float = 0.0
    # iou threshold -> (K, 2) array of (recall, precision) at each detection rank
    pr_curves: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def _area(b) -> float:
    return max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)


def _check_ids(dets) -> None:
    seen = set()
    for d in dets:
        if d.det_id in seen:
            raise ValueError(f"duplicate detection id {d.det_id}")
        seen.add(d.det_id)


@dataclass
class _Matched:
    scores: np.ndarray
    ids: np.ndarray
    tp: np.ndarray  # bool per kept detection
    n_gt: int


def _evaluate(dets, gts, thr: float, in_range, max_dets: int = MAX_DETS) -> _Matched:
    """Greedy matching for one class at one IoU threshold and area range.

    Per image, detections go in (score desc, id asc) order; each takes the
    unmatched ground truth with IoU >= thr. In-range boxes are preferred;
    ties go to the higher IoU and then to the lower index. Detections matched to out-of-range boxes,
    and unmatched out-of-range detections, are dropped from the tally.
    """
    by_img_d = defaultdict(list)
    by_img_g = defaultdict(list)
    for d in dets:
        by_img_d[d.image_id].append(d)
    for g in gts:
        by_img_g[g.image_id].append(g)
    scores, ids, tps = [], [], []
    n_gt = 0
    for img in set(by_img_d) | set(by_img_g):
        ds = sorted(by_img_d.get(img, []), key=lambda d: (-d.score, d.det_id))[:max_dets]
        gs = by_img_g.get(img, [])
        ignore = np.array([not in_range(_area(g.box)) for g in gs], dtype=bool)
        n_gt += int((~ignore).sum())
        if not ds:
            continue
        ious = iou_matrix([d.box for d in ds], [g.box for g in gs]) if gs else np.zeros((len(ds), 0))
        used = np.zeros(len(gs), dtype=bool)
        for di, d in enumerate(ds):
            cand = np.nonzero(~used & (ious[di] >= thr))[0]
            if cand.size:
                # in-range boxes win; ties break on IoU before index
                gi = cand[np.lexsort((cand, -ious[di, cand], ignore[cand]))[0]]
                used[gi] = True
                if ignore[gi]:
                    continue
                tps.append(True)
            else:
                if not in_range(_area(d.box)):
                    continue
                tps.append(False)
            scores.append(d.score)
            ids.append(d.det_id)
    return _Matched(np.array(scores, dtype=float), np.array(ids, dtype=int), np.array(tps, dtype=bool), n_gt)


def _curve(m: _Matched) -> np.ndarray:
    if m.n_gt == 0 or m.tp.size == 0:
        return np.zeros((0, 2))
    order = np.lexsort((m.ids, -m.scores))
    tp = np.cumsum(m.tp[order])
    fp = np.cumsum(~m.tp[order])
    return np.stack([tp / m.n_gt, tp / (tp + fp)], axis=1)


def pr_curve(dets, gts, iou_threshold: float = 0.5, class_id: int | None = None) -> np.ndarray:
    """(recall, precision) after each detection in global score order."""
    dets, gts = list(dets), list(gts)
    _check_ids(dets)
    if class_id is None:
        classes = sorted({g.class_id for g in gts} | {d.class_id for d in dets})
        if len(classes) > 1:
            raise ValueError(f"several classes present {classes}; pass class_id")
        class_id = classes[0] if classes else 1
    m = _evaluate([d for d in dets if d.class_id == class_id], [g for g in gts if g.class_id == class_id],
                  iou_threshold, AREA_RANGES["all"])
    return _curve(m)


def precision_envelope(curve) -> np.ndarray:
    """Running maximum of precision taken from the high-recall end."""
    p = np.asarray(curve, dtype=float).reshape(-1, 2)[:, 1]
    return np.maximum.accumulate(p[::-1])[::-1] if p.size else p


def average_precision(curve) -> float:
    """101-point interpolated AP over recall 0.00, 0.01, ..., 1.00."""
    curve = np.asarray(curve, dtype=float).reshape(-1, 2)
    if curve.size == 0:
        return 0.0
    rec = curve[:, 0]
    env = precision_envelope(curve)
    idx = np.searchsorted(rec, RECALL_GRID, side="left")
    q = np.where(idx < len(rec), env[np.minimum(idx, len(rec) - 1)], 0.0)
    return float(q.mean())


def coco_summary(dets, gts, max_dets: int = MAX_DETS) -> EvalReport:
    """AP/AR families averaged over classes that have ground truth in each area range."""
    dets, gts = list(dets), list(gts)
    _check_ids(dets)
    classes = sorted({g.class_id for g in gts})
    ap = {}  # (area, thr) -> class mean
    ar = {}
    curves = {}
    for area, in_range in AREA_RANGES.items():
        for thr in IOU_THRESHOLDS:
            aps, ars = [], []
            for c in classes:
                m = _evaluate([d for d in dets if d.class_id == c], [g for g in gts if g.class_id == c],
                              thr, in_range, max_dets)
                if m.n_gt == 0:
                    continue
                curve = _curve(m)
                aps.append(average_precision(curve))
                ars.append(float(curve[-1, 0]) if len(curve) else 0.0)
                if area == "all" and c == classes[0]:
                    curves[thr] = curve
            ap[area, thr] = float(np.mean(aps)) if aps else None
            ar[area, thr] = float(np.mean(ars)) if ars else None

    def avg(table, area, thrs=IOU_THRESHOLDS):
        vals = [table[area, t] for t in thrs if table[area, t] is not None]
        return float(np.mean(vals)) if vals else 0.0

    return EvalReport(
        ap_5095=avg(ap, "all"), ap_50=avg(ap, "all", (0.5,)), ap_75=avg(ap, "all", (0.75,)),
        ap_small=avg(ap, "small"), ap_medium=avg(ap, "medium"), ap_large=avg(ap, "large"),
        ar_5095=avg(ar, "all"), ar_50=avg(ar, "all", (0.5,)), ar_75=avg(ar, "all", (0.75,)),
        ar_small=avg(ar, "small"), ar_medium=avg(ar, "medium"), ar_large=avg(ar, "large"),
        pr_curves={t: curves.get(t, np.zeros((0, 2))) for t in IOU_THRESHOLDS},
    )


def bucket_counts(gts) -> dict[str, int]:
    out = {k: 0 for k in ("small", "medium", "large")}
    for g in gts:
        a = _area(g.box)
        for k in out:
            if AREA_RANGES[k](a):
                out[k] += 1
    return out


# -- emission ----------------------------------------------------------------

CSV_HEADER = ("kind", "name", "iou_threshold", "recall", "precision", "value")


def write_report_csv(report: EvalReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={EVAL_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for name, v in report.metrics().items():
            w.writerow(["metric", name, "", "", "", repr(float(v))])
        for thr in sorted(report.pr_curves):
            for r, p in report.pr_curves[thr]:
                w.writerow(["curve", "pr", repr(float(thr)), repr(float(r)), repr(float(p)), ""])
    return path


def read_report_csv(path) -> EvalReport:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema={EVAL_SCHEMA}":
            raise ValueError(f"{path}: expected schema line, got {first!r}")
        rows = list(csv.DictReader(fh))
    report = EvalReport()
    curves = defaultdict(list)
    for row in rows:
        if row["kind"] == "metric":
            setattr(report, row["name"], float(row["value"]))
        elif row["kind"] == "curve":
            curves[float(row["iou_threshold"])].append((float(row["recall"]), float(row["precision"])))
    report.pr_curves = {t: np.array(v, dtype=float).reshape(-1, 2) for t, v in curves.items()}
    return report


def emit_report(report: EvalReport, out_dir, svg: bool = True, title: str | None = None) -> dict[str, Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out_dir}: {e}") from e
    files = {"csv": write_report_csv(report, out_dir / "metrics.csv")}
    if svg:
        from .plotting import plot_pr_curves

        files["svg"] = plot_pr_curves(report.pr_curves, out_dir / "pr_curve.svg", title=title)
    return files
