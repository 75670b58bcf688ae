"""Mask and curb metrics plus dataset-level aggregation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import MadlError, PathLike
from .labels import LabelMask, read_curb_points, read_mask_png


class DimensionMismatchError(MadlError):
    pass


class UnmatchedFrameError(MadlError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    iou: float
    population: int
    degenerate: list = field(default_factory=list)  # names of metrics hit by 0/0

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(num: float, den: float, name: str, degenerate: list) -> float:
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def confusion_counts(pred: LabelMask | np.ndarray, truth: LabelMask | np.ndarray) -> ConfusionCounts:
    p = pred.positive if isinstance(pred, LabelMask) else np.asarray(pred) > 0
    t = truth.positive if isinstance(truth, LabelMask) else np.asarray(truth) > 0
    if p.shape != t.shape:
        raise DimensionMismatchError(f"prediction {p.shape} vs truth {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _f1(precision: float, recall: float, degenerate: list) -> float:
    if precision + recall == 0:
        degenerate.append("f1")
        return 0.0
    return 2 * precision * recall / (precision + recall)


def mask_metrics(c: ConfusionCounts) -> MetricReport:
    if c.total == 0:
        raise ValueError("empty population")
    deg: list[str] = []
    acc = (c.tp + c.tn) / c.total
    prec = _ratio(c.tp, c.tp + c.fp, "precision", deg)
    rec = _ratio(c.tp, c.tp + c.fn, "recall", deg)
    f1 = _f1(prec, rec, deg)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, "iou", deg)
    return MetricReport(acc, prec, rec, f1, iou, c.total, deg)


@dataclass
class CurbMatch:
    tp: int  # predicted points within tolerance of the truth
    n_pred: int
    matched: int  # truth points within tolerance of a prediction
    n_truth: int

    def __add__(self, other: CurbMatch) -> CurbMatch:
        return CurbMatch(self.tp + other.tp, self.n_pred + other.n_pred, self.matched + other.matched,
                         self.n_truth + other.n_truth)


def curb_match(pred: np.ndarray, truth: np.ndarray, tolerance: float = 0.2) -> CurbMatch:
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    pred = pred.reshape(len(pred), -1) if pred.size else np.zeros((0, 3))
    truth = truth.reshape(len(truth), -1) if truth.size else np.zeros((0, pred.shape[1]))
    tp = matched = 0
    if len(pred) and len(truth):
        d_pred, _ = cKDTree(truth).query(pred)
        d_truth, _ = cKDTree(pred).query(truth)
        tp = int(np.count_nonzero(d_pred <= tolerance))
        matched = int(np.count_nonzero(d_truth <= tolerance))
    return CurbMatch(tp, len(pred), matched, len(truth))


def match_metrics(m: CurbMatch) -> MetricReport:
    """Precision, recall and F1 of a curb match; accuracy and IoU are not defined
    for point sets and are reported as 0 with a degenerate flag."""
    deg: list[str] = ["accuracy", "iou"]
    prec = _ratio(m.tp, m.n_pred, "precision", deg)
    rec = _ratio(m.matched, m.n_truth, "recall", deg)
    return MetricReport(0.0, prec, rec, _f1(prec, rec, deg), 0.0, m.n_pred + m.n_truth, deg)


def curb_metrics(pred: np.ndarray, truth: np.ndarray, tolerance: float = 0.2) -> MetricReport:
    """A prediction is a hit when any truth point lies within ``tolerance``."""
    return match_metrics(curb_match(pred, truth, tolerance))


# ---------------------------------------------------------------------------
# Dataset aggregation
# ---------------------------------------------------------------------------

_COLUMNS = ("accuracy", "precision", "recall", "f1", "iou")


@dataclass
class DatasetReport:
    mode: str
    frames: dict  # frame name -> MetricReport
    micro: MetricReport
    macro: MetricReport

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "frames": {k: v.as_dict() for k, v in self.frames.items()},
            "micro": self.micro.as_dict(),
            "macro": self.macro.as_dict(),
        }

    def table(self, method: str = "MADL") -> str:
        header = f"{'method':<16}" + "".join(f"{c:>11}" for c in _COLUMNS)
        rows = [header, "-" * len(header)]
        for name, rep in (("micro", self.micro), ("macro", self.macro)):
            rows.append(f"{method + ' ' + name:<16}" + "".join(f"{100 * getattr(rep, c):>11.2f}" for c in _COLUMNS))
        return "\n".join(rows) + "\n"


def _macro(reports: list[MetricReport]) -> MetricReport:
    vals = {c: float(np.mean([getattr(r, c) for r in reports])) for c in _COLUMNS}
    return MetricReport(**vals, population=sum(r.population for r in reports))


def _pair_files(pred_dir: Path, truth_dir: Path, suffix: str) -> list[tuple[str, Path, Path]]:
    pred = {p.stem: p for p in sorted(pred_dir.glob(f"*{suffix}"))}
    truth = {p.stem: p for p in sorted(truth_dir.glob(f"*{suffix}"))}
    missing = sorted(set(pred) - set(truth))
    if missing:
        raise UnmatchedFrameError(f"no truth for frame(s): {', '.join(missing)}")
    if not pred:
        raise UnmatchedFrameError(f"no {suffix} files in {pred_dir}")
    return [(k, pred[k], truth[k]) for k in sorted(pred)]


def evaluate_dataset(pred_dir: PathLike, truth_dir: PathLike, mode: str = "mask", tolerance: float = 0.2,
                     frames: list[str] | None = None) -> DatasetReport:
    """Per-frame reports plus pooled (micro) and averaged (macro) summaries.

    ``mode`` is ``mask`` (PNG masks) or ``curb`` (curb point JSON files).
    """
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    if mode not in ("mask", "curb"):
        raise ValueError(f"unknown mode {mode!r}")
    pairs = _pair_files(pred_dir, truth_dir, ".png" if mode == "mask" else ".json")
    if frames is not None:
        pairs = [p for p in pairs if p[0] in set(frames)]
    per: dict[str, MetricReport] = {}
    if mode == "mask":
        pooled = ConfusionCounts(0, 0, 0, 0)
        for name, pp, tp in pairs:
            c = confusion_counts(read_mask_png(pp), read_mask_png(tp))
            per[name] = mask_metrics(c)
            pooled = pooled + c
        micro = mask_metrics(pooled)
    else:
        pooled = CurbMatch(0, 0, 0, 0)
        for name, pp, tp in pairs:
            m = curb_match(read_curb_points(pp).xyz, read_curb_points(tp).xyz, tolerance)
            per[name] = match_metrics(m)
            pooled = pooled + m
        micro = match_metrics(pooled)
    return DatasetReport(mode, per, micro, _macro(list(per.values())))


def write_report(report: DatasetReport, out_dir: PathLike, stem: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, tpath = out / f"{stem}.json", out / f"{stem}.txt"
    jpath.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    tpath.write_text(report.table())
    return jpath, tpath
