"""Micro-F1, calibration, throughput timing and report formatting."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    def micro_f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom


def _as_bits(item, n_labels: int) -> np.ndarray:
    """Class index, bit vector, or ``None`` (a parse failure) to a bit vector."""
    out = np.zeros(n_labels, dtype=bool)
    if item is None:
        return out
    if isinstance(item, (int, np.integer)):
        if not 0 <= int(item) < n_labels:
            raise ValueError(f"class index {item} outside [0, {n_labels})")
        out[int(item)] = True
        return out
    arr = np.asarray(item).astype(bool)
    if arr.shape != (n_labels,):
        raise ValueError(f"bit vector of shape {arr.shape}, expected ({n_labels},)")
    return arr


def confusion_counts(pred: Sequence, gold: Sequence, n_labels: int) -> ConfusionCounts:
    """Pool (instance, label) decisions. ``None`` predictions count as empty."""
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predictions for {len(gold)} gold labels")
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        pb, gb = _as_bits(p, n_labels), _as_bits(g, n_labels)
        tp += int(np.sum(pb & gb))
        fp += int(np.sum(pb & ~gb))
        fn += int(np.sum(~pb & gb))
    return ConfusionCounts(tp, fp, fn)


def micro_f1(pred: Sequence, gold: Sequence, n_labels: int | None = None) -> float:
    """``2 TP / (2 TP + FP + FN)`` over all pooled decisions."""
    if n_labels is None:
        n_labels = _infer_labels(pred, gold)
    return confusion_counts(pred, gold, n_labels).micro_f1()


def _infer_labels(pred, gold) -> int:
    for item in list(gold) + list(pred):
        if item is not None and not isinstance(item, (int, np.integer)):
            return len(item)
    values = [int(x) for x in list(gold) + list(pred) if x is not None]
    return max(values) + 1 if values else 1


@dataclass(frozen=True)
class CalibrationBin:
    mean_confidence: float
    accuracy: float
    count: int


@dataclass(frozen=True)
class CalibrationReport:
    bins: list[CalibrationBin]
    ece: float


def expected_calibration_error(confidences, correct_flags, n_bins: int = 10) -> CalibrationReport:
    """Equal-width, right-closed bins; 0.0 falls into the first bin."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    ok = np.asarray(correct_flags, dtype=np.float64).ravel()
    if conf.shape != ok.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    which = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    bins, ece, N = [], 0.0, conf.size
    for b in range(n_bins):
        sel = which == b
        n = int(sel.sum())
        if n == 0:
            bins.append(CalibrationBin(0.0, 0.0, 0))
            continue
        c, a = float(conf[sel].mean()), float(ok[sel].mean())
        bins.append(CalibrationBin(c, a, n))
        ece += n / N * abs(a - c)
    return CalibrationReport(bins, ece)


@dataclass(frozen=True)
class ThroughputReport:
    phase: str
    samples: int
    wall_seconds: float
    sps: float

    @classmethod
    def from_timing(cls, phase: str, samples: int, wall_seconds: float) -> "ThroughputReport":
        if wall_seconds <= 0:
            raise ValueError("wall_seconds must be positive")
        return cls(phase, samples, wall_seconds, samples / wall_seconds)

    def to_dict(self) -> dict:
        return asdict(self)


def bench_throughput(
    run_fn: Callable[[int], object],
    samples: int,
    warmup_samples: int = 0,
    phase: str = "infer",
    clock: Callable[[], float] = time.perf_counter,
) -> ThroughputReport:
    """Time ``run_fn(i)`` over exactly ``samples`` calls after untimed warmup calls."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    for i in range(warmup_samples):
        run_fn(i)
    start = clock()
    for i in range(samples):
        run_fn(warmup_samples + i)
    return ThroughputReport.from_timing(phase, samples, clock() - start)


def format_throughput_table(rows: Sequence[dict], datasets: Sequence[str]) -> str:
    """Plain-text rows ``approach | model | train sps | infer sps`` per dataset."""
    header = ["Approach", "Model"]
    for ds in datasets:
        header += [f"Train sps ({ds})", f"Infer sps ({ds})"]
    lines = [header]
    for r in rows:
        line = [str(r["approach"]), str(r["model"])]
        for ds in datasets:
            cell = r.get(ds, {})
            line += [_fmt(cell.get("train")), _fmt(cell.get("infer"))]
        lines.append(line)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join(" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines) + "\n"


def _fmt(x) -> str:
    return "--" if x is None else f"{x:.2f}"


def t_interval(values, confidence: float = 0.95, clip: tuple[float, float] | None = (0.0, 1.0)):
    """Student-t confidence interval of the mean, optionally clipped."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two values")
    m = float(v.mean())
    half = float(stats.t.ppf(0.5 + confidence / 2, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))
    lo, hi = m - half, m + half
    if clip is not None:
        lo, hi = max(clip[0], lo), min(clip[1], hi)
    return m, lo, hi
