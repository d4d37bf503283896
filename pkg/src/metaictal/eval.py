"""Early-warning indicators, threshold crossings, and the accuracy grid.

Two indicator traces share one time convention: a window [t - w, t) is
stamped at decision time t. The probability indicator runs the trained
classifier over a strided grid of history windows; the variance indicator
is the channel-averaged trailing sample variance of the raw signal on the
same grid, the classical critical-slowing-down precursor.

Thresholds are quantiles of a trace's own baseline segment, so the two
indicators are compared on their own scales. A crossing requires the value
to rise strictly above the threshold; a trace that never leaves its
baseline level therefore never crosses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Episode, EpisodeMeta, LabeledWindow, Purity, SplitDataset, window_sample_count
from .errors import (
    EmptySet,
    EmptyTrace,
    GridMismatch,
    InvalidConfig,
    MissingCheckpoint,
    OutOfRange,
    ShapeMismatch,
)
from .trainer import evaluate_accuracy


class TraceKind(enum.Enum):
    PROBABILITY = "probability"
    VARIANCE = "variance"


@dataclass(frozen=True, eq=False)
class IndicatorTrace:
    """A time-stamped scalar indicator.

    smoothing_window_s records the width of the trailing data window each
    value summarizes (the classifier history h for probability traces, the
    variance window for variance traces).
    """

    times_s: np.ndarray
    values: np.ndarray
    kind: TraceKind
    smoothing_window_s: float

    def __post_init__(self) -> None:
        t = np.array(self.times_s, dtype=np.float64)
        v = np.array(self.values, dtype=np.float64)
        t.setflags(write=False)
        v.setflags(write=False)
        if t.ndim != 1 or v.shape != t.shape:
            raise ShapeMismatch("times and values must be 1-D arrays of equal length")
        if t.size and np.any(np.diff(t) <= 0):
            raise ShapeMismatch("trace times must be strictly increasing")
        if self.kind is TraceKind.PROBABILITY and v.size and (
            np.any(v < 0.0) or np.any(v > 1.0)
        ):
            raise ShapeMismatch("probability trace values must lie in [0, 1]")
        if self.kind is TraceKind.VARIANCE and v.size and np.any(v < 0.0):
            raise ShapeMismatch("variance trace values must be non-negative")
        object.__setattr__(self, "times_s", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return int(self.times_s.size)


def probability_indicator(
    net, ep: Episode, h_s: float, stride_s: float = 0.5
) -> IndicatorTrace:
    """Classifier output over history windows [t - h, t), stamped at t.

    The episode must already be standardized with the statistics the
    checkpoint was trained under.
    """
    if h_s <= 0 or stride_s <= 0:
        raise InvalidConfig("h_s and stride_s must be positive")
    if h_s > ep.duration_s:
        raise OutOfRange(f"h={h_s} s exceeds the {ep.duration_s} s episode")
    fs = ep.sample_rate_hz
    ih = round(h_s * fs)
    n_points = window_sample_count(ep.duration_s, h_s, 0.0, stride_s)
    starts = [round(k * stride_s * fs) for k in range(n_points)]
    times = h_s + stride_s * np.arange(n_points)
    xs = np.stack([ep.channels[:, s : s + ih] for s in starts])
    values = net.forward_batch(xs)
    return IndicatorTrace(times, values, TraceKind.PROBABILITY, smoothing_window_s=h_s)


def variance_indicator(
    ep: Episode, window_s: float = 0.5, stride_s: float = 0.5
) -> IndicatorTrace:
    """Trailing per-channel sample variance, averaged over channels.

    Values are evaluated on the same strided grid as probability traces;
    the first grid point is the earliest multiple of stride_s >= window_s.
    """
    if window_s <= 0 or stride_s <= 0:
        raise InvalidConfig("window_s and stride_s must be positive")
    fs = ep.sample_rate_hz
    iw = round(window_s * fs)
    if iw < 2:
        raise InvalidConfig(
            f"window_s={window_s} s holds {iw} samples at {fs} Hz; need >= 2 for variance"
        )
    k0 = math.ceil(window_s / stride_s - 1e-9)
    k1 = math.floor(ep.duration_s / stride_s + 1e-9)
    if k1 < k0:
        raise OutOfRange(f"episode shorter than one {window_s} s window")
    ks = np.arange(k0, k1 + 1)
    times = ks * stride_s
    ends = np.asarray([round(k * stride_s * fs) for k in ks])

    x = ep.channels
    csum = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(x, axis=1)], axis=1)
    csq = np.concatenate(
        [np.zeros((x.shape[0], 1)), np.cumsum(x * x, axis=1)], axis=1
    )
    lo = ends - iw
    s1 = csum[:, ends] - csum[:, lo]
    s2 = csq[:, ends] - csq[:, lo]
    var = (s2 - s1 * s1 / iw) / (iw - 1)
    values = np.maximum(var.mean(axis=0), 0.0)
    return IndicatorTrace(times, values, TraceKind.VARIANCE, smoothing_window_s=window_s)


def ensemble_indicator(traces: Sequence[IndicatorTrace]) -> IndicatorTrace:
    """Pointwise mean of traces sharing one grid (e.g. across training seeds)."""
    if not traces:
        raise EmptyTrace("cannot ensemble zero traces")
    ref = traces[0]
    for tr in traces[1:]:
        if len(tr) != len(ref) or not np.allclose(
            tr.times_s, ref.times_s, rtol=0.0, atol=1e-9
        ):
            raise GridMismatch("ensemble members must share one time grid")
        if tr.kind is not ref.kind:
            raise GridMismatch("ensemble members must share one trace kind")
    values = np.mean([tr.values for tr in traces], axis=0)
    return IndicatorTrace(
        ref.times_s.copy(), values, ref.kind, smoothing_window_s=ref.smoothing_window_s
    )


def first_crossing(
    trace: IndicatorTrace,
    threshold_quantile: float,
    onset_s: float | None = None,
    baseline_fraction: float = 0.25,
) -> float | None:
    """Earliest time the trace rises strictly above its baseline quantile.

    The threshold is the given quantile of the baseline segment: the first
    baseline_fraction of the span before onset_s, or of the whole trace when
    no onset is supplied. Returns None when the trace never exceeds it.
    """
    if len(trace) == 0:
        raise EmptyTrace("first_crossing needs a non-empty trace")
    if not (0.0 < threshold_quantile < 1.0):
        raise InvalidConfig("threshold_quantile must lie in (0, 1)")
    if not (0.0 < baseline_fraction <= 1.0):
        raise InvalidConfig("baseline_fraction must lie in (0, 1]")
    t = trace.times_s
    v = trace.values
    if onset_s is None:
        span = v
    else:
        pre = v[t < onset_s]
        if pre.size == 0:
            raise EmptyTrace("no trace samples before the onset")
        span = pre
    n_base = max(1, math.ceil(baseline_fraction * span.size))
    threshold = float(np.quantile(span[:n_base], threshold_quantile))
    above = np.nonzero(v > threshold)[0]
    if above.size == 0:
        return None
    return float(t[above[0]])


@dataclass(frozen=True)
class LeadRow:
    """Lead times (onset minus first crossing) at one threshold quantile."""

    quantile: float
    lead_prob_s: float | None
    lead_var_s: float | None
    advantage_s: float | None


def lead_time_comparison(
    prob: IndicatorTrace,
    var: IndicatorTrace,
    onset_s: float,
    quantiles: Sequence[float],
    baseline_fraction: float = 0.25,
) -> list[LeadRow]:
    """Lead-time table for both indicators over a quantile sweep.

    lead = onset - first crossing; positive means warning before the onset.
    advantage = lead_prob - lead_var; a crossing that never happens leaves
    the corresponding cells empty.
    """
    if not quantiles:
        raise EmptySet("quantiles must be non-empty")
    for tr, name in ((prob, "probability"), (var, "variance")):
        if len(tr) == 0:
            raise EmptyTrace(f"{name} trace is empty")
        if tr.times_s[0] > onset_s:
            raise EmptyTrace(f"{name} trace begins after the onset")
    rows = []
    for q in quantiles:
        cp = first_crossing(prob, q, onset_s=onset_s, baseline_fraction=baseline_fraction)
        cv = first_crossing(var, q, onset_s=onset_s, baseline_fraction=baseline_fraction)
        lead_p = None if cp is None else onset_s - cp
        lead_v = None if cv is None else onset_s - cv
        adv = None if (lead_p is None or lead_v is None) else lead_p - lead_v
        rows.append(LeadRow(float(q), lead_p, lead_v, adv))
    return rows


def onset_centered_trace(trace: IndicatorTrace, onset_s: float, n_points: int = 120) -> IndicatorTrace:
    """Slice of a trace centered on the onset (half before, half after)."""
    if len(trace) == 0:
        raise EmptyTrace("cannot center an empty trace")
    if n_points < 2:
        raise InvalidConfig("n_points must be >= 2")
    idx = int(np.searchsorted(trace.times_s, onset_s))
    lo = max(0, idx - n_points // 2)
    hi = min(len(trace), lo + n_points)
    lo = max(0, hi - n_points)
    return IndicatorTrace(
        trace.times_s[lo:hi],
        trace.values[lo:hi],
        trace.kind,
        smoothing_window_s=trace.smoothing_window_s,
    )


# ---------------------------------------------------------------------------
# Ground truth for noisy windows and the accuracy grid


def attach_ground_truth(ds: SplitDataset) -> list[LabeledWindow]:
    """Noisy windows relabeled from generator metadata, for evaluation only.

    A window is positive when its horizon [t_start + h, t_end) touches a
    span at or after an onset; on the peri-onset grid this is exactly
    t_end > onset.
    """
    if not ds.noisy:
        raise EmptySet("dataset has no noisy windows")
    out = []
    for w in ds.noisy:
        meta = ds.episode_meta.get(w.pair.episode_id)
        if meta is None:
            raise EmptySet(
                f"no ground-truth metadata for episode {w.pair.episode_id!r}"
            )
        label = int(any(w.pair.t_end_s > onset + 1e-9 for onset in meta.onset_times_s))
        out.append(LabeledWindow(pair=w.pair, label=label, purity=Purity.NOISY))
    return out


@dataclass
class GridTable:
    """Accuracy per (m, h, model); missing cells carry None plus a warning."""

    m_values: list[float]
    h_values: list[float]
    model_names: list[str]
    cells: dict[tuple[float, float, str], float | None]
    warnings: list[str]

    def to_csv(self) -> str:
        header = ["m_s"] + [
            f"h{h:g}_{model}" for h in self.h_values for model in self.model_names
        ]
        lines = [",".join(header)]
        for m in self.m_values:
            row = [f"{m:g}"]
            for h in self.h_values:
                for model in self.model_names:
                    acc = self.cells.get((m, h, model))
                    row.append("" if acc is None else f"{acc:.6f}")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def accuracy_grid(
    models: Mapping[str, Mapping[tuple[float, float], object]],
    test: Mapping[tuple[float, float], SplitDataset],
) -> GridTable:
    """Noisy-zone test accuracy for every (model, h, m) cell.

    `models` maps model name -> {(h_s, m_s): trained network}; a cell whose
    network is missing or None is reported as a warning, not an error.
    Ground-truth labels come from the generator metadata carried by each
    test dataset.
    """
    if not test:
        raise EmptySet("no test datasets supplied")
    if not models:
        raise EmptySet("no models supplied")
    h_values = sorted({h for h, _ in test})
    m_values = sorted({m for _, m in test})
    model_names = list(models.keys())
    cells: dict[tuple[float, float, str], float | None] = {}
    warnings: list[str] = []
    labeled_cache = {cell: attach_ground_truth(ds) for cell, ds in test.items()}
    for (h, m), windows in sorted(labeled_cache.items()):
        for name in model_names:
            net = models.get(name, {}).get((h, m))
            if net is None:
                cells[(m, h, name)] = None
                warnings.append(f"missing checkpoint for model={name} h={h:g} m={m:g}")
                continue
            cells[(m, h, name)] = evaluate_accuracy(net, windows)
    return GridTable(
        m_values=[float(m) for m in m_values],
        h_values=[float(h) for h in h_values],
        model_names=model_names,
        cells=cells,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# CSV emission (formatting fixed for byte-stable outputs)


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.12g}"


def write_trace_csv(trace: IndicatorTrace, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = ["t_s,value"]
    for t, v in zip(trace.times_s, trace.values):
        lines.append(f"{_fmt(float(t))},{_fmt(float(v))}")
    p.write_text("\n".join(lines) + "\n")


def write_leadtime_csv(rows: Sequence[LeadRow], path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = ["quantile,lead_prob_s,lead_var_s,advantage_s"]
    for r in rows:
        lines.append(
            f"{_fmt(r.quantile)},{_fmt(r.lead_prob_s)},{_fmt(r.lead_var_s)},{_fmt(r.advantage_s)}"
        )
    p.write_text("\n".join(lines) + "\n")


def write_grid_csv(table: GridTable, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(table.to_csv())
