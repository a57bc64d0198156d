"""Fluorescence time-series container, CSV I/O, smoothing and landmarks.

A series is uniformly sampled intensity with a per-sample validity mask;
invalid samples are carried through every operation and never silently
imputed (resampling interpolates between adjacent valid samples only).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .ioutil import fmt_float

CURVE_CSV_HEADER = ["patient_id", "roi_id", "frame_index", "time_s", "value", "valid"]


@dataclass
class TimeSeries:
    """Uniformly sampled intensity curve with validity mask."""

    sample_period_s: float
    start_time_s: float
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not self.sample_period_s > 0:
            raise DomainError(f"sample_period_s must be > 0, got {self.sample_period_s}")
        if self.values.ndim != 1 or self.values.shape != self.valid.shape or len(self.values) == 0:
            raise DomainError("values and valid must be 1-D, nonempty and of equal length")
        v = self.values[self.valid]
        # non-negativity is a property of measured intensities, enforced at
        # ingestion; model outputs may legitimately undershoot zero
        if v.size and not np.all(np.isfinite(v)):
            raise DomainError("valid samples must be finite")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def times(self) -> np.ndarray:
        return self.start_time_s + self.sample_period_s * np.arange(len(self.values))

    @property
    def end_time_s(self) -> float:
        return float(self.start_time_s + self.sample_period_s * (len(self.values) - 1))

    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def copy(self) -> "TimeSeries":
        return replace(self, values=self.values.copy(), valid=self.valid.copy())

    def truncated(self, max_time_s: float) -> "TimeSeries":
        """Sub-series of all samples with time <= max_time_s."""
        n = int(np.count_nonzero(self.times <= max_time_s + 1e-12))
        if n == 0:
            raise DomainError(f"truncation at {max_time_s} s leaves no samples")
        return TimeSeries(self.sample_period_s, self.start_time_s,
                          self.values[:n].copy(), self.valid[:n].copy())


@dataclass
class Landmarks:
    """Onset/peak landmarks of a curve; unfilled fields stay None."""

    onset_index: int | None = None
    onset_time_s: float | None = None
    peak_index: int | None = None
    peak_time_s: float | None = None
    peak_value: float | None = None
    baseline_value: float | None = None


@dataclass
class CurveSet:
    """Curves keyed by (patient_id, roi_id); one patient shares one sample period."""

    entries: dict[tuple[str, str], TimeSeries] = field(default_factory=dict)

    def __post_init__(self):
        periods: dict[str, float] = {}
        for (pid, _), ts in self.entries.items():
            ref = periods.setdefault(pid, ts.sample_period_s)
            if abs(ref - ts.sample_period_s) > 1e-12:
                raise DomainError(f"patient {pid!r} mixes sample periods {ref} and {ts.sample_period_s}")

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return sorted(self.entries.keys())

    def __getitem__(self, key: tuple[str, str]) -> TimeSeries:
        return self.entries[key]


def load_curves(path: str | Path) -> CurveSet:
    """Load a curve-CSV file into a CurveSet.

    Missing frame indices inside a series' observed range become
    valid=false samples; rows with valid=0 likewise.
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        missing = [c for c in CURVE_CSV_HEADER if c not in header]
        if missing:
            raise FormatError(f"{path}: malformed header, missing column(s) {', '.join(missing)}")
        idx = {c: header.index(c) for c in CURVE_CSV_HEADER}
        rows: dict[tuple[str, str], dict[int, tuple[float, float, bool]]] = {}
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                pid = row[idx["patient_id"]]
                rid = row[idx["roi_id"]]
                frame = int(row[idx["frame_index"]])
                t = float(row[idx["time_s"]])
                raw_value = row[idx["value"]].strip()
                value = float(raw_value) if raw_value else 0.0
                ok = row[idx["valid"]].strip()
            except (IndexError, ValueError) as e:
                raise FormatError(f"{path}:{ln}: unparseable row ({e})") from None
            if ok not in ("0", "1"):
                raise FormatError(f"{path}:{ln}: valid must be 0 or 1, got {ok!r}")
            series = rows.setdefault((pid, rid), {})
            if frame in series:
                raise FormatError(f"{path}:{ln}: duplicate sample ({pid}, {rid}, frame {frame})")
            series[frame] = (t, value, ok == "1")

    entries: dict[tuple[str, str], TimeSeries] = {}
    for key, samples in rows.items():
        frames = sorted(samples)
        f0, f1 = frames[0], frames[-1]
        # sample period from observed (frame, time) pairs; must be uniform
        if len(frames) < 2:
            raise FormatError(f"{path}: series {key} has a single sample; period undefined")
        t0 = samples[f0][0]
        dt = (samples[f1][0] - t0) / (f1 - f0)
        if dt <= 0:
            raise FormatError(f"{path}: series {key} has non-increasing time stamps")
        for fr in frames:
            expect = t0 + (fr - f0) * dt
            if abs(samples[fr][0] - expect) > 1e-6:
                raise FormatError(
                    f"{path}: series {key} frame {fr}: time {samples[fr][0]} deviates "
                    f"from uniform spacing (expected {expect})")
        n = f1 - f0 + 1
        values = np.zeros(n)
        valid = np.zeros(n, dtype=bool)
        for fr in frames:
            _, v, ok = samples[fr]
            values[fr - f0] = v
            valid[fr - f0] = ok
        try:
            entries[key] = TimeSeries(dt, t0, values, valid)
        except DomainError as e:
            raise FormatError(f"{path}: series {key}: {e}") from None
    try:
        return CurveSet(entries)
    except DomainError as e:
        raise FormatError(f"{path}: {e}") from None


def save_curves(curves: CurveSet, path: str | Path) -> None:
    """Write a CurveSet in the curve-CSV format (exact float round trip)."""
    path = Path(path)
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        f.write(",".join(CURVE_CSV_HEADER) + "\n")
        for (pid, rid) in curves.keys():
            ts = curves[(pid, rid)]
            times = ts.times
            for k in range(len(ts)):
                f.write(",".join([
                    pid, rid, str(k),
                    fmt_float(times[k]),
                    fmt_float(ts.values[k]),
                    "1" if ts.valid[k] else "0",
                ]) + "\n")


def smooth(series: TimeSeries, window_s: float) -> TimeSeries:
    """Centered moving average over valid samples within +-window_s/2.

    Output validity equals input validity; invalid samples keep their raw
    value. window_s = 0 returns the series unchanged.
    """
    if window_s < 0:
        raise DomainError(f"window_s must be >= 0, got {window_s}")
    if window_s == 0:
        return series.copy()
    hw = int(np.floor(window_s / 2.0 / series.sample_period_s + 1e-9))
    if hw == 0:
        return series.copy()
    n = len(series)
    out = series.values.copy()
    valid = series.valid.copy()
    for i in np.flatnonzero(series.valid):
        a = max(0, i - hw)
        b = min(n, i + hw + 1)
        window = series.values[a:b][series.valid[a:b]]
        out[i] = np.sum(window) / window.size
    return TimeSeries(series.sample_period_s, series.start_time_s, out, valid)


def detect_onset(series: TimeSeries, baseline_window_s: float = 5.0,
                 k_sigma: float = 3.0, smooth_window_s: float = 0.0,
                 hold_s: float = 1.0) -> Landmarks:
    """Find fluorescence onset against a robust baseline.

    Baseline is the median of valid samples in the first baseline_window_s;
    onset is the first index whose (optionally smoothed) intensity exceeds
    baseline + k_sigma * 1.4826 * MAD and stays above for >= hold_s.
    """
    if series.n_valid() < 10:
        raise DomainError("onset detection needs >= 10 valid samples")
    sm = smooth(series, smooth_window_s)
    times = series.times
    # half-open window: a 5 s window at 1 s spacing covers samples 0..4
    in_window = (times - series.start_time_s
                 < baseline_window_s - 1e-9 * series.sample_period_s) & series.valid
    base_samples = sm.values[in_window]
    if base_samples.size < 3:
        raise DomainError("baseline window covers fewer than 3 valid samples")
    baseline = float(np.median(base_samples))
    mad = float(np.median(np.abs(base_samples - baseline)))
    threshold = baseline + k_sigma * 1.4826 * mad

    hold_n = max(1, int(np.floor(hold_s / series.sample_period_s + 1e-9)) + 1)
    above = (sm.values > threshold) & sm.valid
    n = len(series)
    for i in range(n):
        if not above[i]:
            continue
        window = above[i:min(n, i + hold_n)] | ~series.valid[i:min(n, i + hold_n)]
        if np.all(window):
            return Landmarks(onset_index=i, onset_time_s=float(times[i]),
                             baseline_value=baseline)
    raise DomainError("no onset detected")


def detect_peak(series: TimeSeries, smooth_window_s: float = 0.0) -> Landmarks:
    """Peak of the (optionally smoothed) curve; ties go to the earliest index."""
    if series.n_valid() == 0:
        raise DomainError("peak detection needs at least one valid sample")
    sm = smooth(series, smooth_window_s)
    vals = np.where(sm.valid, sm.values, -np.inf)
    peak_index = int(np.argmax(vals))
    return Landmarks(peak_index=peak_index,
                     peak_time_s=float(series.times[peak_index]),
                     peak_value=float(sm.values[peak_index]))


def resample(series: TimeSeries, new_period_s: float) -> TimeSeries:
    """Linear interpolation onto a new uniform grid with the same origin.

    An output sample is invalid if either bracketing input sample is
    invalid or if it falls outside the input span.
    """
    if not new_period_s > 0:
        raise DomainError(f"new_period_s must be > 0, got {new_period_s}")
    if abs(new_period_s - series.sample_period_s) < 1e-15:
        return series.copy()
    span = series.end_time_s - series.start_time_s
    n_out = int(np.floor(span / new_period_s + 1e-9)) + 1
    out_t = series.start_time_s + new_period_s * np.arange(n_out)
    rel = (out_t - series.start_time_s) / series.sample_period_s
    lo = np.clip(np.floor(rel).astype(int), 0, len(series) - 1)
    hi = np.clip(lo + 1, 0, len(series) - 1)
    frac = rel - lo
    exact = frac <= 1e-12
    values = np.where(exact,
                      series.values[lo],
                      series.values[lo] * (1 - frac) + series.values[hi] * frac)
    valid = np.where(exact, series.valid[lo], series.valid[lo] & series.valid[hi])
    return TimeSeries(new_period_s, series.start_time_s, values, valid.astype(bool))
