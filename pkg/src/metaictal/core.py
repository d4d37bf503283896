"""Core value types: episodes, windows, datasets, and flat parameter vectors.

Everything here is a plain value: construction validates invariants, arrays
are copied and frozen, and the functions are pure. Multichannel recordings
are stored as [n_channels, n_samples] float64 arrays; window positions are
expressed in seconds and must land exactly on the sample grid — sub-sample
offsets are rejected rather than interpolated.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    FormatError,
    InvalidEpisode,
    MisalignedTime,
    NonPositiveWindow,
    OutOfRange,
    ShapeMismatch,
)

#: Tolerance, in fractional samples, when mapping a time onto the sample grid.
TIME_ALIGN_TOL = 1e-6

#: Tolerance, in fractional strides, when counting windows along a grid.
GRID_EPS = 1e-9


def time_to_index(t_s: float, sample_rate_hz: float) -> int:
    """Map a time in seconds to a sample index, refusing sub-sample offsets."""
    exact = t_s * sample_rate_hz
    idx = round(exact)
    if abs(exact - idx) > TIME_ALIGN_TOL:
        raise MisalignedTime(
            f"time {t_s!r} s is not aligned to the {sample_rate_hz} Hz sample grid"
        )
    return int(idx)


def _frozen_f64(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Episode:
    """A multichannel recording with known transition onsets.

    channels has shape [n_channels, n_samples] where
    n_samples == round(duration_s * sample_rate_hz).
    """

    id: str
    channels: np.ndarray
    sample_rate_hz: float
    onset_times_s: tuple[float, ...]
    duration_s: float

    def __post_init__(self) -> None:
        if not self.id:
            raise InvalidEpisode("episode id must be non-empty")
        if self.sample_rate_hz <= 0:
            raise InvalidEpisode("sample_rate_hz must be positive")
        if self.duration_s <= 0:
            raise InvalidEpisode("duration_s must be positive")
        ch = _frozen_f64(self.channels)
        if ch.ndim != 2 or ch.shape[0] < 1:
            raise InvalidEpisode(
                f"channels must be [n_channels, n_samples], got shape {ch.shape}"
            )
        expected = round(self.duration_s * self.sample_rate_hz)
        if ch.shape[1] != expected:
            raise InvalidEpisode(
                f"episode {self.id!r}: {ch.shape[1]} samples but duration "
                f"{self.duration_s} s at {self.sample_rate_hz} Hz implies {expected}"
            )
        if not np.all(np.isfinite(ch)):
            raise InvalidEpisode(f"episode {self.id!r} contains non-finite samples")
        onsets = tuple(float(t) for t in self.onset_times_s)
        if any(b <= a for a, b in zip(onsets, onsets[1:])):
            raise InvalidEpisode("onset_times_s must be strictly increasing")
        if any(not (0.0 < t < self.duration_s) for t in onsets):
            raise InvalidEpisode("onset times must lie strictly inside (0, duration)")
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "onset_times_s", onsets)

    @property
    def n_channels(self) -> int:
        return int(self.channels.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.channels.shape[1])

    def with_channels(self, channels: np.ndarray, *, id: str | None = None) -> "Episode":
        """Copy of this episode with replaced channel data (same clock)."""
        return Episode(
            id=id if id is not None else self.id,
            channels=channels,
            sample_rate_hz=self.sample_rate_hz,
            onset_times_s=self.onset_times_s,
            duration_s=self.duration_s,
        )


class Purity(enum.Enum):
    """Provenance of a window's label: trusted (CLEAN) or auto-labeled (NOISY)."""

    CLEAN = "clean"
    NOISY = "noisy"


@dataclass(frozen=True, eq=False)
class WindowPair:
    """A history segment X = [t_start, t_start+h) and its horizon Y = [t_start+h, t_start+h+m).

    x has shape [n_channels, round(h_s * fs)], y has [n_channels, round(m_s * fs)].
    """

    x: np.ndarray
    y: np.ndarray
    t_start_s: float
    h_s: float
    m_s: float
    episode_id: str

    def __post_init__(self) -> None:
        x = _frozen_f64(self.x)
        y = _frozen_f64(self.y)
        if x.ndim != 2 or y.ndim != 2:
            raise ShapeMismatch("window segments must be 2-D [channels, samples]")
        if x.shape[0] != y.shape[0]:
            raise ShapeMismatch(
                f"x has {x.shape[0]} channels but y has {y.shape[0]}"
            )
        if self.h_s <= 0 or self.m_s < 0:
            raise NonPositiveWindow("h_s must be > 0 and m_s >= 0")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def t_end_s(self) -> float:
        return self.t_start_s + self.h_s + self.m_s

    @property
    def n_channels(self) -> int:
        return int(self.x.shape[0])


@dataclass(frozen=True, eq=False)
class LabeledWindow:
    """A window pair plus label state.

    CLEAN windows carry a trusted binary label. NOISY windows normally carry
    none (targets come from the labeling network during training); evaluation
    against generator ground truth may attach one.
    """

    pair: WindowPair
    label: int | None
    purity: Purity

    def __post_init__(self) -> None:
        if self.purity is Purity.CLEAN:
            if self.label not in (0, 1):
                raise InvalidEpisode("clean windows require a binary label")
        else:
            if self.label not in (None, 0, 1):
                raise InvalidEpisode("noisy window labels must be absent or binary")


@dataclass(frozen=True)
class EpisodeMeta:
    """Ground-truth episode metadata carried alongside windowed datasets."""

    onset_times_s: tuple[float, ...]
    duration_s: float
    sample_rate_hz: float


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-channel standardization statistics and their provenance."""

    mean: np.ndarray
    std: np.ndarray
    source_episodes: tuple[str, ...]

    def __post_init__(self) -> None:
        mean = _frozen_f64(self.mean)
        std = _frozen_f64(self.std)
        if mean.ndim != 1 or std.shape != mean.shape:
            raise ShapeMismatch("mean and std must be 1-D arrays of equal length")
        if np.any(std < 0):
            raise ShapeMismatch("std must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def scale(self) -> np.ndarray:
        """Effective divisor per channel; degenerate channels divide by 1."""
        return np.where(self.std >= 1e-12, self.std, 1.0)


@dataclass(eq=False)
class SplitDataset:
    """Windowed views of a cohort: trusted windows and an unlabeled peri-onset set."""

    clean: list[LabeledWindow]
    noisy: list[LabeledWindow]
    normalization_stats: NormStats | None
    grid: tuple[float, float]
    episode_meta: dict[str, EpisodeMeta] = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        h_s, m_s = self.grid
        seen: set[tuple[str, int]] = set()
        for name, group, purity in (
            ("clean", self.clean, Purity.CLEAN),
            ("noisy", self.noisy, Purity.NOISY),
        ):
            for w in group:
                if w.purity is not purity:
                    raise InvalidEpisode(f"{name} set contains a {w.purity.value} window")
                if w.pair.h_s != h_s or w.pair.m_s != m_s:
                    raise ShapeMismatch(
                        f"window grid ({w.pair.h_s}, {w.pair.m_s}) does not match "
                        f"dataset grid ({h_s}, {m_s})"
                    )
                # Key by sample index so float fuzz cannot hide an overlap.
                key = (w.pair.episode_id, round(w.pair.t_start_s * 1_000_000))
                if key in seen:
                    raise InvalidEpisode(
                        f"duplicate window at t_start={w.pair.t_start_s} "
                        f"in episode {w.pair.episode_id!r}"
                    )
                seen.add(key)

    @property
    def n_windows(self) -> int:
        return len(self.clean) + len(self.noisy)


# ---------------------------------------------------------------------------
# Flat parameter vectors


Layout = tuple[tuple[str, tuple[int, ...]], ...]


def _layout_size(layout: Layout) -> int:
    return int(sum(math.prod(shape) for _, shape in layout))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """All parameters of a model as one flat float64 vector plus a layout.

    The layout is an ordered tuple of (name, shape) pairs; flattening is
    row-major in layout order. Arithmetic is elementwise and requires both
    operands to share the layout exactly.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        vals = _frozen_f64(self.values)
        if vals.ndim != 1:
            raise ShapeMismatch("ParamVector values must be 1-D")
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        names = [n for n, _ in layout]
        if len(set(names)) != len(names):
            raise ShapeMismatch("layout names must be unique")
        if vals.size != _layout_size(layout):
            raise ShapeMismatch(
                f"layout describes {_layout_size(layout)} values "
                f"but vector holds {vals.size}"
            )
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "layout", layout)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_named(cls, named: Sequence[tuple[str, np.ndarray]]) -> "ParamVector":
        """Flatten an ordered sequence of (name, array) pairs."""
        layout = tuple((name, tuple(np.shape(a))) for name, a in named)
        if named:
            flat = np.concatenate(
                [np.asarray(a, dtype=np.float64).ravel() for _, a in named]
            )
        else:
            flat = np.zeros(0)
        return cls(flat, layout)

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(_layout_size(layout)), layout)

    # -- views --------------------------------------------------------------

    def unflatten(self) -> dict[str, np.ndarray]:
        """Named read-only views onto the flat vector, reshaped per layout."""
        out: dict[str, np.ndarray] = {}
        off = 0
        for name, shape in self.layout:
            n = math.prod(shape)
            view = self.values[off : off + n].reshape(shape)
            out[name] = view
            off += n
        return out

    def get(self, name: str) -> np.ndarray:
        try:
            return self.unflatten()[name]
        except KeyError:
            raise ShapeMismatch(f"no parameter named {name!r}") from None

    @property
    def size(self) -> int:
        return int(self.values.size)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    # -- arithmetic ----------------------------------------------------------

    def _check_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ShapeMismatch("ParamVector layouts differ")

    def add(self, other: "ParamVector") -> "ParamVector":
        self._check_layout(other)
        return ParamVector(self.values + other.values, self.layout)

    def sub(self, other: "ParamVector") -> "ParamVector":
        self._check_layout(other)
        return ParamVector(self.values - other.values, self.layout)

    def scale(self, c: float) -> "ParamVector":
        return ParamVector(self.values * float(c), self.layout)

    __add__ = add
    __sub__ = sub

    def __mul__(self, c: float) -> "ParamVector":
        return self.scale(c)

    __rmul__ = __mul__

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


# ---------------------------------------------------------------------------
# Window arithmetic


def window_sample_count(duration_s: float, h_s: float, m_s: float, stride_s: float) -> int:
    """Number of (X, Y) windows a recording of the given length admits.

    Windows start at t = 0, stride_s, 2*stride_s, ... and must satisfy
    t + h_s + m_s <= duration_s.
    """
    if stride_s <= 0:
        raise NonPositiveWindow("stride_s must be positive")
    if h_s <= 0 or m_s < 0:
        raise NonPositiveWindow("h_s must be > 0 and m_s >= 0")
    span = duration_s - h_s - m_s
    if span < -GRID_EPS:
        raise NonPositiveWindow(
            f"duration {duration_s} s cannot hold a window of {h_s}+{m_s} s"
        )
    return int(math.floor(max(span, 0.0) / stride_s + GRID_EPS)) + 1


def slice_window(ep: Episode, t_start_s: float, h_s: float, m_s: float) -> WindowPair:
    """Cut the (X, Y) pair starting at t_start_s out of an episode.

    The start time must be non-negative, land exactly on the sample grid,
    and leave room for h_s + m_s seconds before the recording ends.
    """
    if h_s <= 0 or m_s < 0:
        raise NonPositiveWindow("h_s must be > 0 and m_s >= 0")
    if t_start_s < 0:
        raise OutOfRange(f"t_start {t_start_s} s is negative")
    fs = ep.sample_rate_hz
    i0 = time_to_index(t_start_s, fs)
    nh = int(round(h_s * fs))
    nm = int(round(m_s * fs))
    if i0 + nh + nm > ep.n_samples:
        raise OutOfRange(
            f"window [{t_start_s}, {t_start_s + h_s + m_s}) s exceeds episode "
            f"{ep.id!r} of {ep.duration_s} s"
        )
    x = ep.channels[:, i0 : i0 + nh]
    y = ep.channels[:, i0 + nh : i0 + nh + nm]
    return WindowPair(
        x=x, y=y, t_start_s=float(t_start_s), h_s=float(h_s), m_s=float(m_s),
        episode_id=ep.id,
    )


# ---------------------------------------------------------------------------
# Episode persistence: one CSV per episode plus a JSON sidecar


def _channel_names(n: int) -> list[str]:
    width = max(2, len(str(n)))
    return [f"ch{i + 1:0{width}d}" for i in range(n)]


def save_episode(ep: Episode, out_dir: str | Path) -> tuple[Path, Path]:
    """Write `<id>.csv` (header t,ch01,...) and `<id>.meta.json` into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{ep.id}.csv"
    meta_path = out / f"{ep.id}.meta.json"
    names = _channel_names(ep.n_channels)
    fs = ep.sample_rate_hz
    cols = ep.channels.T  # [n_samples, n_channels]
    with csv_path.open("w", newline="") as f:
        f.write("t," + ",".join(names) + "\n")
        for i in range(cols.shape[0]):
            t = i / fs
            f.write(f"{t!r}," + ",".join(repr(float(v)) for v in cols[i]) + "\n")
    meta = {
        "id": ep.id,
        "sample_rate_hz": ep.sample_rate_hz,
        "duration_s": ep.duration_s,
        "onset_times_s": list(ep.onset_times_s),
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return csv_path, meta_path


def load_episode(path: str | Path) -> Episode:
    """Load an episode from its CSV path (the JSON sidecar must sit next to it)."""
    csv_path = Path(path)
    if csv_path.is_dir():
        raise FormatError(f"{csv_path} is a directory; pass the episode CSV path")
    if not csv_path.exists():
        raise FormatError(f"episode file {csv_path} does not exist")
    if not csv_path.name.endswith(".csv"):
        raise FormatError(f"{csv_path} is not a .csv episode file")
    meta_path = csv_path.parent / (csv_path.name[: -len(".csv")] + ".meta.json")
    if not meta_path.exists():
        raise FormatError(f"missing sidecar {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"sidecar {meta_path} is not valid JSON: {e}") from e
    for key in ("id", "sample_rate_hz", "duration_s", "onset_times_s"):
        if key not in meta:
            raise FormatError(f"sidecar {meta_path} lacks field {key!r}")
    with csv_path.open("r", newline="") as f:
        header = f.readline().strip().split(",")
        if not header or header[0] != "t":
            raise FormatError(f"{csv_path}: first column must be 't'")
        n_ch = len(header) - 1
        if n_ch < 1:
            raise FormatError(f"{csv_path}: no channel columns")
        rows = []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != n_ch + 1:
                raise FormatError(
                    f"{csv_path}:{lineno}: expected {n_ch + 1} fields, got {len(parts)}"
                )
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as e:
                raise FormatError(f"{csv_path}:{lineno}: {e}") from e
    channels = np.asarray(rows, dtype=np.float64).T
    try:
        return Episode(
            id=str(meta["id"]),
            channels=channels,
            sample_rate_hz=float(meta["sample_rate_hz"]),
            onset_times_s=tuple(float(t) for t in meta["onset_times_s"]),
            duration_s=float(meta["duration_s"]),
        )
    except InvalidEpisode as e:
        raise FormatError(f"{csv_path}: {e}") from e


def load_cohort(episode_dir: str | Path) -> list["Episode"]:
    """Load every `<id>.csv` + sidecar in a directory, sorted by id."""
    d = Path(episode_dir)
    if not d.is_dir():
        raise FormatError(f"{d} is not a directory")
    eps = [load_episode(p) for p in sorted(d.glob("*.csv"))]
    if not eps:
        raise FormatError(f"no episode CSV files found in {d}")
    return eps
