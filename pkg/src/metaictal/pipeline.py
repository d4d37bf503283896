"""Dataset assembly: standardization, peri-onset partitioning, splits, and disk I/O.

The partition walks a stride-aligned grid of window *end* times anchored at
each onset. Windows whose end falls inside [onset - halfwidth, onset + halfwidth)
are the unlabeled noisy set; trusted windows are harvested nearest-first on
both sides of the zone (earlier side labeled 0, later side labeled 1).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    Episode,
    EpisodeMeta,
    LabeledWindow,
    NormStats,
    Purity,
    SplitDataset,
    WindowPair,
    slice_window,
    time_to_index,
)
from .errors import (
    FormatError,
    InsufficientData,
    InvalidConfig,
    ShapeMismatch,
    UnknownEpisode,
)

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PartitionOptions:
    """Geometry of the peri-onset partition."""

    stride_s: float = 0.5
    noisy_halfwidth_s: float = 10.0
    clean_per_side: int = 40

    def __post_init__(self) -> None:
        if self.stride_s <= 0:
            raise InvalidConfig("stride_s must be positive")
        if self.noisy_halfwidth_s <= 0:
            raise InvalidConfig("noisy_halfwidth_s must be positive")
        ratio = self.noisy_halfwidth_s / self.stride_s
        if abs(ratio - round(ratio)) > 1e-9:
            raise InvalidConfig("noisy_halfwidth_s must be a multiple of stride_s")
        if self.clean_per_side < 1:
            raise InvalidConfig("clean_per_side must be >= 1")

    @property
    def half_steps(self) -> int:
        return round(self.noisy_halfwidth_s / self.stride_s)


# ---------------------------------------------------------------------------
# Standardization


def compute_stats(episodes: Sequence[Episode]) -> NormStats:
    """Per-channel mean/std pooled over the given episodes."""
    if not episodes:
        raise InsufficientData("cannot compute statistics from zero episodes")
    n_ch = episodes[0].n_channels
    for ep in episodes:
        if ep.n_channels != n_ch:
            raise ShapeMismatch(
                f"episode {ep.id!r} has {ep.n_channels} channels, expected {n_ch}"
            )
    pooled = np.concatenate([ep.channels for ep in episodes], axis=1)
    return NormStats(
        mean=pooled.mean(axis=1),
        std=pooled.std(axis=1),
        source_episodes=tuple(ep.id for ep in episodes),
    )


def apply_stats(ep: Episode, stats: NormStats) -> Episode:
    """Standardize one episode with externally supplied statistics.

    Channels whose std is below 1e-12 are centered but not rescaled.
    """
    if stats.mean.shape[0] != ep.n_channels:
        raise ShapeMismatch(
            f"stats cover {stats.mean.shape[0]} channels, episode has {ep.n_channels}"
        )
    scaled = (ep.channels - stats.mean[:, None]) / stats.scale()[:, None]
    return ep.with_channels(scaled)


def normalize(
    episodes: Sequence[Episode], stats_from: Sequence[str] | None = None
) -> tuple[list[Episode], NormStats]:
    """Standardize all episodes using statistics pooled from `stats_from` ids
    (default: all of them)."""
    by_id = {ep.id: ep for ep in episodes}
    if len(by_id) != len(episodes):
        raise InvalidConfig("episode ids must be unique")
    if stats_from is None:
        stats_from = [ep.id for ep in episodes]
    missing = [i for i in stats_from if i not in by_id]
    if missing:
        raise UnknownEpisode(f"stats_from references unknown episodes: {missing}")
    if not stats_from:
        raise InsufficientData("stats_from must name at least one episode")
    stats = compute_stats([by_id[i] for i in stats_from])
    return [apply_stats(ep, stats) for ep in episodes], stats


# ---------------------------------------------------------------------------
# Peri-onset partition


def _zone_bounds(onset: float, opts: PartitionOptions) -> tuple[float, float]:
    return onset - opts.noisy_halfwidth_s, onset + opts.noisy_halfwidth_s


def _in_any_zone(t_end: float, zones: Sequence[tuple[float, float]], eps: float) -> bool:
    # Zones are half-open [lo, hi).
    return any(lo - eps <= t_end < hi - eps for lo, hi in zones)


def partition(
    ep: Episode,
    h_s: float,
    m_s: float,
    opts: PartitionOptions = PartitionOptions(),
) -> tuple[list[LabeledWindow], list[LabeledWindow]]:
    """Split one episode into (clean, noisy) window sets around its onsets.

    Noisy windows are the 2 * halfwidth / stride grid positions whose end
    time falls in [onset - halfwidth, onset + halfwidth); they carry no
    label. Clean windows are taken nearest-first outside the zone:
    clean_per_side ending strictly before it (label 0, the transition is
    not yet imminent) and clean_per_side ending at or after its close
    (label 1). Raises InsufficientData when a side cannot be filled.
    """
    if not ep.onset_times_s:
        raise InsufficientData(f"episode {ep.id!r} has no onset to anchor the zone")
    stride = opts.stride_s
    eps = stride * 1e-6
    zones = [_zone_bounds(t, opts) for t in ep.onset_times_s]
    width = h_s + m_s

    def try_slice(t_end: float) -> WindowPair | None:
        t_start = t_end - width
        if t_start < -eps or t_end > ep.duration_s + eps:
            return None
        return slice_window(ep, max(t_start, 0.0), h_s, m_s)

    def key_of(pair: WindowPair) -> int:
        return time_to_index(pair.t_start_s, ep.sample_rate_hz)

    taken: dict[int, LabeledWindow] = {}
    noisy_keys: set[int] = set()

    # Noisy zone first: those grid slots are reserved regardless of labels.
    for onset in ep.onset_times_s:
        for j in range(-opts.half_steps, opts.half_steps):
            t_end = onset + j * stride
            pair = try_slice(t_end)
            if pair is None:
                continue
            k = key_of(pair)
            if k in taken:
                continue
            taken[k] = LabeledWindow(pair=pair, label=None, purity=Purity.NOISY)
            noisy_keys.add(k)

    # Clean windows, nearest-first per side, skipping anything inside a zone.
    for onset in ep.onset_times_s:
        lo, hi = _zone_bounds(onset, opts)
        for label, start, step in ((0, lo - stride, -stride), (1, hi, stride)):
            got = 0
            t_end = start
            while got < opts.clean_per_side:
                if t_end < width - eps or t_end > ep.duration_s + eps:
                    raise InsufficientData(
                        f"episode {ep.id!r}: only {got} of {opts.clean_per_side} "
                        f"label-{label} windows available beside onset {onset} s"
                    )
                if not _in_any_zone(t_end, zones, eps):
                    pair = try_slice(t_end)
                    if pair is None:
                        raise InsufficientData(
                            f"episode {ep.id!r}: only {got} of {opts.clean_per_side} "
                            f"label-{label} windows available beside onset {onset} s"
                        )
                    k = key_of(pair)
                    if k not in taken:
                        taken[k] = LabeledWindow(pair=pair, label=label, purity=Purity.CLEAN)
                        got += 1
                    elif k in noisy_keys:
                        # A neighbouring onset's zone owns this slot; skip it.
                        pass
                t_end += step

    windows = sorted(taken.values(), key=lambda w: w.pair.t_start_s)
    clean = [w for w in windows if w.purity is Purity.CLEAN]
    noisy = [w for w in windows if w.purity is Purity.NOISY]
    return clean, noisy


def split_train_test(
    cohort: Sequence[Episode],
    test_episode_id: str,
    grid: tuple[float, float],
    opts: PartitionOptions = PartitionOptions(),
) -> tuple[SplitDataset, SplitDataset]:
    """Hold one episode out, standardize with training statistics only, partition.

    Both returned datasets carry the training-set statistics and per-episode
    ground-truth metadata (onsets, duration, sample rate).
    """
    ids = [ep.id for ep in cohort]
    if len(set(ids)) != len(ids):
        raise InvalidConfig("cohort episode ids must be unique")
    if test_episode_id not in ids:
        raise UnknownEpisode(
            f"test episode {test_episode_id!r} not in cohort {sorted(ids)}"
        )
    if len(cohort) < 2:
        raise InsufficientData("cohort must contain at least 2 episodes")
    train_ids = [i for i in ids if i != test_episode_id]
    normalized, stats = normalize(cohort, stats_from=train_ids)
    h_s, m_s = grid

    def build(episodes: Iterable[Episode]) -> SplitDataset:
        clean: list[LabeledWindow] = []
        noisy: list[LabeledWindow] = []
        meta: dict[str, EpisodeMeta] = {}
        for ep in episodes:
            c, n = partition(ep, h_s, m_s, opts)
            clean.extend(c)
            noisy.extend(n)
            meta[ep.id] = EpisodeMeta(
                onset_times_s=ep.onset_times_s,
                duration_s=ep.duration_s,
                sample_rate_hz=ep.sample_rate_hz,
            )
        return SplitDataset(
            clean=clean,
            noisy=noisy,
            normalization_stats=stats,
            grid=(float(h_s), float(m_s)),
            episode_meta=meta,
        )

    train = build(ep for ep in normalized if ep.id != test_episode_id)
    test = build(ep for ep in normalized if ep.id == test_episode_id)
    return train, test


# ---------------------------------------------------------------------------
# Dataset persistence
#
# A dataset directory holds:
#   windows.csv   one row per window: position, purity, label
#   tensors.bin   row-major float64 little-endian X then Y per window
#   tensors.json  shapes and dtype of the binary payload
#   stats.json    normalization statistics and their source episodes
#   meta.json     grid and per-episode ground-truth metadata


def save_dataset(ds: SplitDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    windows = list(ds.clean) + list(ds.noisy)
    if windows:
        n_ch = windows[0].pair.n_channels
        xs_cols = windows[0].pair.x.shape[1]
        ys_cols = windows[0].pair.y.shape[1]
    else:
        n_ch = xs_cols = ys_cols = 0
    lines = ["episode_id,t_start_s,purity,label,h_s,m_s"]
    payload = bytearray()
    for w in windows:
        p = w.pair
        if p.x.shape != (n_ch, xs_cols) or p.y.shape != (n_ch, ys_cols):
            raise ShapeMismatch("all windows in a dataset must share one shape")
        label = "" if w.label is None else str(int(w.label))
        lines.append(
            f"{p.episode_id},{p.t_start_s!r},{w.purity.value},{label},{p.h_s!r},{p.m_s!r}"
        )
        payload += p.x.astype("<f8").tobytes(order="C")
        payload += p.y.astype("<f8").tobytes(order="C")
    (out / "windows.csv").write_text("\n".join(lines) + "\n")
    (out / "tensors.bin").write_bytes(bytes(payload))
    (out / "tensors.json").write_text(
        json.dumps(
            {
                "format_version": DATASET_FORMAT_VERSION,
                "n_windows": len(windows),
                "n_channels": n_ch,
                "x_samples": xs_cols,
                "y_samples": ys_cols,
                "dtype": "<f8",
            },
            indent=2,
        )
        + "\n"
    )
    stats = ds.normalization_stats
    (out / "stats.json").write_text(
        json.dumps(
            None
            if stats is None
            else {
                "mean": list(stats.mean),
                "std": list(stats.std),
                "source_episodes": list(stats.source_episodes),
            },
            indent=2,
        )
        + "\n"
    )
    (out / "meta.json").write_text(
        json.dumps(
            {
                "format_version": DATASET_FORMAT_VERSION,
                "grid": {"h_s": ds.grid[0], "m_s": ds.grid[1]},
                "episodes": {
                    eid: {
                        "onset_times_s": list(m.onset_times_s),
                        "duration_s": m.duration_s,
                        "sample_rate_hz": m.sample_rate_hz,
                    }
                    for eid, m in sorted(ds.episode_meta.items())
                },
            },
            indent=2,
        )
        + "\n"
    )
    return out


def _read_json(path: Path) -> object:
    if not path.exists():
        raise FormatError(f"missing dataset file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e


def load_dataset(in_dir: str | Path) -> SplitDataset:
    """Inverse of save_dataset; validates sizes and the format version."""
    d = Path(in_dir)
    if not d.is_dir():
        raise FormatError(f"{d} is not a dataset directory")
    tensor_meta = _read_json(d / "tensors.json")
    if not isinstance(tensor_meta, dict):
        raise FormatError(f"{d}/tensors.json must hold an object")
    if tensor_meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(
            f"unsupported dataset format version {tensor_meta.get('format_version')!r}"
        )
    if tensor_meta.get("dtype") != "<f8":
        raise FormatError(f"unsupported tensor dtype {tensor_meta.get('dtype')!r}")
    n_windows = int(tensor_meta["n_windows"])
    n_ch = int(tensor_meta["n_channels"])
    xs_cols = int(tensor_meta["x_samples"])
    ys_cols = int(tensor_meta["y_samples"])
    per_window = n_ch * (xs_cols + ys_cols)

    blob = (d / "tensors.bin").read_bytes() if (d / "tensors.bin").exists() else None
    if blob is None:
        raise FormatError(f"missing dataset file {d / 'tensors.bin'}")
    expected_bytes = n_windows * per_window * 8
    if len(blob) != expected_bytes:
        raise FormatError(
            f"{d}/tensors.bin holds {len(blob)} bytes, expected {expected_bytes}"
        )
    flat = np.frombuffer(blob, dtype="<f8")

    csv_path = d / "windows.csv"
    if not csv_path.exists():
        raise FormatError(f"missing dataset file {csv_path}")
    rows = csv_path.read_text().splitlines()
    if not rows or rows[0] != "episode_id,t_start_s,purity,label,h_s,m_s":
        raise FormatError(f"{csv_path}: unexpected header")
    body = [r for r in rows[1:] if r]
    if len(body) != n_windows:
        raise FormatError(
            f"{csv_path} lists {len(body)} windows, tensors.json says {n_windows}"
        )

    meta_doc = _read_json(d / "meta.json")
    if not isinstance(meta_doc, dict) or "grid" not in meta_doc:
        raise FormatError(f"{d}/meta.json lacks a grid")
    grid = (float(meta_doc["grid"]["h_s"]), float(meta_doc["grid"]["m_s"]))
    episode_meta = {
        str(eid): EpisodeMeta(
            onset_times_s=tuple(float(t) for t in m["onset_times_s"]),
            duration_s=float(m["duration_s"]),
            sample_rate_hz=float(m["sample_rate_hz"]),
        )
        for eid, m in dict(meta_doc.get("episodes", {})).items()
    }

    stats_doc = _read_json(d / "stats.json")
    stats = None
    if stats_doc is not None:
        if not isinstance(stats_doc, dict):
            raise FormatError(f"{d}/stats.json must hold an object or null")
        stats = NormStats(
            mean=np.asarray(stats_doc["mean"], dtype=np.float64),
            std=np.asarray(stats_doc["std"], dtype=np.float64),
            source_episodes=tuple(str(s) for s in stats_doc["source_episodes"]),
        )

    clean: list[LabeledWindow] = []
    noisy: list[LabeledWindow] = []
    for i, row in enumerate(body):
        parts = row.split(",")
        if len(parts) != 6:
            raise FormatError(f"{csv_path}: row {i + 2} has {len(parts)} fields")
        eid, t_start, purity_s, label_s, h_s, m_s = parts
        off = i * per_window
        x = flat[off : off + n_ch * xs_cols].reshape(n_ch, xs_cols)
        y = flat[off + n_ch * xs_cols : off + per_window].reshape(n_ch, ys_cols)
        try:
            pair = WindowPair(
                x=x, y=y, t_start_s=float(t_start), h_s=float(h_s), m_s=float(m_s),
                episode_id=eid,
            )
            purity = Purity(purity_s)
        except (ValueError, KeyError) as e:
            raise FormatError(f"{csv_path}: row {i + 2}: {e}") from e
        label = None if label_s == "" else int(label_s)
        w = LabeledWindow(pair=pair, label=label, purity=purity)
        (clean if purity is Purity.CLEAN else noisy).append(w)

    return SplitDataset(
        clean=clean,
        noisy=noisy,
        normalization_stats=stats,
        grid=grid,
        episode_meta=episode_meta,
    )
