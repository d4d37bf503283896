"""End-to-end study orchestration.

A study runs the full replication loop inside one run directory:

1. generate a synthetic cohort plus extra held-out test episodes,
2. for every requested (h, m) grid cell train the configured models
   (label-free baselines on trusted windows only, the meta-labeled
   bilevel model on trusted + peri-onset windows) across several seeds,
3. evaluate: noisy-zone accuracy grid, ensemble probability and variance
   indicator traces on held-out episodes, threshold-crossing lead times,
4. write a manifest with the config hash and artifact checksums.

Seeding is deterministic and cell-local: cell k of the full grid
enumeration draws its training seeds from `config seed + k`, so cells can
be recomputed independently (and in any subset) without changing results.

Layout of a run directory:

    effective_config.yaml
    episodes/                cohort + extra test episodes (CSV + sidecar)
    episodes/cohort.json     which ids form the cohort vs extra test set
    checkpoints/stats.json   training-set standardization statistics
    checkpoints/h20_m5/baseline-lstm/seed0/{main/,history.csv}
    checkpoints/h20_m5/meta/seed0/{main/,meta/,history.csv}
    results/                 accuracy_grid.csv, traces, leadtime.csv, ...
    manifest.json
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import __version__
from .config import MODEL_NAMES, StudyConfig, dump_config, validate_config
from .core import Episode, NormStats, load_cohort, save_episode
from .errors import (
    EmptySet,
    FormatError,
    InvalidConfig,
    MissingCheckpoint,
    UnknownEpisode,
)
from .eval import (
    GridTable,
    IndicatorTrace,
    LeadRow,
    accuracy_grid,
    ensemble_indicator,
    lead_time_comparison,
    onset_centered_trace,
    probability_indicator,
    variance_indicator,
    write_grid_csv,
    write_leadtime_csv,
    write_trace_csv,
)
from .nets import (
    Architecture,
    MainNetwork,
    MetaNetwork,
    load_main_network,
    load_meta_network,
    save_main_network,
    save_meta_network,
)
from .pipeline import apply_stats, split_train_test
from .synthgen import generate_cohort, generate_episode
from .trainer import save_history, train_baseline, train_meta

EPISODE_DIR = "episodes"
CHECKPOINT_DIR = "checkpoints"
RESULTS_DIR = "results"
MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "effective_config.yaml"
COHORT_DOC = "cohort.json"
STATS_NAME = "stats.json"

_MODEL_INDEX = {name: i for i, name in enumerate(MODEL_NAMES)}
_CELL_DIR_RE = re.compile(r"^h([0-9.]+)_m([0-9.]+)$")

Log = Callable[[str], None]


def _noop(_: str) -> None:
    pass


# ---------------------------------------------------------------------------
# Seeding


def cell_index(cfg: StudyConfig, cell: tuple[float, float]) -> int:
    """Index of a cell in the full h-major grid enumeration."""
    try:
        return cfg.cells.index(cell)
    except ValueError:
        raise InvalidConfig(
            f"cell h={cell[0]:g}, m={cell[1]:g} is not on the configured grid"
        ) from None


def training_seed(cfg: StudyConfig, cell: tuple[float, float], model: str, k: int) -> int:
    """Deterministic seed for one (cell, model, repetition) training run.

    Model indices come from the fixed model-name order, so dropping a model
    from the config never reseeds the remaining ones.
    """
    if model not in _MODEL_INDEX:
        raise InvalidConfig(f"unknown model {model!r}; expected one of {MODEL_NAMES}")
    base = cfg.seed + cell_index(cfg, cell)
    return base * 10_000 + _MODEL_INDEX[model] * 1_000 + k


def _net_seed(train_seed: int) -> int:
    return train_seed + 500_000


# ---------------------------------------------------------------------------
# Run-directory plumbing


def cell_dir_name(cell: tuple[float, float]) -> str:
    return f"h{cell[0]:g}_m{cell[1]:g}"


def parse_cell_dir(name: str) -> tuple[float, float] | None:
    m = _CELL_DIR_RE.match(name)
    if m is None:
        return None
    return (float(m.group(1)), float(m.group(2)))


def make_run_dir(out_root: str | Path, run_name: str | None = None) -> Path:
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    if run_name is None:
        run_name = datetime.now(timezone.utc).strftime("run-%Y%m%d-%H%M%S")
    candidate = root / run_name
    suffix = 2
    while candidate.exists():
        candidate = root / f"{run_name}-{suffix}"
        suffix += 1
    candidate.mkdir()
    return candidate


def _save_stats(stats: NormStats, path: Path) -> None:
    doc = {
        "mean": [float(v) for v in stats.mean],
        "std": [float(v) for v in stats.std],
        "source_episodes": list(stats.source_episodes),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def load_stats(path: str | Path) -> NormStats:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"no standardization statistics at {p}")
    try:
        doc = json.loads(p.read_text())
        return NormStats(
            mean=np.asarray(doc["mean"], dtype=np.float64),
            std=np.asarray(doc["std"], dtype=np.float64),
            source_episodes=tuple(doc["source_episodes"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{p} is not a valid statistics file: {e}") from e


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(doc: Mapping) -> str:
    import yaml

    return hashlib.sha256(
        yaml.safe_dump(dict(doc), sort_keys=True).encode()
    ).hexdigest()


# ---------------------------------------------------------------------------
# Phase 1: data


def generate_study_episodes(cfg: StudyConfig) -> tuple[list[Episode], list[Episode]]:
    """Cohort episodes plus extra held-out test episodes.

    Extra episodes draw seeds from a disjoint block (seed_base + 1000 + j)
    so growing the cohort never changes existing test episodes.
    """
    cohort = generate_cohort(cfg.synth, cfg.n_episodes, seed_base=cfg.seed_base)
    extra = []
    for j in range(cfg.extra_test_episodes):
        scfg = dataclasses.replace(cfg.synth, seed=cfg.seed_base + 1000 + j)
        extra.append(generate_episode(scfg, episode_id=f"test-{j:03d}"))
    return cohort, extra


def _write_episodes(run: Path, cohort: Sequence[Episode], extra: Sequence[Episode]) -> None:
    ep_dir = run / EPISODE_DIR
    for ep in list(cohort) + list(extra):
        save_episode(ep, ep_dir)
    doc = {
        "cohort": [ep.id for ep in cohort],
        "extra_test": [ep.id for ep in extra],
    }
    (ep_dir / COHORT_DOC).write_text(json.dumps(doc, indent=2) + "\n")


def _read_episode_split(run: Path) -> tuple[list[Episode], list[Episode]]:
    ep_dir = run / EPISODE_DIR
    doc_path = ep_dir / COHORT_DOC
    if not doc_path.exists():
        raise FormatError(f"{doc_path} is missing; not a study run directory?")
    try:
        doc = json.loads(doc_path.read_text())
        cohort_ids = list(doc["cohort"])
        extra_ids = list(doc["extra_test"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{doc_path} is not a valid cohort listing: {e}") from e
    by_id = {ep.id: ep for ep in load_cohort(ep_dir)}
    missing = [i for i in cohort_ids + extra_ids if i not in by_id]
    if missing:
        raise FormatError(f"episodes listed in {doc_path} are absent: {missing}")
    return [by_id[i] for i in cohort_ids], [by_id[i] for i in extra_ids]


# ---------------------------------------------------------------------------
# Phase 2: training


def _grid_samples(cfg: StudyConfig, cell: tuple[float, float]) -> tuple[int, int]:
    fs = cfg.synth.sample_rate_hz
    return round(cell[0] * fs), round(cell[1] * fs)


def train_cell_model(
    cfg: StudyConfig,
    cell: tuple[float, float],
    model: str,
    k: int,
    train_ds,
    out_dir: Path,
) -> list[str]:
    """Train one model repetition and write its checkpoint; returns warnings."""
    seed = training_seed(cfg, cell, model, k)
    tc = dataclasses.replace(cfg.trainer, seed=seed, grid=cell)
    nx, ny = _grid_samples(cfg, cell)
    n_ch = cfg.synth.n_channels
    warnings: list[str] = []

    if model in ("baseline-lstm", "baseline-resnet"):
        arch = Architecture.LSTM if model == "baseline-lstm" else Architecture.RESNET1D
        net = MainNetwork.build(arch, n_ch, nx, cfg.main_hyper, seed=_net_seed(seed))
        net, hist = train_baseline(net, train_ds.clean, tc)
        save_main_network(net, out_dir / "main")
    elif model == "meta":
        main = MainNetwork.build(
            Architecture.RESNET1D, n_ch, nx, cfg.main_hyper, seed=_net_seed(seed)
        )
        meta = MetaNetwork.build(n_ch, nx, ny, cfg.meta_hyper, seed=_net_seed(seed) + 1)
        main, meta, hist = train_meta(main, meta, train_ds, tc)
        save_main_network(main, out_dir / "main")
        save_meta_network(meta, out_dir / "meta")
    else:
        raise InvalidConfig(f"unknown model {model!r}")

    save_history(hist, out_dir / "history.csv")
    if hist.aborted:
        warnings.append(
            f"{model} h={cell[0]:g} m={cell[1]:g} seed {k}: training aborted "
            f"({hist.reason}); best checkpoint kept"
        )
    return warnings


def _load_cell_model(run: Path, cell: tuple[float, float], model: str, k: int):
    """Main network of one checkpoint, or None when it was never trained."""
    d = run / CHECKPOINT_DIR / cell_dir_name(cell) / model / f"seed{k}"
    if not d.exists():
        return None
    try:
        return load_main_network(d / "main")
    except (FormatError, MissingCheckpoint) as e:
        raise FormatError(f"checkpoint {d} is unreadable: {e}") from e


# ---------------------------------------------------------------------------
# Phase 3: evaluation


def _write_leadtime_all(
    rows_by_episode: Mapping[str, Sequence[LeadRow]], path: Path
) -> None:
    def fmt(x: float | None) -> str:
        return "" if x is None else f"{x:.12g}"

    lines = ["episode,quantile,lead_prob_s,lead_var_s,advantage_s"]
    for ep_id in rows_by_episode:
        for r in rows_by_episode[ep_id]:
            lines.append(
                f"{ep_id},{r.quantile:g},{fmt(r.lead_prob_s)},"
                f"{fmt(r.lead_var_s)},{fmt(r.advantage_s)}"
            )
    path.write_text("\n".join(lines) + "\n")


def _mean_tables(tables: Sequence[GridTable]) -> GridTable:
    """Seed-mean of per-seed accuracy tables; a cell is None unless every
    seed produced it."""
    first = tables[0]
    cells: dict[tuple[float, float, str], float | None] = {}
    for key in first.cells:
        vals = [t.cells.get(key) for t in tables]
        cells[key] = None if any(v is None for v in vals) else float(np.mean(vals))
    warnings = list(dict.fromkeys(w for t in tables for w in t.warnings))
    return GridTable(
        m_values=first.m_values,
        h_values=first.h_values,
        model_names=first.model_names,
        cells=cells,
        warnings=warnings,
    )


def evaluate_run(run_dir: str | Path, out_dir: str | Path | None = None, log: Log = _noop) -> dict:
    """Recompute every evaluation artifact of a run from its checkpoints.

    Pure function of the run directory contents: re-running it (or running
    it into a different output directory) reproduces the CSV files byte for
    byte. Returns a summary dict with the grid table, per-episode lead rows
    and any warnings.
    """
    run = Path(run_dir)
    cfg_path = run / CONFIG_NAME
    if not cfg_path.exists():
        raise FormatError(f"{run} has no {CONFIG_NAME}; not a study run directory")
    import yaml

    cfg = validate_config(yaml.safe_load(cfg_path.read_text()))
    torch.set_num_threads(cfg.torch_threads)
    out = Path(out_dir) if out_dir is not None else run / RESULTS_DIR
    out.mkdir(parents=True, exist_ok=True)

    cohort, extra = _read_episode_split(run)
    cohort_ids = [ep.id for ep in cohort]
    if cfg.test_episode not in cohort_ids:
        raise UnknownEpisode(
            f"configured test episode {cfg.test_episode!r} not in cohort {cohort_ids}"
        )

    ckpt_root = run / CHECKPOINT_DIR
    cells = sorted(
        c
        for c in (parse_cell_dir(p.name) for p in ckpt_root.iterdir() if p.is_dir())
        if c is not None
    )
    if not cells:
        raise EmptySet(f"{ckpt_root} holds no trained grid cells")

    log(f"evaluating {len(cells)} cells x {len(cfg.models)} models x {cfg.n_seeds} seeds")
    test_ds = {
        cell: split_train_test(cohort, cfg.test_episode, cell, cfg.partition)[1]
        for cell in cells
    }
    seed_tables = []
    for k in range(cfg.n_seeds):
        models_k = {
            name: {cell: _load_cell_model(run, cell, name, k) for cell in cells}
            for name in cfg.models
        }
        seed_tables.append(accuracy_grid(models_k, test_ds))
    table = _mean_tables(seed_tables)
    # Report the full configured grid even when only a subset was trained.
    full = GridTable(
        m_values=sorted(cfg.grid_m),
        h_values=sorted(cfg.grid_h),
        model_names=list(cfg.models),
        cells={
            (m, h, name): table.cells.get((m, h, name))
            for m in cfg.grid_m
            for h in cfg.grid_h
            for name in cfg.models
        },
        warnings=table.warnings,
    )
    write_grid_csv(full, out / "accuracy_grid.csv")

    by_seed_lines = ["model,h_s,m_s,seed,accuracy"]
    for name in cfg.models:
        for h, m in cells:
            for k, t in enumerate(seed_tables):
                acc = t.cells.get((m, h, name))
                if acc is not None:
                    by_seed_lines.append(f"{name},{h:g},{m:g},{k},{acc:.6f}")
    (out / "accuracy_by_seed.csv").write_text("\n".join(by_seed_lines) + "\n")

    warnings = list(full.warnings)
    leads: dict[str, list[LeadRow]] = {}
    test_episodes = [ep for ep in cohort if ep.id == cfg.test_episode] + list(extra)

    if cfg.trace_cell not in cells:
        warnings.append(
            f"trace cell h={cfg.trace_cell[0]:g}, m={cfg.trace_cell[1]:g} was not "
            f"trained; indicator traces skipped"
        )
    elif "meta" not in cfg.models:
        warnings.append("model 'meta' not in study; indicator traces skipped")
    else:
        stats = load_stats(ckpt_root / STATS_NAME)
        h_s = cfg.trace_cell[0]
        nets = []
        for k in range(cfg.n_seeds):
            net = _load_cell_model(run, cfg.trace_cell, "meta", k)
            if net is None:
                warnings.append(f"meta seed {k} missing at trace cell; excluded from ensemble")
            else:
                nets.append(net)
        if not nets:
            raise MissingCheckpoint("no meta checkpoints available at the trace cell")
        for ep in test_episodes:
            ep_n = apply_stats(ep, stats)
            ens = ensemble_indicator(
                [probability_indicator(net, ep_n, h_s, cfg.partition.stride_s) for net in nets]
            )
            var = variance_indicator(ep_n, cfg.variance_window_s, cfg.partition.stride_s)
            write_trace_csv(ens, out / f"trace_{ep.id}_meta.csv")
            write_trace_csv(var, out / f"trace_{ep.id}_variance.csv")
            onset = ep.onset_times_s[0]
            write_trace_csv(
                onset_centered_trace(ens, onset), out / f"trace_centered_{ep.id}_meta.csv"
            )
            leads[ep.id] = lead_time_comparison(
                ens, var, onset, cfg.quantiles, baseline_fraction=cfg.baseline_fraction
            )
            log(f"indicators for {ep.id}: {len(ens)} trace points")
        write_leadtime_csv(leads[cfg.test_episode], out / "leadtime.csv")
        _write_leadtime_all(leads, out / "leadtime_all.csv")

    return {"grid": full, "leads": leads, "warnings": warnings, "out_dir": out}


# ---------------------------------------------------------------------------
# Full study


def run_study(
    doc: Mapping,
    out_root: str | Path,
    cells: Sequence[tuple[float, float]] | None = None,
    run_name: str | None = None,
    log: Log = _noop,
) -> Path:
    """Run a complete study from a config mapping; returns the run directory."""
    cfg = validate_config(doc)
    torch.set_num_threads(cfg.torch_threads)
    selected = list(cells) if cells is not None else cfg.cells
    for cell in selected:
        cell_index(cfg, cell)  # reject off-grid cells before any compute
    t0 = time.monotonic()

    run = make_run_dir(out_root, run_name)
    log(f"run directory: {run}")
    dump_config(cfg.raw, run / CONFIG_NAME)

    cohort, extra = generate_study_episodes(cfg)
    cohort_ids = [ep.id for ep in cohort]
    if cfg.test_episode not in cohort_ids:
        raise InvalidConfig(
            f"cohort.test_episode {cfg.test_episode!r} is not generated by this "
            f"config (cohort ids: {cohort_ids})"
        )
    _write_episodes(run, cohort, extra)
    t_data = time.monotonic()
    log(f"generated {len(cohort)} cohort + {len(extra)} test episodes")

    warnings: list[str] = []
    seeds_used: dict[str, dict[str, list[int]]] = {}
    stats_written = False
    for cell in selected:
        train_ds, _ = split_train_test(cohort, cfg.test_episode, cell, cfg.partition)
        if not stats_written:
            _save_stats(
                train_ds.normalization_stats, run / CHECKPOINT_DIR / STATS_NAME
            )
            stats_written = True
        for model in cfg.models:
            cell_seeds = []
            for k in range(cfg.n_seeds):
                out_dir = run / CHECKPOINT_DIR / cell_dir_name(cell) / model / f"seed{k}"
                out_dir.mkdir(parents=True, exist_ok=True)
                tic = time.monotonic()
                warnings.extend(train_cell_model(cfg, cell, model, k, train_ds, out_dir))
                cell_seeds.append(training_seed(cfg, cell, model, k))
                log(
                    f"trained {model} h={cell[0]:g} m={cell[1]:g} seed {k} "
                    f"in {time.monotonic() - tic:.1f} s"
                )
            seeds_used.setdefault(cell_dir_name(cell), {})[model] = cell_seeds
    t_train = time.monotonic()

    summary = evaluate_run(run, log=log)
    warnings.extend(summary["warnings"])
    t_eval = time.monotonic()

    artifacts = {}
    for p in sorted(run.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME:
            artifacts[p.relative_to(run).as_posix()] = _sha256(p)
    manifest = {
        "package_version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config_sha256": config_hash(cfg.raw),
        "cells": [cell_dir_name(c) for c in selected],
        "models": list(cfg.models),
        "n_seeds": cfg.n_seeds,
        "seeds": seeds_used,
        "warnings": warnings,
        "timings_s": {
            "generate": round(t_data - t0, 3),
            "train": round(t_train - t_data, 3),
            "evaluate": round(t_eval - t_train, 3),
        },
        "artifacts": artifacts,
    }
    (run / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    log(f"study complete in {time.monotonic() - t0:.1f} s; {len(warnings)} warnings")
    return run
