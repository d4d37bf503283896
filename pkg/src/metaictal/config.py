"""Declarative study configuration: defaults, YAML loading, validation.

One nested mapping describes an entire study; sections mirror the library
modules (synth, cohort, pipeline, grid, nets, trainer, eval, study). The
validated form is a StudyConfig of typed sub-configs. CLI flags override
file values before validation; the effective mapping is always written back
into the run directory.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .errors import InvalidConfig
from .nets import MainHyper, MetaHyper
from .pipeline import PartitionOptions
from .synthgen import SynthConfig
from .trainer import MetaGradMode, TrainConfig

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "synth": {
        "n_channels": 4,
        "sample_rate_hz": 16.0,
        "duration_s": 240.0,
        "onset_s": 160.0,
        "ramp_s": 45.0,
        "rest_theta": 2.0,
        "noise_sigma": 1.0,
        "ictal_amp": 4.0,
        "ictal_freq_hz": 4.0,
    },
    "cohort": {
        "n_episodes": 5,
        "seed_base": 100,
        "test_episode": "synth-004",
        "extra_test_episodes": 4,
    },
    "pipeline": {
        "stride_s": 0.5,
        "noisy_halfwidth_s": 10.0,
        "clean_per_side": 40,
    },
    "grid": {
        "h_s": [10.0, 20.0, 30.0],
        "m_s": [5.0, 10.0, 15.0, 20.0],
    },
    "nets": {
        "main": {"blocks": 3, "widths": [8, 12, 12], "kernel": 7, "hidden": 24},
        "meta": {"hidden": 24},
    },
    "trainer": {
        "inner_lr": 0.5,
        "meta_lr": 0.5,
        "inner_steps": 1,
        "episodes": 200,
        "batch_size": 16,
        "meta_grad_mode": "unrolled",
        "loss_guard": 2.5,
        "meta_decay": 0.0,
        "clean_batch_size": None,
    },
    "eval": {
        "quantiles": [0.8, 0.9, 0.95],
        "variance_window_s": 0.5,
        "baseline_fraction": 0.25,
        "trace_cell": {"h_s": 20.0, "m_s": 5.0},
    },
    "study": {
        "models": ["baseline-lstm", "baseline-resnet", "meta"],
        "n_seeds": 5,
        "torch_threads": 1,
    },
}

MODEL_NAMES = ("baseline-lstm", "baseline-resnet", "meta")


@dataclass(frozen=True)
class StudyConfig:
    """Validated study description."""

    seed: int
    synth: SynthConfig
    n_episodes: int
    seed_base: int
    test_episode: str
    extra_test_episodes: int
    partition: PartitionOptions
    grid_h: tuple[float, ...]
    grid_m: tuple[float, ...]
    main_hyper: MainHyper
    meta_hyper: MetaHyper
    trainer: TrainConfig
    quantiles: tuple[float, ...]
    variance_window_s: float
    baseline_fraction: float
    trace_cell: tuple[float, float]
    models: tuple[str, ...]
    n_seeds: int
    torch_threads: int
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def cells(self) -> list[tuple[float, float]]:
        return [(h, m) for h in self.grid_h for m in self.grid_m]


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None) -> dict:
    """Defaults merged with an optional YAML file (file values win)."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise InvalidConfig(f"config file {p} does not exist")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise InvalidConfig(f"could not parse {p}: {e}") from e
    if doc is None:
        doc = {}
    if not isinstance(doc, Mapping):
        raise InvalidConfig(f"{p} must hold a mapping at the top level")
    return _merge(DEFAULT_CONFIG, doc)


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply `section.key=value` strings on top of a config mapping."""
    out = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if not all(keys):
            raise InvalidConfig(f"override {item!r} has an empty key segment")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise InvalidConfig(f"override {item!r}: bad value: {e}") from e
        node = out
        for k in keys[:-1]:
            nxt = node.get(k)
            if not isinstance(nxt, dict):
                nxt = {}
                node[k] = nxt
            node = nxt
        node[keys[-1]] = value
    return out


def _section(doc: Mapping, name: str) -> Mapping:
    sec = doc.get(name, {})
    if not isinstance(sec, Mapping):
        raise InvalidConfig(f"config section {name!r} must be a mapping")
    return sec


def _num(sec: Mapping, name: str, path: str) -> float:
    v = sec.get(name)
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise InvalidConfig(f"{path}.{name} must be a number, got {v!r}")
    return float(v)


def _int(sec: Mapping, name: str, path: str) -> int:
    v = sec.get(name)
    if not isinstance(v, int) or isinstance(v, bool):
        raise InvalidConfig(f"{path}.{name} must be an integer, got {v!r}")
    return int(v)


def validate_config(doc: Mapping) -> StudyConfig:
    """Typed validation of a merged config mapping.

    Raises InvalidConfig with the offending path before any computation.
    """
    unknown = set(doc) - set(DEFAULT_CONFIG)
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise InvalidConfig("seed must be an integer")

    s = _section(doc, "synth")
    try:
        synth = SynthConfig(
            n_channels=_int(s, "n_channels", "synth"),
            sample_rate_hz=_num(s, "sample_rate_hz", "synth"),
            duration_s=_num(s, "duration_s", "synth"),
            onset_s=_num(s, "onset_s", "synth"),
            ramp_s=_num(s, "ramp_s", "synth"),
            rest_theta=_num(s, "rest_theta", "synth"),
            noise_sigma=_num(s, "noise_sigma", "synth"),
            ictal_amp=_num(s, "ictal_amp", "synth"),
            ictal_freq_hz=_num(s, "ictal_freq_hz", "synth"),
            seed=0,
        )
    except InvalidConfig as e:
        raise InvalidConfig(f"synth: {e}") from e

    c = _section(doc, "cohort")
    n_episodes = _int(c, "n_episodes", "cohort")
    if n_episodes < 2:
        raise InvalidConfig("cohort.n_episodes must be >= 2")
    seed_base = _int(c, "seed_base", "cohort")
    test_episode = c.get("test_episode")
    if not isinstance(test_episode, str) or not test_episode:
        raise InvalidConfig("cohort.test_episode must be a non-empty string")
    extra = _int(c, "extra_test_episodes", "cohort")
    if extra < 0:
        raise InvalidConfig("cohort.extra_test_episodes must be >= 0")

    p = _section(doc, "pipeline")
    try:
        part = PartitionOptions(
            stride_s=_num(p, "stride_s", "pipeline"),
            noisy_halfwidth_s=_num(p, "noisy_halfwidth_s", "pipeline"),
            clean_per_side=_int(p, "clean_per_side", "pipeline"),
        )
    except InvalidConfig as e:
        raise InvalidConfig(f"pipeline: {e}") from e

    g = _section(doc, "grid")
    for axis in ("h_s", "m_s"):
        vals = g.get(axis)
        if not isinstance(vals, Sequence) or isinstance(vals, (str, bytes)) or not vals:
            raise InvalidConfig(f"grid.{axis} must be a non-empty list of numbers")
        if any(not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0 for v in vals):
            raise InvalidConfig(f"grid.{axis} entries must be positive numbers")
        if len(set(float(v) for v in vals)) != len(vals):
            raise InvalidConfig(f"grid.{axis} entries must be unique")
    grid_h = tuple(float(v) for v in g["h_s"])
    grid_m = tuple(float(v) for v in g["m_s"])
    fs = synth.sample_rate_hz
    for h in grid_h:
        for m in grid_m:
            if h + m + part.noisy_halfwidth_s > synth.onset_s:
                raise InvalidConfig(
                    f"grid cell h={h:g}, m={m:g}: windows before the noisy zone "
                    f"would start before t=0 (onset {synth.onset_s:g} s)"
                )
            for name, v in (("h", h), ("m", m)):
                if abs(v * fs - round(v * fs)) > 1e-9:
                    raise InvalidConfig(
                        f"grid value {name}={v:g} is not sample-aligned at {fs:g} Hz"
                    )

    n = _section(doc, "nets")
    main_sec = _section(n, "main")
    meta_sec = _section(n, "meta")
    try:
        main_hyper = MainHyper(
            blocks=_int(main_sec, "blocks", "nets.main"),
            widths=tuple(main_sec.get("widths", ())),
            kernel=_int(main_sec, "kernel", "nets.main"),
            hidden=_int(main_sec, "hidden", "nets.main"),
        )
        meta_hyper = MetaHyper(hidden=_int(meta_sec, "hidden", "nets.meta"))
    except InvalidConfig as e:
        raise InvalidConfig(f"nets: {e}") from e

    t = _section(doc, "trainer")
    mode_raw = t.get("meta_grad_mode", "unrolled")
    try:
        mode = MetaGradMode(mode_raw)
    except ValueError:
        raise InvalidConfig(
            f"trainer.meta_grad_mode must be one of "
            f"{[m.value for m in MetaGradMode]}, got {mode_raw!r}"
        ) from None
    try:
        trainer = TrainConfig(
            inner_lr=_num(t, "inner_lr", "trainer"),
            meta_lr=_num(t, "meta_lr", "trainer"),
            inner_steps=_int(t, "inner_steps", "trainer"),
            episodes=_int(t, "episodes", "trainer"),
            batch_size=_int(t, "batch_size", "trainer"),
            meta_grad_mode=mode,
            seed=0,
            grid=(grid_h[0], grid_m[0]),
            loss_guard=_num(t, "loss_guard", "trainer"),
            meta_decay=_num(t, "meta_decay", "trainer"),
            clean_batch_size=(
                None
                if t.get("clean_batch_size") is None
                else _int(t, "clean_batch_size", "trainer")
            ),
        )
    except InvalidConfig as e:
        raise InvalidConfig(f"trainer: {e}") from e

    e = _section(doc, "eval")
    quantiles = e.get("quantiles")
    if (
        not isinstance(quantiles, Sequence)
        or isinstance(quantiles, (str, bytes))
        or not quantiles
        or any(
            not isinstance(q, (int, float)) or isinstance(q, bool) or not 0 < q < 1
            for q in quantiles
        )
    ):
        raise InvalidConfig("eval.quantiles must be a non-empty list inside (0, 1)")
    variance_window_s = _num(e, "variance_window_s", "eval")
    if variance_window_s <= 0:
        raise InvalidConfig("eval.variance_window_s must be positive")
    baseline_fraction = _num(e, "baseline_fraction", "eval")
    if not (0.0 < baseline_fraction <= 1.0):
        raise InvalidConfig("eval.baseline_fraction must lie in (0, 1]")
    tc = e.get("trace_cell")
    if not isinstance(tc, Mapping) or "h_s" not in tc or "m_s" not in tc:
        raise InvalidConfig("eval.trace_cell must be a mapping with h_s and m_s")
    trace_cell = (float(tc["h_s"]), float(tc["m_s"]))
    if trace_cell not in [(h, m) for h in grid_h for m in grid_m]:
        raise InvalidConfig(
            f"eval.trace_cell (h={trace_cell[0]:g}, m={trace_cell[1]:g}) "
            f"is not a cell of the configured grid"
        )

    st = _section(doc, "study")
    models = st.get("models")
    if (
        not isinstance(models, Sequence)
        or isinstance(models, (str, bytes))
        or not models
        or any(m not in MODEL_NAMES for m in models)
    ):
        raise InvalidConfig(f"study.models must be a non-empty subset of {MODEL_NAMES}")
    if len(set(models)) != len(models):
        raise InvalidConfig("study.models must not repeat entries")
    n_seeds = _int(st, "n_seeds", "study")
    if n_seeds < 1:
        raise InvalidConfig("study.n_seeds must be >= 1")
    torch_threads = _int(st, "torch_threads", "study")
    if torch_threads < 1:
        raise InvalidConfig("study.torch_threads must be >= 1")

    return StudyConfig(
        seed=seed,
        synth=synth,
        n_episodes=n_episodes,
        seed_base=seed_base,
        test_episode=test_episode,
        extra_test_episodes=extra,
        partition=part,
        grid_h=grid_h,
        grid_m=grid_m,
        main_hyper=main_hyper,
        meta_hyper=meta_hyper,
        trainer=trainer,
        quantiles=tuple(float(q) for q in quantiles),
        variance_window_s=variance_window_s,
        baseline_fraction=baseline_fraction,
        trace_cell=trace_cell,
        models=tuple(models),
        n_seeds=n_seeds,
        torch_threads=torch_threads,
        raw=dict(copy.deepcopy(doc)),
    )


def parse_cells(spec: str, cfg: StudyConfig) -> list[tuple[float, float]]:
    """Parse a `h=10,m=5;h=20,m=10` cell filter against the configured grid."""
    cells = []
    for chunk in spec.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        kv = {}
        for part in chunk.split(","):
            if "=" not in part:
                raise InvalidConfig(f"cell filter {chunk!r} must look like h=H,m=M")
            k, v = part.split("=", 1)
            try:
                kv[k.strip()] = float(v)
            except ValueError:
                raise InvalidConfig(f"cell filter {chunk!r}: {v!r} is not a number") from None
        if set(kv) != {"h", "m"}:
            raise InvalidConfig(f"cell filter {chunk!r} must set exactly h and m")
        cell = (kv["h"], kv["m"])
        if cell not in cfg.cells:
            raise InvalidConfig(
                f"cell h={cell[0]:g}, m={cell[1]:g} is not on the configured grid"
            )
        cells.append(cell)
    if not cells:
        raise InvalidConfig("cell filter selected nothing")
    return cells


def dump_config(doc: Mapping, path: str | Path) -> None:
    """Write the effective config mapping as stable, sorted YAML."""
    Path(path).write_text(yaml.safe_dump(dict(doc), sort_keys=True))
