"""Command-line interface.

Subcommands mirror the library pipeline: generate synthetic episodes, split
one into train/test window sets, train a single model, evaluate a study run
from its checkpoints, compute indicator traces for one episode, or run the
whole study in one go.

Exit codes: 0 success, 2 configuration error (bad flags, bad config file,
off-grid cell), 3 data error (missing/corrupt files, impossible splits),
4 numerical failure (non-finite losses or gradients).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import __version__
from .config import (
    DEFAULT_CONFIG,
    MODEL_NAMES,
    apply_overrides,
    dump_config,
    load_config,
    parse_cells,
    validate_config,
)
from .errors import (
    InvalidConfig,
    MetaictalError,
    ModeUnsupported,
    NonFinite,
)
from .eval import (
    first_crossing,
    probability_indicator,
    variance_indicator,
    write_trace_csv,
)
from .pipeline import apply_stats, save_dataset, split_train_test
from .study import (
    evaluate_run,
    generate_study_episodes,
    load_stats,
    run_study,
    training_seed,
    _write_episodes,
)
from .core import load_cohort, load_episode
from .nets import (
    Architecture,
    MainNetwork,
    MetaNetwork,
    load_main_network,
    save_main_network,
    save_meta_network,
)
from .trainer import save_history, train_baseline, train_meta

RUN_ROOT_ENV = "METAICTAL_RUNS"


def _config_from_args(args: argparse.Namespace) -> dict:
    doc = load_config(getattr(args, "config", None))
    overrides = getattr(args, "set", None) or []
    if overrides:
        doc = apply_overrides(doc, overrides)
    return doc


def _out_root(args: argparse.Namespace) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    env = os.environ.get(RUN_ROOT_ENV)
    return Path(env) if env else Path("runs")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = validate_config(_config_from_args(args))
    out = Path(args.out)
    cohort, extra = generate_study_episodes(cfg)
    _write_episodes(out, cohort, extra)
    dump_config(cfg.raw, out / "effective_config.yaml")
    print(f"wrote {len(cohort)} cohort + {len(extra)} test episodes to {out / 'episodes'}")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    episodes = load_cohort(args.episodes)
    cohort_doc = Path(args.episodes) / "cohort.json"
    if cohort_doc.exists():
        import json

        ids = set(json.loads(cohort_doc.read_text())["cohort"])
        episodes = [ep for ep in episodes if ep.id in ids]
    cfg = validate_config(_config_from_args(args))
    train, test = split_train_test(
        episodes, args.test_episode, (args.h, args.m), cfg.partition
    )
    out = Path(args.out)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(
        f"train: {len(train.clean)} clean + {len(train.noisy)} noisy windows; "
        f"test: {len(test.clean)} clean + {len(test.noisy)} noisy -> {out}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    import dataclasses

    from .pipeline import load_dataset

    cfg = validate_config(_config_from_args(args))
    ds = load_dataset(args.data)
    if not ds.clean:
        raise InvalidConfig(f"dataset {args.data} holds no trusted windows")
    sample = ds.clean[0].pair
    n_ch, nx = sample.x.shape
    ny = sample.y.shape[1]
    tc = dataclasses.replace(cfg.trainer, seed=args.seed, grid=ds.grid)
    out = Path(args.out)

    if args.model in ("baseline-lstm", "baseline-resnet"):
        arch = Architecture.LSTM if args.model == "baseline-lstm" else Architecture.RESNET1D
        net = MainNetwork.build(arch, n_ch, nx, cfg.main_hyper, seed=args.seed + 500_000)
        net, hist = train_baseline(net, ds.clean, tc)
        save_main_network(net, out / "main")
    else:
        main = MainNetwork.build(
            Architecture.RESNET1D, n_ch, nx, cfg.main_hyper, seed=args.seed + 500_000
        )
        meta = MetaNetwork.build(n_ch, nx, ny, cfg.meta_hyper, seed=args.seed + 500_001)
        main, meta, hist = train_meta(main, meta, ds, tc)
        save_main_network(main, out / "main")
        save_meta_network(meta, out / "meta")

    save_history(hist, out / "history.csv")
    last = hist.rows[-1] if hist.rows else {}
    status = "aborted: " + str(hist.reason) if hist.aborted else "ok"
    print(
        f"trained {args.model} for {len(hist.rows)} iterations ({status}); "
        f"final clean loss {last.get('loss_clean', float('nan')):.6f} -> {out}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    summary = evaluate_run(args.run, out_dir=args.out, log=print if args.verbose else (lambda _: None))
    table = summary["grid"]
    sys.stdout.write(table.to_csv())
    for w in summary["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(f"results written to {summary['out_dir']}")
    return 0


def cmd_indicator(args: argparse.Namespace) -> int:
    ep = load_episode(args.episode)
    stats = load_stats(args.stats)
    ep_n = apply_stats(ep, stats)
    net = load_main_network(Path(args.checkpoint) / "main")
    prob = probability_indicator(net, ep_n, args.h, args.stride)
    var = variance_indicator(ep_n, args.variance_window, args.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trace_csv(prob, out / f"trace_{ep.id}_probability.csv")
    write_trace_csv(var, out / f"trace_{ep.id}_variance.csv")
    onset = ep.onset_times_s[0] if ep.onset_times_s else None
    for q in args.quantile:
        tp = first_crossing(prob, q, onset_s=onset)
        tv = first_crossing(var, q, onset_s=onset)
        def _s(t):
            return "none" if t is None else f"{t:.2f} s"
        print(f"q={q:g}: probability crossing {_s(tp)}, variance crossing {_s(tv)}")
    print(f"traces written to {out}")
    return 0


def cmd_study(args: argparse.Namespace) -> int:
    doc = _config_from_args(args)
    cfg = validate_config(doc)
    cells = parse_cells(args.cells, cfg) if args.cells else None
    log = (lambda _: None) if args.quiet else print
    run = run_study(doc, _out_root(args), cells=cells, run_name=args.name, log=log)
    print(run)
    return 0


def cmd_seed(args: argparse.Namespace) -> int:
    """Print the deterministic training seed of one (cell, model, rep)."""
    cfg = validate_config(_config_from_args(args))
    print(training_seed(cfg, (args.h, args.m), args.model, args.k))
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="metaictal",
        description="Meta-labeled early-warning training on peri-onset recordings.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", help="YAML config file (defaults merged underneath)")
        sp.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override one config value (repeatable)",
        )

    g = sub.add_parser("generate", help="generate a synthetic cohort + test episodes")
    add_config(g)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="hold one episode out and window the rest")
    add_config(s)
    s.add_argument("--episodes", required=True, help="directory of episode CSVs")
    s.add_argument("--test-episode", required=True)
    s.add_argument("--h", type=float, required=True, help="history length (s)")
    s.add_argument("--m", type=float, required=True, help="horizon length (s)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train one model on a saved dataset")
    add_config(t)
    t.add_argument("--data", required=True, help="dataset directory (from split)")
    t.add_argument("--model", required=True, choices=MODEL_NAMES)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="recompute all evaluation CSVs of a run")
    e.add_argument("--run", required=True, help="study run directory")
    e.add_argument("--out", help="write results here instead of <run>/results")
    e.add_argument("--verbose", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("indicator", help="probability + variance traces for one episode")
    i.add_argument("--checkpoint", required=True, help="seed directory holding main/")
    i.add_argument("--stats", required=True, help="stats.json used at training time")
    i.add_argument("--episode", required=True, help="episode CSV path")
    i.add_argument("--h", type=float, required=True, help="history length (s)")
    i.add_argument("--stride", type=float, default=0.5)
    i.add_argument("--variance-window", type=float, default=0.5)
    i.add_argument(
        "--quantile", type=float, action="append",
        default=None, help="threshold quantile (repeatable)",
    )
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_indicator)

    st = sub.add_parser("study", help="run the full grid study")
    add_config(st)
    st.add_argument("--out", help=f"run-directory root (default ${RUN_ROOT_ENV} or ./runs)")
    st.add_argument("--name", help="run directory name (default: timestamp)")
    st.add_argument(
        "--cells",
        help="restrict to grid cells, e.g. 'h=20,m=5;h=20,m=10'",
    )
    st.add_argument("--quiet", action="store_true")
    st.set_defaults(func=cmd_study)

    sd = sub.add_parser("seed", help="print the training seed for one grid cell")
    add_config(sd)
    sd.add_argument("--h", type=float, required=True)
    sd.add_argument("--m", type=float, required=True)
    sd.add_argument("--model", required=True, choices=MODEL_NAMES)
    sd.add_argument("--k", type=int, default=0, help="repetition index")
    sd.set_defaults(func=cmd_seed)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "quantile", None) is not None and not args.quantile:
        args.quantile = None
    if args.command == "indicator" and args.quantile is None:
        args.quantile = list(DEFAULT_CONFIG["eval"]["quantiles"])
    try:
        return args.func(args)
    except (InvalidConfig, ModeUnsupported) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NonFinite as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except MetaictalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
