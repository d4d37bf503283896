"""End-to-end acceptance checks.

Each test enforces one numbered criterion — numerical tolerances, protocol
counts, the directional study outcome, and determinism — and records a single
PASS/FAIL line (repeated in the terminal summary). Criteria 6 and 7 share one
full study run at the default configuration restricted to the h = 20 s cells;
everything else runs on purpose-built tiny problems.
"""

from __future__ import annotations

import copy
import csv
import math
import statistics
import time

import numpy as np
import pytest
import torch

from _oracles import fd_grad, spearman_rho, tiny_meta
from metaictal.config import DEFAULT_CONFIG
from metaictal.core import LabeledWindow, EpisodeMeta, Purity, WindowPair
from metaictal.nets import (
    Architecture,
    MainHyper,
    MainNetwork,
    as_tensors,
    bce_loss,
    bce_loss_t,
    grad,
    randomize_params,
)
from metaictal.pipeline import NormStats, PartitionOptions, SplitDataset, partition
from metaictal.study import evaluate_run, run_study
from metaictal.synthgen import SynthConfig, generate_episode
from metaictal.trainer import (
    MetaGradMode,
    TrainConfig,
    inner_update,
    meta_gradient,
    train_meta,
)

torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# Shared helpers


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def _tiny_lstm_main(seed: int) -> MainNetwork:
    hyper = MainHyper(blocks=1, widths=(2,), kernel=3, hidden=1)
    net = MainNetwork.build(Architecture.LSTM, 1, 8, hyper, seed=seed)
    return net.with_params(randomize_params(net.params.layout, seed=seed + 40))


def _tiny_split(seed: int = 0, n_clean: int = 16, n_noisy: int = 16) -> SplitDataset:
    rng = np.random.default_rng(seed)

    def window(label, purity, t_start, amp):
        pair = WindowPair(
            x=amp * rng.standard_normal((1, 8)),
            y=amp * rng.standard_normal((1, 4)),
            t_start_s=float(t_start),
            h_s=8.0,
            m_s=4.0,
            episode_id="toy",
        )
        return LabeledWindow(pair=pair, label=label, purity=purity)

    clean = [
        window(i % 2, Purity.CLEAN, i, amp=2.0 if i % 2 else 0.5) for i in range(n_clean)
    ]
    noisy = [
        window(None, Purity.NOISY, 1000 + i, amp=2.0 if i % 2 else 0.5)
        for i in range(n_noisy)
    ]
    meta = {
        "toy": EpisodeMeta(onset_times_s=(500.0,), duration_s=2000.0, sample_rate_hz=1.0)
    }
    return SplitDataset(
        clean=tuple(clean),
        noisy=tuple(noisy),
        normalization_stats=NormStats(
            mean=np.zeros(1), std=np.ones(1), source_episodes=("toy",)
        ),
        grid=(8.0, 4.0),
        episode_meta=meta,
    )


@pytest.fixture(scope="module")
def study_run(tmp_path_factory):
    """One full study at the default configuration, h = 20 s row only."""
    doc = copy.deepcopy(DEFAULT_CONFIG)
    doc["grid"]["h_s"] = [20.0]
    root = tmp_path_factory.mktemp("acceptance-study")
    t0 = time.monotonic()
    run = run_study(doc, root, run_name="acceptance")
    return run, time.monotonic() - t0


# ---------------------------------------------------------------------------
# Criterion 1: unrolled meta-gradient against finite differences


def test_criterion_1_unrolled_meta_gradient_oracle(acceptance_report):
    t0 = time.monotonic()
    mu = 0.2
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        main = _tiny_lstm_main(seed)
        meta = tiny_meta(n_channels=1, x_samples=8, y_samples=4, seed=seed + 10)
        meta = meta.with_params(randomize_params(meta.params.layout, seed=seed + 60))
        total = main.params.size + meta.params.size
        assert total <= 50, f"problem too large: {total} parameters"
        xn, yn = rng.standard_normal((6, 1, 8)), rng.standard_normal((6, 1, 4))
        xc = rng.standard_normal((6, 1, 8))
        tc = rng.integers(0, 2, 6).astype(float)

        def outer_loss(meta_pv):
            stepped = inner_update(main, meta.with_params(meta_pv), (xn, yn), inner_lr=mu)
            with torch.no_grad():
                return float(
                    bce_loss_t(
                        stepped.forward_t(
                            as_tensors(stepped.params), torch.from_numpy(xc)
                        ),
                        torch.from_numpy(tc),
                    )
                )

        g = meta_gradient(
            main, meta, (xn, yn), (xc, tc), mode=MetaGradMode.UNROLLED, inner_lr=mu
        )
        g_fd = fd_grad(outer_loss, meta.params, step=1e-5)
        err = np.abs(g.values - g_fd) / np.maximum(np.abs(g_fd), 1e-6 / 1e-4)
        worst = max(worst, float(err.max()))
    dt = time.monotonic() - t0
    ok = worst < 1e-4 and dt < 10.0
    acceptance_report(
        f"criterion 1 (unrolled meta-gradient vs central differences): "
        f"{_verdict(ok)} — max rel err {worst:.2e} over 5 problems "
        f"(limit 1e-4), {dt:.1f} s (limit 10 s)"
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 2: disabled meta step is a bitwise fixed point


def test_criterion_2_zero_meta_lr_fixed_point(acceptance_report):
    t0 = time.monotonic()
    main = _tiny_lstm_main(3)
    meta = tiny_meta(n_channels=1, x_samples=8, y_samples=4, seed=4)
    meta = meta.with_params(randomize_params(meta.params.layout, seed=5))
    before = meta.params.values.tobytes()
    cfg = TrainConfig(
        inner_lr=0.5,
        meta_lr=0.0,
        inner_steps=1,
        episodes=100,
        batch_size=8,
        seed=0,
        grid=(8.0, 4.0),
    )
    _, meta_after, hist = train_meta(main, meta, _tiny_split(), cfg)
    dt = time.monotonic() - t0
    ok = (
        meta_after.params.values.tobytes() == before
        and len(hist.rows) == 100
        and dt < 30.0
    )
    acceptance_report(
        f"criterion 2 (meta step disabled is a bitwise fixed point): "
        f"{_verdict(ok)} — 100 iterations, labeler parameters "
        f"{'unchanged' if ok else 'CHANGED'}, {dt:.1f} s (limit 30 s)"
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 3: loss unit values


def test_criterion_3_bce_unit_values(acceptance_report):
    t0 = time.monotonic()
    err_ln2 = abs(bce_loss(0.5, 1.0) - math.log(2.0))
    rng = np.random.default_rng(0)
    worst_sym = 0.0
    for _ in range(1000):
        p = float(rng.uniform(1e-6, 1 - 1e-6))
        t = float(rng.integers(0, 2))
        worst_sym = max(worst_sym, abs(bce_loss(p, t) - bce_loss(1 - p, 1 - t)))
    dt = time.monotonic() - t0
    ok = err_ln2 < 1e-12 and worst_sym < 1e-12
    acceptance_report(
        f"criterion 3 (bce unit value and symmetry): {_verdict(ok)} — "
        f"|bce(0.5,1)-ln2| = {err_ln2:.1e}, max symmetry gap {worst_sym:.1e} "
        f"over 1000 pairs (limits 1e-12), {dt:.1f} s"
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 4: window protocol counts and invariants


def test_criterion_4_window_protocol_counts(acceptance_report):
    t0 = time.monotonic()
    opts = PartitionOptions(stride_s=0.5, noisy_halfwidth_s=10.0, clean_per_side=40)
    h_s, m_s = 4.0, 2.0
    rng = np.random.default_rng(11)
    checked = 0
    ok = True
    detail = ""
    for i in range(20):
        cfg = SynthConfig(
            n_channels=int(rng.integers(1, 4)),
            sample_rate_hz=16.0,
            duration_s=240.0,
            onset_s=float(rng.integers(60, 181)),
            ramp_s=20.0,
            rest_theta=2.0,
            noise_sigma=1.0,
            ictal_amp=4.0,
            ictal_freq_hz=4.0,
            seed=int(rng.integers(0, 2**31)),
        )
        ep = generate_episode(cfg, episode_id=f"check-{i}")
        onset = ep.onset_times_s[0]
        clean, noisy = partition(ep, h_s, m_s, opts)
        zeros = [w for w in clean if w.label == 0]
        ones = [w for w in clean if w.label == 1]

        def t_end(w: LabeledWindow) -> float:
            return w.pair.t_start_s + h_s + m_s

        starts = [w.pair.t_start_s for w in clean + noisy]
        checks = [
            len(noisy) == 40,
            len(zeros) == 40 and len(ones) == 40,
            all(w.label is None and w.purity is Purity.NOISY for w in noisy),
            all(w.purity is Purity.CLEAN for w in clean),
            all(onset - 10.0 <= t_end(w) < onset + 10.0 for w in noisy),
            all(t_end(w) < onset - 10.0 for w in zeros),
            all(t_end(w) >= onset + 10.0 for w in ones),
            len(set(starts)) == len(starts),
        ]
        if not all(checks):
            ok = False
            detail = f" (episode {i}: checks {[int(c) for c in checks]})"
            break
        checked += 1
    dt = time.monotonic() - t0
    ok = ok and checked == 20 and dt < 10.0
    acceptance_report(
        f"criterion 4 (40 noisy and 40+40 clean windows per onset, disjoint, "
        f"correct sides): {_verdict(ok)} — {checked}/20 episodes clean{detail}, "
        f"{dt:.1f} s (limit 10 s)"
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 5: network gradients against finite differences


def test_criterion_5_network_gradient_oracle(acceptance_report):
    t0 = time.monotonic()
    worst = 0.0
    rng = np.random.default_rng(21)
    hyper = MainHyper(blocks=1, widths=(2,), kernel=3, hidden=2)
    for arch in (Architecture.RESNET1D, Architecture.LSTM):
        for seed in range(10):
            net = MainNetwork.build(arch, 1, 8, hyper, seed=seed)
            assert net.params.size <= 200
            net = net.with_params(randomize_params(net.params.layout, seed=seed + 70))
            x = rng.standard_normal((4, 1, 8))
            t = rng.integers(0, 2, 4).astype(float)

            def loss_fn(p):
                return bce_loss_t(
                    net.forward_t(p, torch.from_numpy(x)), torch.from_numpy(t)
                )

            def loss_at(pv):
                with torch.no_grad():
                    return float(loss_fn(as_tensors(pv)))

            g = grad(loss_fn, net.params)
            g_fd = fd_grad(loss_at, net.params)
            err = np.abs(g.values - g_fd) / np.maximum(np.abs(g_fd), 1e-6 / 1e-4)
            worst = max(worst, float(err.max()))
    dt = time.monotonic() - t0
    ok = worst < 1e-4 and dt < 60.0
    acceptance_report(
        f"criterion 5 (network gradients vs central differences, both "
        f"architectures): {_verdict(ok)} — max rel err {worst:.2e} over "
        f"2 x 10 seeds (limit 1e-4), {dt:.1f} s (limit 60 s)"
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 6: label-corrected training beats the baselines; accuracy falls with m


def test_criterion_6_study_accuracy_ordering(acceptance_report, study_run):
    run, train_dt = study_run
    rows = list(csv.DictReader((run / "results" / "accuracy_by_seed.csv").open()))
    acc: dict[tuple[str, float], list[float]] = {}
    for r in rows:
        if float(r["h_s"]) == 20.0:
            acc.setdefault((r["model"], float(r["m_s"])), []).append(
                float(r["accuracy"])
            )
    mean = {k: statistics.mean(v) for k, v in acc.items()}
    n_seeds = {len(v) for v in acc.values()}

    beats = all(
        mean[("meta", m)] > mean[(b, m)]
        for m in (5.0, 10.0)
        for b in ("baseline-lstm", "baseline-resnet")
    )
    ms = [5.0, 10.0, 15.0, 20.0]
    rhos = {
        name: spearman_rho(ms, [mean[(name, m)] for m in ms])
        for name in ("baseline-lstm", "baseline-resnet", "meta")
    }
    trend = all(r < 0 for r in rhos.values())
    ok = beats and trend and n_seeds == {5} and train_dt < 1800.0
    summary = ", ".join(
        f"m={m:g}: meta {mean[('meta', m)]:.3f} vs lstm "
        f"{mean[('baseline-lstm', m)]:.3f} / resnet {mean[('baseline-resnet', m)]:.3f}"
        for m in (5.0, 10.0)
    )
    rho_txt = ", ".join(f"{k} {v:+.2f}" for k, v in rhos.items())
    acceptance_report(
        f"criterion 6 (label-corrected model beats both baselines at m=5,10 "
        f"over 5 seeds; accuracy non-increasing in m): {_verdict(ok)} — "
        f"{summary}; Spearman {rho_txt}; study {train_dt:.0f} s (target 1800 s)"
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 7: probability indicator leads the variance indicator


def test_criterion_7_lead_time_advantage(acceptance_report, study_run, tmp_path):
    run, _ = study_run
    t0 = time.monotonic()
    summary = evaluate_run(run, out_dir=tmp_path / "re-eval")
    dt = time.monotonic() - t0
    leads = summary["leads"]
    ok = len(leads) == 5
    parts = []
    for q in (0.8, 0.9, 0.95):
        advantages = [
            row.advantage_s
            for rows in leads.values()
            for row in rows
            if row.quantile == q and row.advantage_s is not None
        ]
        med = statistics.median(advantages) if advantages else float("-inf")
        parts.append(f"q={q:g}: median {med:+.1f} s (n={len(advantages)})")
        ok = ok and len(advantages) >= 3 and med >= 0.0
    sweep = run / "results" / "leadtime_all.csv"
    n_sweep = len(sweep.read_text().splitlines()) - 1 if sweep.exists() else 0
    ok = ok and n_sweep >= 15 and dt < 300.0
    acceptance_report(
        f"criterion 7 (ensemble probability indicator median lead advantage "
        f">= 0 on 5 test episodes): {_verdict(ok)} — {'; '.join(parts)}; "
        f"quantile sweep rows {n_sweep}, evaluation {dt:.0f} s (limit 300 s)"
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 8: repeated studies are byte-identical


def test_criterion_8_study_determinism(
    acceptance_report, mini_run, mini_config_path, tmp_path
):
    from metaictal.cli import main

    t0 = time.monotonic()
    rc = main(
        [
            "study",
            "--config",
            str(mini_config_path),
            "--out",
            str(tmp_path),
            "--name",
            "run-b",
            "--quiet",
        ]
    )
    dt = time.monotonic() - t0
    same = {}
    for name in ("accuracy_grid.csv", "leadtime.csv"):
        a = (mini_run / "results" / name).read_bytes()
        b = (tmp_path / "run-b" / "results" / name).read_bytes()
        same[name] = a == b
    ok = rc == 0 and all(same.values())
    state = ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in same.items())
    acceptance_report(
        f"criterion 8 (fixed-seed study reruns byte-identical): {_verdict(ok)} — "
        f"{state}, second run {dt:.0f} s"
    )
    assert ok
