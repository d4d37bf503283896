"""Training loops: plain supervised baseline and bilevel label correction.

The bilevel loop alternates two updates per outer iteration:

  inner   omega <- omega - inner_lr * d/domega  L_noisy(omega; targets)
          where targets = g_alpha(X', Y') come from the labeling network,
  outer   alpha <- alpha - meta_lr * d/dalpha L_clean(omega_after_inner)

The outer gradient is taken through the inner update. Two modes exist:

  UNROLLED     exact derivative of L_clean(omega - inner_lr * g(alpha, omega))
               with respect to alpha, via second-order autodiff.
  FIRST_ORDER  drops the curvature of the clean loss: the clean gradient is
               evaluated at the pre-step omega and treated as a constant,
               giving -inner_lr * d/dalpha <g_noisy(alpha, omega), g_clean(omega)>.
               The two modes agree to O(inner_lr^2) in the step size.

Networks are duck-typed: anything with `.params` (a ParamVector),
`.with_params(pv)`, and the functional `forward_t` methods used below can be
trained, which is how the tests drive the loop with tiny closed-form models.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .core import LabeledWindow, ParamVector, SplitDataset
from .errors import (
    EmptySet,
    FormatError,
    InvalidConfig,
    ModeUnsupported,
    NonFinite,
)
from .nets import as_tensors, bce_loss_t, grads_to_vector, load_params, save_params

STATE_FORMAT_VERSION = 1


class MetaGradMode(enum.Enum):
    UNROLLED = "unrolled"
    FIRST_ORDER = "first_order"


@dataclass(frozen=True)
class TrainConfig:
    """Budget and step sizes shared by both training loops.

    episodes counts outer iterations; each performs inner_steps parameter
    updates on the main network. Learning rates may be zero, which disables
    the corresponding update exactly (useful for fixed-point checks). grid
    records which (h_s, m_s) cell the run belongs to; the loops themselves
    only consume the windows they are handed. Any loss above loss_guard
    aborts the run and restores the best parameters seen. meta_decay is a
    decoupled per-step multiplicative shrink of the labeling parameters,
    applied only when a labeling update happens at all. clean_batch_size
    controls the held-out batch drawn for the outer objective (defaults to
    batch_size); it can be raised independently because the extra cost is a
    few cheap main-network passes, while the labeler only ever processes
    the noisy batch.
    """

    inner_lr: float = 0.5
    meta_lr: float = 0.5
    inner_steps: int = 1
    episodes: int = 300
    batch_size: int = 16
    meta_grad_mode: MetaGradMode = MetaGradMode.UNROLLED
    seed: int = 0
    grid: tuple[float, float] = (20.0, 5.0)
    loss_guard: float = 1e3
    meta_decay: float = 0.0
    clean_batch_size: int | None = None

    def __post_init__(self) -> None:
        if self.inner_lr < 0 or self.meta_lr < 0:
            raise InvalidConfig("learning rates must be non-negative")
        if self.inner_steps < 1:
            raise InvalidConfig("inner_steps must be >= 1")
        if self.episodes < 0:
            raise InvalidConfig("episodes must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not isinstance(self.meta_grad_mode, MetaGradMode):
            raise ModeUnsupported(f"unknown meta-gradient mode {self.meta_grad_mode!r}")
        if self.loss_guard <= 0:
            raise InvalidConfig("loss_guard must be positive")
        if not 0.0 <= self.meta_decay < 1.0:
            raise InvalidConfig("meta_decay must lie in [0, 1)")
        if self.clean_batch_size is not None and self.clean_batch_size < 1:
            raise InvalidConfig("clean_batch_size must be >= 1 when set")
        if len(self.grid) != 2 or self.grid[0] <= 0 or self.grid[1] <= 0:
            raise InvalidConfig("grid must be a positive (h_s, m_s) pair")


@dataclass
class History:
    """Per-iteration training log plus the final trainer state for resuming."""

    rows: list[dict] = field(default_factory=list)
    aborted: bool = False
    reason: str = ""
    final_state: "TrainerState | None" = None

    def column(self, name: str) -> np.ndarray:
        return np.asarray([row[name] for row in self.rows], dtype=np.float64)


@dataclass
class TrainerState:
    """Everything needed to continue a run bitwise-identically."""

    iteration: int
    rng_state: dict
    main_params: ParamVector
    meta_params: ParamVector | None
    best_loss: float
    best_main: ParamVector | None
    best_meta: ParamVector | None


# ---------------------------------------------------------------------------
# Batch plumbing


def _stack_clean(windows: Sequence[LabeledWindow]) -> tuple[torch.Tensor, torch.Tensor]:
    xs = np.stack([w.pair.x for w in windows])
    labels = []
    for w in windows:
        if w.label is None:
            raise EmptySet("clean windows must carry labels")
        labels.append(float(w.label))
    return torch.from_numpy(xs), torch.tensor(labels, dtype=torch.float64)


def _stack_noisy(windows: Sequence[LabeledWindow]) -> tuple[torch.Tensor, torch.Tensor]:
    xs = np.stack([w.pair.x for w in windows])
    ys = np.stack([w.pair.y for w in windows])
    return torch.from_numpy(xs), torch.from_numpy(ys)


def _coerce_noisy_batch(batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Accept a list of LabeledWindows or a raw (X, Y) array pair."""
    if isinstance(batch, (list, tuple)) and batch and isinstance(batch[0], LabeledWindow):
        return _stack_noisy(batch)
    if isinstance(batch, tuple) and len(batch) == 2:
        x, y = batch
        return (
            torch.as_tensor(np.asarray(x, dtype=np.float64)),
            torch.as_tensor(np.asarray(y, dtype=np.float64)),
        )
    raise EmptySet("noisy batch must be LabeledWindows or an (X, Y) pair")


def _coerce_clean_batch(batch) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(batch, (list, tuple)) and batch and isinstance(batch[0], LabeledWindow):
        return _stack_clean(batch)
    if isinstance(batch, tuple) and len(batch) == 2:
        x, t = batch
        return (
            torch.as_tensor(np.asarray(x, dtype=np.float64)),
            torch.as_tensor(np.asarray(t, dtype=np.float64)),
        )
    raise EmptySet("clean batch must be LabeledWindows or an (X, labels) pair")


def _finite_or_raise(vec: ParamVector, what: str) -> ParamVector:
    if not np.all(np.isfinite(vec.values)):
        raise NonFinite(f"{what} contains NaN or Inf")
    return vec


def _rng_from(cfg_seed: int, state: TrainerState | None) -> np.random.Generator:
    rng = np.random.default_rng(cfg_seed)
    if state is not None:
        rng.bit_generator.state = state.rng_state
    return rng


# ---------------------------------------------------------------------------
# Single-step operations


def inner_update(main, meta, noisy_batch, inner_lr: float):
    """One gradient step of the main network on meta-labeled noisy data.

    Targets are produced by the labeling network and treated as constants;
    returns a new main network, the input is untouched. inner_lr == 0
    returns the input network unchanged.
    """
    if inner_lr < 0:
        raise InvalidConfig("inner_lr must be non-negative")
    if inner_lr == 0.0:
        return main
    xn, yn = _coerce_noisy_batch(noisy_batch)
    with torch.no_grad():
        targets = meta.forward_t(as_tensors(meta.params), xn, yn)
    omega = as_tensors(main.params, requires_grad=True)
    loss = bce_loss_t(main.forward_t(omega, xn), targets)
    gs = torch.autograd.grad(loss, list(omega.values()))
    gvec = _finite_or_raise(grads_to_vector(gs, main.params.layout), "inner gradient")
    return main.with_params(main.params - gvec.scale(inner_lr))


def meta_gradient(
    main,
    meta,
    noisy_batch,
    clean_batch,
    mode: MetaGradMode = MetaGradMode.UNROLLED,
    inner_lr: float = 0.5,
) -> ParamVector:
    """Gradient of the post-inner-step clean loss w.r.t. the labeling network.

    UNROLLED differentiates L_clean(omega - inner_lr * g_noisy(alpha, omega))
    exactly; FIRST_ORDER replaces the clean gradient after the step with the
    clean gradient at the current omega, held constant. With inner_lr == 0
    both modes return exactly zero.
    """
    if not isinstance(mode, MetaGradMode):
        raise ModeUnsupported(f"unknown meta-gradient mode {mode!r}")
    if inner_lr < 0:
        raise InvalidConfig("inner_lr must be non-negative")
    if inner_lr == 0.0:
        return ParamVector.zeros(meta.params.layout)
    xn, yn = _coerce_noisy_batch(noisy_batch)
    xc, tc = _coerce_clean_batch(clean_batch)

    alpha = as_tensors(meta.params, requires_grad=True)
    omega = as_tensors(main.params, requires_grad=True)
    targets = meta.forward_t(alpha, xn, yn)
    loss_noisy = bce_loss_t(main.forward_t(omega, xn), targets)
    g_omega = torch.autograd.grad(loss_noisy, list(omega.values()), create_graph=True)

    if mode is MetaGradMode.UNROLLED:
        stepped = {
            name: w - inner_lr * g
            for (name, w), g in zip(omega.items(), g_omega)
        }
        loss_clean = bce_loss_t(main.forward_t(stepped, xc), tc)
        gs = torch.autograd.grad(loss_clean, list(alpha.values()))
    else:
        omega_eval = as_tensors(main.params, requires_grad=True)
        loss_clean = bce_loss_t(main.forward_t(omega_eval, xc), tc)
        g_clean = torch.autograd.grad(loss_clean, list(omega_eval.values()))
        inner_prod = sum(
            (g * gc.detach()).sum() for g, gc in zip(g_omega, g_clean)
        )
        gs = torch.autograd.grad(-inner_lr * inner_prod, list(alpha.values()))
    return _finite_or_raise(grads_to_vector(gs, meta.params.layout), "meta gradient")


def evaluate_accuracy(net, windows: Sequence[LabeledWindow], threshold: float = 0.5) -> float:
    """Fraction of windows whose thresholded probability matches the label."""
    if not windows:
        raise EmptySet("cannot evaluate accuracy on zero windows")
    labels = []
    for w in windows:
        if w.label not in (0, 1):
            raise EmptySet("every evaluated window needs a binary label")
        labels.append(int(w.label))
    xs = np.stack([w.pair.x for w in windows])
    probs = net.forward_batch(xs)
    preds = (probs >= threshold).astype(int)
    return float(np.mean(preds == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Training loops


def _capture_state(
    iteration: int,
    rng: np.random.Generator,
    main_pv: ParamVector,
    meta_pv: ParamVector | None,
    best_loss: float,
    best_main: ParamVector | None,
    best_meta: ParamVector | None,
) -> TrainerState:
    return TrainerState(
        iteration=iteration,
        rng_state=rng.bit_generator.state,
        main_params=main_pv.copy(),
        meta_params=None if meta_pv is None else meta_pv.copy(),
        best_loss=best_loss,
        best_main=None if best_main is None else best_main.copy(),
        best_meta=None if best_meta is None else best_meta.copy(),
    )


def _stratified_idx(rng, labels: np.ndarray, size: int) -> np.ndarray:
    """Class-balanced batch indices, drawn with replacement.

    Half the batch comes from each label when both are present (an odd
    remainder is drawn from the full set); a single-class set falls back to
    plain uniform sampling. Balancing removes the batch-to-batch labeled-mean
    jitter that otherwise dominates small-batch gradients through the output
    bias.
    """
    pos = np.flatnonzero(labels == 1.0)
    neg = np.flatnonzero(labels == 0.0)
    if len(pos) == 0 or len(neg) == 0:
        return rng.integers(0, len(labels), size=size)
    half = size // 2
    parts = [
        neg[rng.integers(0, len(neg), size=half)],
        pos[rng.integers(0, len(pos), size=half)],
    ]
    if size - 2 * half:
        parts.append(rng.integers(0, len(labels), size=size - 2 * half))
    return np.concatenate(parts)


def train_baseline(net, clean: Sequence[LabeledWindow], cfg: TrainConfig, resume: TrainerState | None = None):
    """Plain SGD on trusted labels; returns (trained_net, history).

    Batches are class-balanced and drawn with replacement from a generator
    seeded by cfg.seed, so identical inputs give identical trajectories. If a
    loss or gradient stops being finite or exceeds cfg.loss_guard, training
    aborts and the best parameters seen so far (by training loss) are
    returned.
    """
    if not clean:
        raise EmptySet("train_baseline needs a non-empty clean set")
    xs, labels = _stack_clean(clean)
    n = xs.shape[0]
    rng = _rng_from(cfg.seed, resume)
    pv = resume.main_params if resume is not None else net.params
    best_loss = resume.best_loss if resume is not None else float("inf")
    best_pv = resume.best_main if resume is not None else None
    start = resume.iteration if resume is not None else 0
    hist = History()

    completed = start
    for it in range(start, cfg.episodes):
        idx = _stratified_idx(rng, labels, min(cfg.batch_size, n))
        xb, tb = xs[idx], labels[idx]
        omega = as_tensors(pv, requires_grad=True)
        loss_t = bce_loss_t(net.forward_t(omega, xb), tb)
        loss = float(loss_t.detach())
        if not np.isfinite(loss) or loss > cfg.loss_guard:
            hist.aborted = True
            hist.reason = f"iteration {it}: training loss {loss!r} tripped the guard"
            break
        try:
            gs = torch.autograd.grad(loss_t, list(omega.values()))
            gvec = grads_to_vector(gs, pv.layout)
        except NonFinite:
            hist.aborted = True
            hist.reason = f"iteration {it}: non-finite gradient"
            break
        if loss < best_loss:
            best_loss, best_pv = loss, pv
        pv = pv - gvec.scale(cfg.inner_lr)
        hist.rows.append({"iteration": it, "loss_clean": loss})
        completed = it + 1

    if hist.aborted and best_pv is not None:
        pv = best_pv
    hist.final_state = _capture_state(completed, rng, pv, None, best_loss, best_pv, None)
    return net.with_params(pv), hist


def train_meta(main, meta, data: SplitDataset, cfg: TrainConfig, resume: TrainerState | None = None):
    """Bilevel training; returns (main_net, meta_net, history).

    Each outer iteration samples one noisy batch and one class-balanced
    clean batch, performs cfg.inner_steps updates of the main network on
    meta-generated targets (the last one differentiated through), then steps
    the labeling network against the clean loss of the updated main network.
    meta_lr == 0 skips the labeling update entirely, leaving its parameters
    bitwise unchanged.

    History rows carry iteration, loss_noisy, loss_clean and mean_yc (the
    mean meta-generated target of the iteration's noisy batch).
    """
    if not data.clean:
        raise EmptySet("train_meta needs a non-empty clean set")
    if not data.noisy:
        raise EmptySet("train_meta needs a non-empty noisy set")
    if not isinstance(cfg.meta_grad_mode, MetaGradMode):
        raise ModeUnsupported(f"unknown meta-gradient mode {cfg.meta_grad_mode!r}")
    xs_c, labels_c = _stack_clean(data.clean)
    xs_n, ys_n = _stack_noisy(data.noisy)
    n_clean, n_noisy = xs_c.shape[0], xs_n.shape[0]

    rng = _rng_from(cfg.seed, resume)
    main_pv = resume.main_params if resume is not None else main.params
    meta_pv = (
        resume.meta_params
        if resume is not None and resume.meta_params is not None
        else meta.params
    )
    best_loss = resume.best_loss if resume is not None else float("inf")
    best_main = resume.best_main if resume is not None else None
    best_meta = resume.best_meta if resume is not None else None
    start = resume.iteration if resume is not None else 0
    hist = History()

    completed = start
    for it in range(start, cfg.episodes):
        noisy_idx = rng.integers(0, n_noisy, size=min(cfg.batch_size, n_noisy))
        clean_bs = cfg.clean_batch_size or cfg.batch_size
        clean_idx = _stratified_idx(rng, labels_c, min(clean_bs, n_clean))
        xn, yn = xs_n[noisy_idx], ys_n[noisy_idx]
        xc, tc = xs_c[clean_idx], labels_c[clean_idx]

        try:
            step = _meta_step(main, meta, main_pv, meta_pv, xn, yn, xc, tc, cfg)
        except NonFinite as e:
            hist.aborted = True
            hist.reason = f"iteration {it}: {e}"
            break
        main_pv, meta_pv, loss_noisy, loss_clean, mean_yc = step
        if (
            not (np.isfinite(loss_noisy) and np.isfinite(loss_clean))
            or loss_noisy > cfg.loss_guard
            or loss_clean > cfg.loss_guard
        ):
            hist.aborted = True
            hist.reason = (
                f"iteration {it}: losses ({loss_noisy!r}, {loss_clean!r}) tripped the guard"
            )
            break
        if loss_clean < best_loss:
            best_loss, best_main, best_meta = loss_clean, main_pv, meta_pv
        hist.rows.append(
            {
                "iteration": it,
                "loss_noisy": loss_noisy,
                "loss_clean": loss_clean,
                "mean_yc": mean_yc,
            }
        )
        completed = it + 1

    if hist.aborted and best_main is not None:
        main_pv, meta_pv = best_main, best_meta
    hist.final_state = _capture_state(
        completed, rng, main_pv, meta_pv, best_loss, best_main, best_meta
    )
    return main.with_params(main_pv), meta.with_params(meta_pv), hist


def _meta_step(main, meta, main_pv, meta_pv, xn, yn, xc, tc, cfg: TrainConfig):
    """One outer iteration; returns (main_pv, meta_pv, loss_noisy, loss_clean, mean_yc)."""
    layout_main = main_pv.layout
    layout_meta = meta_pv.layout

    # Plain inner steps, if more than one was requested. Targets are
    # regenerated each step from the current labeling parameters (they do
    # not change inside the iteration, but the main parameters do).
    for _ in range(cfg.inner_steps - 1):
        with torch.no_grad():
            targets = meta.forward_t(as_tensors(meta_pv), xn, yn)
        omega = as_tensors(main_pv, requires_grad=True)
        loss = bce_loss_t(main.forward_t(omega, xn), targets)
        gs = torch.autograd.grad(loss, list(omega.values()))
        gvec = grads_to_vector(gs, layout_main)
        main_pv = main_pv - gvec.scale(cfg.inner_lr)

    alpha = as_tensors(meta_pv, requires_grad=True)
    omega = as_tensors(main_pv, requires_grad=True)
    need_meta = cfg.meta_lr > 0.0
    targets = meta.forward_t(alpha, xn, yn)
    loss_noisy = bce_loss_t(main.forward_t(omega, xn), targets)
    g_omega = torch.autograd.grad(
        loss_noisy, list(omega.values()), create_graph=need_meta
    )

    mode = cfg.meta_grad_mode
    if need_meta and mode is MetaGradMode.UNROLLED:
        stepped = {
            name: w - cfg.inner_lr * g for (name, w), g in zip(omega.items(), g_omega)
        }
        loss_clean_t = bce_loss_t(main.forward_t(stepped, xc), tc)
        g_alpha = torch.autograd.grad(loss_clean_t, list(alpha.values()))
        new_main = grads_to_vector(
            [t.detach() for t in stepped.values()], layout_main
        )
        loss_clean = float(loss_clean_t.detach())
    elif need_meta and mode is MetaGradMode.FIRST_ORDER:
        omega_eval = as_tensors(main_pv, requires_grad=True)
        loss_clean_t = bce_loss_t(main.forward_t(omega_eval, xc), tc)
        g_clean = torch.autograd.grad(loss_clean_t, list(omega_eval.values()))
        inner_prod = sum((g * gc.detach()).sum() for g, gc in zip(g_omega, g_clean))
        g_alpha = torch.autograd.grad(
            -cfg.inner_lr * inner_prod, list(alpha.values())
        )
        gvec = grads_to_vector(g_omega, layout_main)
        new_main = main_pv - gvec.scale(cfg.inner_lr)
        loss_clean = float(loss_clean_t.detach())
    else:
        # Labeling network frozen: plain inner step, report post-step clean loss.
        gvec = grads_to_vector(g_omega, layout_main)
        new_main = main_pv - gvec.scale(cfg.inner_lr)
        g_alpha = None
        with torch.no_grad():
            loss_clean = float(
                bce_loss_t(main.forward_t(as_tensors(new_main), xc), tc)
            )

    _finite_or_raise(new_main, "updated main parameters")
    if g_alpha is not None:
        g_alpha_vec = _finite_or_raise(
            grads_to_vector(g_alpha, layout_meta), "meta gradient"
        )
        if cfg.meta_decay:
            # Decoupled shrink, applied to the parameters rather than folded
            # into the objective. Saturated labels silence the hypergradient
            # (sigmoid slope ~ 0); the shrink re-opens that gate, and only a
            # labeling that the clean loss actively defends can hold its
            # scale against it.
            meta_pv = meta_pv.scale(1.0 - cfg.meta_decay)
        meta_pv = meta_pv - g_alpha_vec.scale(cfg.meta_lr)
    with torch.no_grad():
        mean_yc = float(targets.mean())
    return new_main, meta_pv, float(loss_noisy.detach()), loss_clean, mean_yc


# ---------------------------------------------------------------------------
# History and state persistence


HISTORY_COLUMNS = ("iteration", "loss_noisy", "loss_clean", "mean_yc")


def save_history(hist: History, path: str | Path) -> Path:
    """Write history.csv with a fixed four-column schema.

    Baseline histories have no noisy loss or target statistics; those cells
    stay empty so one schema covers both trainers.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(HISTORY_COLUMNS)]
    for row in hist.rows:
        cells = [str(int(row["iteration"]))]
        for col in HISTORY_COLUMNS[1:]:
            v = row.get(col)
            cells.append("" if v is None else f"{v:.12g}")
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return path


def save_state(state: TrainerState, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": STATE_FORMAT_VERSION,
        "iteration": state.iteration,
        "rng_state": state.rng_state,
        "best_loss": state.best_loss,
        "has_meta": state.meta_params is not None,
        "has_best": state.best_main is not None,
    }
    (out / "state.json").write_text(json.dumps(doc, indent=2) + "\n")
    save_params(state.main_params, out / "main.bin")
    if state.meta_params is not None:
        save_params(state.meta_params, out / "meta.bin")
    if state.best_main is not None:
        save_params(state.best_main, out / "best_main.bin")
    if state.best_meta is not None:
        save_params(state.best_meta, out / "best_meta.bin")
    return out


def load_state(in_dir: str | Path) -> TrainerState:
    d = Path(in_dir)
    doc_path = d / "state.json"
    if not doc_path.exists():
        raise FormatError(f"no trainer state under {d}")
    try:
        doc = json.loads(doc_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{doc_path} is not valid JSON: {e}") from e
    if doc.get("format_version") != STATE_FORMAT_VERSION:
        raise FormatError(f"{doc_path}: unsupported version {doc.get('format_version')!r}")
    return TrainerState(
        iteration=int(doc["iteration"]),
        rng_state=doc["rng_state"],
        main_params=load_params(d / "main.bin"),
        meta_params=load_params(d / "meta.bin") if doc.get("has_meta") else None,
        best_loss=float(doc["best_loss"]),
        best_main=load_params(d / "best_main.bin") if doc.get("has_best") else None,
        best_meta=(
            load_params(d / "best_meta.bin") if (d / "best_meta.bin").exists() else None
        ),
    )
