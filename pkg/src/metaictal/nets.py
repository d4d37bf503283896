"""Network definitions with functional forwards over flat parameter vectors.

Both the main classifier and the labeling network are expressed as pure
functions of (parameter tensors, input tensors) so higher-order gradients
can flow through a parameter update. All tensors are float64 on CPU.

Main network architectures:
  * resnet1d - stem conv, then residual blocks (strided conv / statistic
    norm / relu / conv / norm on the branch, strided 1x1 projection on the
    skip), global average pooling, sigmoid head. The skip path carries raw
    amplitude through to the head, so the per-block normalization does not
    erase overall signal scale.
  * lstm - unidirectional LSTM over the channel sequence, sigmoid head on
    the final hidden state.

The labeling network runs an LSTM over the history and horizon segments
concatenated in time, with one extra input feature flagging which segment a
step belongs to, and maps the final hidden state to a soft label in (0, 1).
"""

from __future__ import annotations

import enum
import functools
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import Layout, ParamVector
from .errors import (
    FormatError,
    InvalidConfig,
    MissingCheckpoint,
    NonFinite,
    ShapeMismatch,
)

DTYPE = torch.float64

#: Probabilities are kept inside [PROB_EPS, 1 - PROB_EPS].
PROB_EPS = 1e-7

NORM_EPS = 1e-5

PARAMS_MAGIC = b"MLCP"
PARAMS_FORMAT_VERSION = 1
ARCH_FORMAT_VERSION = 1


class Architecture(enum.Enum):
    RESNET1D = "resnet1d"
    LSTM = "lstm"


@dataclass(frozen=True)
class MainHyper:
    """Width/depth knobs for the main network.

    widths has one entry per residual block; hidden is used by the lstm
    architecture only.
    """

    blocks: int = 3
    widths: tuple[int, ...] = (32, 64, 64)
    kernel: int = 7
    hidden: int = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.blocks < 1:
            raise InvalidConfig("blocks must be >= 1")
        if len(self.widths) != self.blocks:
            raise InvalidConfig("widths must list one width per block")
        if any(w < 1 for w in self.widths):
            raise InvalidConfig("widths must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidConfig("kernel must be a positive odd integer")
        if self.hidden < 1:
            raise InvalidConfig("hidden must be >= 1")


@dataclass(frozen=True)
class MetaHyper:
    """Width knobs for the labeling network."""

    hidden: int = 64

    def __post_init__(self) -> None:
        if self.hidden < 1:
            raise InvalidConfig("hidden must be >= 1")


# ---------------------------------------------------------------------------
# Layouts and initialization


def _lstm_layout(prefix: str, input_size: int, hidden: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.weight_ih_l0", (4 * hidden, input_size)),
        (f"{prefix}.weight_hh_l0", (4 * hidden, hidden)),
        (f"{prefix}.bias_ih_l0", (4 * hidden,)),
        (f"{prefix}.bias_hh_l0", (4 * hidden,)),
    ]


def resnet_layout(n_channels: int, hyper: MainHyper) -> Layout:
    entries: list[tuple[str, tuple[int, ...]]] = []
    k = hyper.kernel
    entries.append(("stem.weight", (hyper.widths[0], n_channels, k)))
    entries.append(("stem.bias", (hyper.widths[0],)))
    prev = hyper.widths[0]
    for b, w in enumerate(hyper.widths):
        pre = f"block{b}"
        entries.extend(
            [
                (f"{pre}.conv1.weight", (w, prev, k)),
                (f"{pre}.conv1.bias", (w,)),
                (f"{pre}.norm1.gain", (w,)),
                (f"{pre}.norm1.bias", (w,)),
                (f"{pre}.conv2.weight", (w, w, k)),
                (f"{pre}.conv2.bias", (w,)),
                (f"{pre}.norm2.gain", (w,)),
                (f"{pre}.norm2.bias", (w,)),
                (f"{pre}.proj.weight", (w, prev, 1)),
                (f"{pre}.proj.bias", (w,)),
            ]
        )
        prev = w
    entries.append(("head.weight", (prev,)))
    entries.append(("head.bias", ()))
    return tuple(entries)


def lstm_layout(n_channels: int, hyper: MainHyper) -> Layout:
    entries = _lstm_layout("lstm", n_channels, hyper.hidden)
    entries.append(("head.weight", (hyper.hidden,)))
    entries.append(("head.bias", ()))
    return tuple(entries)


def meta_layout(n_channels: int, hyper: MetaHyper) -> Layout:
    entries = _lstm_layout("lstm", n_channels + 1, hyper.hidden)
    entries.append(("head.weight", (hyper.hidden,)))
    return tuple(entries)


def init_params(layout: Layout, seed: int) -> ParamVector:
    """Deterministic initialization from a numpy generator.

    Weight matrices draw uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with
    fan_in = prod(shape[1:]); normalization gains start at 1; every bias and
    the final head start at 0, so a fresh network outputs exactly 0.5.
    """
    rng = np.random.default_rng(seed)
    named = []
    for name, shape in layout:
        is_bias = ".bias" in name or ".bias_" in name or "bias_ih" in name or "bias_hh" in name
        if name.startswith("head.") or is_bias:
            arr = np.zeros(shape)
        elif name.endswith(".gain"):
            arr = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        named.append((name, arr))
    return ParamVector.from_named(named)


def randomize_params(layout: Layout, seed: int, scale: float = 0.3) -> ParamVector:
    """Fully random parameters (head and biases included); used by tests."""
    rng = np.random.default_rng(seed)
    named = [(name, scale * rng.standard_normal(shape)) for name, shape in layout]
    return ParamVector.from_named(named)


# ---------------------------------------------------------------------------
# Tensor packing


def as_tensors(pv: ParamVector, requires_grad: bool = False) -> dict[str, torch.Tensor]:
    """Copy a ParamVector into named float64 leaf tensors."""
    out = {}
    for name, arr in pv.unflatten().items():
        t = torch.tensor(np.array(arr), dtype=DTYPE)
        if requires_grad:
            t.requires_grad_(True)
        out[name] = t
    return out


def tensors_to_vector(named: Mapping[str, torch.Tensor], layout: Layout) -> ParamVector:
    """Flatten named tensors back into a ParamVector following `layout`."""
    parts = []
    for name, shape in layout:
        if name not in named:
            raise ShapeMismatch(f"tensor dict lacks parameter {name!r}")
        t = named[name]
        if tuple(t.shape) != tuple(shape):
            raise ShapeMismatch(f"parameter {name!r} has shape {tuple(t.shape)}, expected {shape}")
        parts.append(t.detach().cpu().numpy().ravel())
    flat = np.concatenate(parts) if parts else np.zeros(0)
    return ParamVector(flat, layout)


def grads_to_vector(
    grads: Sequence[torch.Tensor], layout: Layout
) -> ParamVector:
    flat = (
        np.concatenate([g.detach().cpu().numpy().ravel() for g in grads])
        if grads
        else np.zeros(0)
    )
    vec = ParamVector(flat, layout)
    if not np.all(np.isfinite(vec.values)):
        raise NonFinite("gradient contains NaN or Inf")
    return vec


# ---------------------------------------------------------------------------
# Forward passes


def _clamp_prob(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def _stat_norm(h: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Normalize by the per-sample mean/std over (channel, time), then affine."""
    mu = h.mean(dim=(1, 2), keepdim=True)
    var = h.var(dim=(1, 2), unbiased=False, keepdim=True)
    hn = (h - mu) / torch.sqrt(var + NORM_EPS)
    return hn * gain.view(1, -1, 1) + bias.view(1, -1, 1)


def _resnet_forward(
    p: Mapping[str, torch.Tensor], x: torch.Tensor, hyper: MainHyper
) -> torch.Tensor:
    pad = hyper.kernel // 2
    h = F.conv1d(x, p["stem.weight"], p["stem.bias"], padding=pad)
    for b in range(hyper.blocks):
        pre = f"block{b}"
        branch = F.conv1d(h, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"], stride=2, padding=pad)
        branch = _stat_norm(branch, p[f"{pre}.norm1.gain"], p[f"{pre}.norm1.bias"])
        branch = torch.relu(branch)
        branch = F.conv1d(branch, p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"], padding=pad)
        branch = _stat_norm(branch, p[f"{pre}.norm2.gain"], p[f"{pre}.norm2.bias"])
        skip = F.conv1d(h, p[f"{pre}.proj.weight"], p[f"{pre}.proj.bias"], stride=2)
        h = torch.relu(skip + branch)
    feat = h.mean(dim=2)
    logit = feat @ p["head.weight"] + p["head.bias"]
    return _clamp_prob(torch.sigmoid(logit))


@functools.lru_cache(maxsize=None)
def _lstm_module(input_size: int, hidden: int) -> torch.nn.LSTM:
    mod = torch.nn.LSTM(input_size, hidden, num_layers=1, batch_first=True).to(DTYPE)
    for prm in mod.parameters():
        prm.requires_grad_(False)
    return mod


def _run_lstm(
    p: Mapping[str, torch.Tensor], seq: torch.Tensor, hidden: int, prefix: str = "lstm"
) -> torch.Tensor:
    """Final hidden state of a single-layer LSTM over seq [B, T, F]."""
    mod = _lstm_module(int(seq.shape[2]), hidden)
    mapping = {
        "weight_ih_l0": p[f"{prefix}.weight_ih_l0"],
        "weight_hh_l0": p[f"{prefix}.weight_hh_l0"],
        "bias_ih_l0": p[f"{prefix}.bias_ih_l0"],
        "bias_hh_l0": p[f"{prefix}.bias_hh_l0"],
    }
    _, (h_n, _) = torch.func.functional_call(mod, mapping, (seq,))
    return h_n[-1]


def _lstm_forward(
    p: Mapping[str, torch.Tensor], x: torch.Tensor, hyper: MainHyper
) -> torch.Tensor:
    feat = _run_lstm(p, x.transpose(1, 2), hyper.hidden)
    logit = feat @ p["head.weight"] + p["head.bias"]
    return _clamp_prob(torch.sigmoid(logit))


def _meta_forward_t(
    p: Mapping[str, torch.Tensor],
    x: torch.Tensor,
    y: torch.Tensor,
    hyper: MetaHyper,
) -> torch.Tensor:
    b = x.shape[0]
    seq = torch.cat([x, y], dim=2).transpose(1, 2)  # [B, Tx+Ty, C]
    flag = torch.cat(
        [
            torch.zeros(b, x.shape[2], 1, dtype=DTYPE),
            torch.ones(b, y.shape[2], 1, dtype=DTYPE),
        ],
        dim=1,
    )
    feat = _run_lstm(p, torch.cat([seq, flag], dim=2), hyper.hidden)
    logit = feat @ p["head.weight"]
    return _clamp_prob(torch.sigmoid(logit))


# ---------------------------------------------------------------------------
# Network handles


def _check_batch(x: np.ndarray | torch.Tensor, n_channels: int, n_cols: int, what: str) -> None:
    if x.ndim != 3 or x.shape[1] != n_channels or x.shape[2] != n_cols:
        raise ShapeMismatch(
            f"{what} batch must have shape [B, {n_channels}, {n_cols}], "
            f"got {tuple(x.shape)}"
        )


@dataclass(frozen=True, eq=False)
class MainNetwork:
    """Binary classifier over history segments X."""

    architecture: Architecture
    n_channels: int
    x_samples: int
    hyper: MainHyper
    params: ParamVector

    @classmethod
    def build(
        cls,
        architecture: Architecture | str,
        n_channels: int,
        x_samples: int,
        hyper: MainHyper | None = None,
        seed: int = 0,
    ) -> "MainNetwork":
        arch = Architecture(architecture)
        hyper = hyper if hyper is not None else MainHyper()
        if n_channels < 1 or x_samples < 1:
            raise InvalidConfig("n_channels and x_samples must be >= 1")
        layout = (
            resnet_layout(n_channels, hyper)
            if arch is Architecture.RESNET1D
            else lstm_layout(n_channels, hyper)
        )
        return cls(arch, n_channels, x_samples, hyper, init_params(layout, seed))

    def with_params(self, pv: ParamVector) -> "MainNetwork":
        if pv.layout != self.params.layout:
            raise ShapeMismatch("parameter layout does not match this network")
        return MainNetwork(self.architecture, self.n_channels, self.x_samples, self.hyper, pv)

    def forward_t(self, p: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
        """Probability batch [B] from parameter tensors; differentiable."""
        _check_batch(x, self.n_channels, self.x_samples, "X")
        if self.architecture is Architecture.RESNET1D:
            return _resnet_forward(p, x, self.hyper)
        return _lstm_forward(p, x, self.hyper)

    def forward_batch(self, xs: np.ndarray, batch_size: int = 256) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if not xs.flags.writeable:
            xs = xs.copy()
        _check_batch(xs, self.n_channels, self.x_samples, "X")
        p = as_tensors(self.params)
        outs = []
        with torch.no_grad():
            for i in range(0, xs.shape[0], batch_size):
                xb = torch.from_numpy(xs[i : i + batch_size])
                outs.append(self.forward_t(p, xb).numpy())
        return np.concatenate(outs) if outs else np.zeros(0)

    def forward(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeMismatch("single forward expects a [channels, samples] array")
        return float(self.forward_batch(x[None, :, :])[0])


@dataclass(frozen=True, eq=False)
class MetaNetwork:
    """Labeling network g_alpha(X, Y) -> soft label in (0, 1)."""

    n_channels: int
    x_samples: int
    y_samples: int
    hyper: MetaHyper
    params: ParamVector

    @classmethod
    def build(
        cls,
        n_channels: int,
        x_samples: int,
        y_samples: int,
        hyper: MetaHyper | None = None,
        seed: int = 0,
    ) -> "MetaNetwork":
        hyper = hyper if hyper is not None else MetaHyper()
        if n_channels < 1 or x_samples < 1 or y_samples < 1:
            raise InvalidConfig("n_channels, x_samples and y_samples must be >= 1")
        return cls(
            n_channels,
            x_samples,
            y_samples,
            hyper,
            init_params(meta_layout(n_channels, hyper), seed),
        )

    def with_params(self, pv: ParamVector) -> "MetaNetwork":
        if pv.layout != self.params.layout:
            raise ShapeMismatch("parameter layout does not match this network")
        return MetaNetwork(self.n_channels, self.x_samples, self.y_samples, self.hyper, pv)

    def forward_t(
        self, p: Mapping[str, torch.Tensor], x: torch.Tensor, y: torch.Tensor
    ) -> torch.Tensor:
        _check_batch(x, self.n_channels, self.x_samples, "X")
        _check_batch(y, self.n_channels, self.y_samples, "Y")
        if x.shape[0] != y.shape[0]:
            raise ShapeMismatch("X and Y batches must have equal size")
        return _meta_forward_t(p, x, y, self.hyper)

    def forward_batch(
        self, xs: np.ndarray, ys: np.ndarray, batch_size: int = 256
    ) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if not xs.flags.writeable:
            xs = xs.copy()
        if not ys.flags.writeable:
            ys = ys.copy()
        p = as_tensors(self.params)
        outs = []
        with torch.no_grad():
            for i in range(0, xs.shape[0], batch_size):
                xb = torch.from_numpy(xs[i : i + batch_size])
                yb = torch.from_numpy(ys[i : i + batch_size])
                outs.append(self.forward_t(p, xb, yb).numpy())
        return np.concatenate(outs) if outs else np.zeros(0)

    def forward(self, x: np.ndarray, y: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2:
            raise ShapeMismatch("single forward expects [channels, samples] arrays")
        return float(self.forward_batch(x[None], y[None])[0])


# ---------------------------------------------------------------------------
# Loss and gradient


def bce_loss_t(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on tensors; predictions are eps-clamped."""
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def bce_loss(pred: np.ndarray | float, target: np.ndarray | float) -> float:
    """Mean binary cross-entropy -mean(t*log(p) + (1-t)*log(1-p)).

    Predictions are clamped to [PROB_EPS, 1 - PROB_EPS]; targets may be soft
    but must lie in [0, 1]. Shapes must match exactly.
    """
    p = np.atleast_1d(np.asarray(pred, dtype=np.float64))
    t = np.atleast_1d(np.asarray(target, dtype=np.float64))
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.size == 0:
        raise ShapeMismatch("bce_loss needs at least one element")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise NonFinite("bce_loss received NaN or Inf")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("targets must lie in [0, 1]")
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    val = float(-np.mean(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)))
    if not np.isfinite(val):
        raise NonFinite("bce_loss produced a non-finite value")
    return val


LossFn = Callable[[Mapping[str, torch.Tensor]], torch.Tensor]


def grad(loss_fn: LossFn, params: ParamVector) -> ParamVector:
    """Gradient of loss_fn(parameter tensors) with respect to the flat vector."""
    tensors = as_tensors(params, requires_grad=True)
    loss = loss_fn(tensors)
    if loss.ndim != 0:
        raise ShapeMismatch("loss_fn must return a scalar")
    gs = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    filled = [
        g if g is not None else torch.zeros_like(t)
        for g, t in zip(gs, tensors.values())
    ]
    return grads_to_vector(filled, params.layout)


# ---------------------------------------------------------------------------
# Checkpoints
#
# params.bin: magic, format version, header length, JSON layout header, then
# the flat float64 little-endian payload. arch.json describes how to rebuild
# the network object around the vector.


def save_params(pv: ParamVector, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"layout": [[n, list(s)] for n, s in pv.layout]}).encode()
    with path.open("wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<II", PARAMS_FORMAT_VERSION, len(header)))
        f.write(header)
        f.write(pv.values.astype("<f8").tobytes())
    return path


def load_params(path: str | Path) -> ParamVector:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"no parameter file at {path}")
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != PARAMS_MAGIC:
        raise FormatError(f"{path} is not a parameter checkpoint")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != PARAMS_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 12 + header_len:
        raise FormatError(f"{path} is truncated inside its header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode())
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in header["layout"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad checkpoint header: {e}") from e
    payload = blob[12 + header_len :]
    n = sum(int(np.prod(s)) for _, s in layout)
    if len(payload) != 8 * n:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, layout needs {8 * n}"
        )
    values = np.frombuffer(payload, dtype="<f8").copy()
    return ParamVector(values, layout)


def save_main_network(net: MainNetwork, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(net.params, out / "params.bin")
    doc = {
        "format_version": ARCH_FORMAT_VERSION,
        "kind": "main",
        "architecture": net.architecture.value,
        "n_channels": net.n_channels,
        "x_samples": net.x_samples,
        "hyper": asdict(net.hyper),
    }
    (out / "arch.json").write_text(json.dumps(doc, indent=2) + "\n")
    return out


def save_meta_network(net: MetaNetwork, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(net.params, out / "params.bin")
    doc = {
        "format_version": ARCH_FORMAT_VERSION,
        "kind": "meta",
        "n_channels": net.n_channels,
        "x_samples": net.x_samples,
        "y_samples": net.y_samples,
        "hyper": asdict(net.hyper),
    }
    (out / "arch.json").write_text(json.dumps(doc, indent=2) + "\n")
    return out


def _load_arch(in_dir: Path) -> dict:
    arch_path = in_dir / "arch.json"
    if not arch_path.exists():
        raise MissingCheckpoint(f"no arch.json under {in_dir}")
    try:
        doc = json.loads(arch_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{arch_path} is not valid JSON: {e}") from e
    if doc.get("format_version") != ARCH_FORMAT_VERSION:
        raise FormatError(f"{arch_path}: unsupported version {doc.get('format_version')!r}")
    return doc


def load_main_network(in_dir: str | Path) -> MainNetwork:
    d = Path(in_dir)
    doc = _load_arch(d)
    if doc.get("kind") != "main":
        raise FormatError(f"{d}: checkpoint kind {doc.get('kind')!r} is not 'main'")
    hyper_doc = dict(doc["hyper"])
    hyper_doc["widths"] = tuple(hyper_doc.get("widths", ()))
    hyper = MainHyper(**hyper_doc)
    pv = load_params(d / "params.bin")
    net = MainNetwork(
        architecture=Architecture(doc["architecture"]),
        n_channels=int(doc["n_channels"]),
        x_samples=int(doc["x_samples"]),
        hyper=hyper,
        params=pv,
    )
    expected = (
        resnet_layout(net.n_channels, hyper)
        if net.architecture is Architecture.RESNET1D
        else lstm_layout(net.n_channels, hyper)
    )
    if pv.layout != expected:
        raise FormatError(f"{d}: parameter layout does not match arch.json")
    return net


def load_meta_network(in_dir: str | Path) -> MetaNetwork:
    d = Path(in_dir)
    doc = _load_arch(d)
    if doc.get("kind") != "meta":
        raise FormatError(f"{d}: checkpoint kind {doc.get('kind')!r} is not 'meta'")
    hyper = MetaHyper(**dict(doc["hyper"]))
    pv = load_params(d / "params.bin")
    net = MetaNetwork(
        n_channels=int(doc["n_channels"]),
        x_samples=int(doc["x_samples"]),
        y_samples=int(doc["y_samples"]),
        hyper=hyper,
        params=pv,
    )
    if pv.layout != meta_layout(net.n_channels, hyper):
        raise FormatError(f"{d}: parameter layout does not match arch.json")
    return net
