"""Synthetic cohort generator with a critical-slowing-down precursor.

Each episode is a latent Ornstein-Uhlenbeck process whose mean-reversion
rate decays linearly over a ramp ending at the onset, so the stationary
variance sigma^2 / (2 theta) rises as the onset approaches. From the onset
the latent switches to a high-amplitude oscillation. Channels are the
latent scaled by per-channel mixing weights plus independent sensor noise.

Euler-Maruyama at dt = 1 / sample_rate_hz:
    z[i+1] = z[i] - theta(t_i) * z[i] * dt + noise_sigma * sqrt(dt) * xi[i]
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .core import Episode
from .errors import InvalidConfig

#: theta never decays below this fraction of its resting value.
THETA_FLOOR_FRACTION = 0.05

#: Per-channel sensor noise, as a fraction of noise_sigma.
CHANNEL_NOISE_FRACTION = 0.1


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of one synthetic episode.

    ramp_s is the span before onset_s over which the mean-reversion rate
    decays from rest_theta to THETA_FLOOR_FRACTION * rest_theta.
    """

    n_channels: int = 8
    sample_rate_hz: float = 32.0
    duration_s: float = 240.0
    onset_s: float = 160.0
    ramp_s: float = 45.0
    rest_theta: float = 2.0
    noise_sigma: float = 1.0
    ictal_amp: float = 4.0
    ictal_freq_hz: float = 4.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_channels < 1:
            raise InvalidConfig("n_channels must be >= 1")
        if self.sample_rate_hz <= 0:
            raise InvalidConfig("sample_rate_hz must be positive")
        if self.duration_s <= 0:
            raise InvalidConfig("duration_s must be positive")
        if not (0.0 < self.onset_s < self.duration_s):
            raise InvalidConfig("onset_s must lie strictly inside (0, duration_s)")
        if not (0.0 < self.ramp_s < self.onset_s):
            raise InvalidConfig("ramp_s must be positive and end before the onset")
        if self.rest_theta <= 0:
            raise InvalidConfig("rest_theta must be positive")
        if self.noise_sigma < 0:
            raise InvalidConfig("noise_sigma must be non-negative")
        if self.ictal_amp < 0:
            raise InvalidConfig("ictal_amp must be non-negative")
        if self.ictal_freq_hz <= 0:
            raise InvalidConfig("ictal_freq_hz must be positive")
        # The Euler step is unstable once theta * dt approaches 1.
        if self.rest_theta / self.sample_rate_hz >= 0.5:
            raise InvalidConfig(
                "rest_theta too large for sample_rate_hz (theta * dt must stay << 1)"
            )


def theta_at(cfg: SynthConfig, t_s: np.ndarray | float) -> np.ndarray:
    """Mean-reversion rate at time t: flat at rest, linear decay over the ramp."""
    t = np.asarray(t_s, dtype=np.float64)
    ramp_start = cfg.onset_s - cfg.ramp_s
    frac = np.clip((t - ramp_start) / cfg.ramp_s, 0.0, 1.0)
    return cfg.rest_theta * (1.0 - (1.0 - THETA_FLOOR_FRACTION) * frac)


def generate_episode(cfg: SynthConfig, episode_id: str | None = None) -> Episode:
    """Draw one episode; identical config (incl. seed) gives identical output."""
    rng = np.random.default_rng(cfg.seed)
    fs = cfg.sample_rate_hz
    dt = 1.0 / fs
    n = round(cfg.duration_s * fs)
    times = np.arange(n) * dt

    # Draw order is fixed: mixing weights, initial state, latent noise, sensor noise.
    mix = rng.uniform(0.5, 1.5, size=cfg.n_channels)
    rest_sd = cfg.noise_sigma / np.sqrt(2.0 * cfg.rest_theta)
    z0 = float(rng.normal(0.0, rest_sd))
    xi = rng.standard_normal(n)
    sensor = rng.standard_normal((cfg.n_channels, n))

    theta = theta_at(cfg, times)
    sq = cfg.noise_sigma * np.sqrt(dt)
    onset_idx = int(np.searchsorted(times, cfg.onset_s - 1e-12))

    z = np.empty(n)
    z[0] = z0
    for i in range(1, onset_idx):
        z[i] = z[i - 1] - theta[i - 1] * z[i - 1] * dt + sq * xi[i - 1]
    if onset_idx < n:
        ict = np.arange(onset_idx, n)
        z[ict] = (
            cfg.ictal_amp * np.sin(2.0 * np.pi * cfg.ictal_freq_hz * times[ict])
            + sq * xi[ict - 1]
        )

    channels = mix[:, None] * z[None, :] + CHANNEL_NOISE_FRACTION * cfg.noise_sigma * sensor
    return Episode(
        id=episode_id if episode_id is not None else f"synth-{cfg.seed:03d}",
        channels=channels,
        sample_rate_hz=fs,
        onset_times_s=(cfg.onset_s,),
        duration_s=cfg.duration_s,
    )


def generate_cohort(cfg: SynthConfig, n_episodes: int, seed_base: int) -> list[Episode]:
    """Episodes `synth-000` ... with seeds seed_base, seed_base+1, ...

    At least two episodes are required so a train/test split exists.
    """
    if n_episodes < 2:
        raise InvalidConfig("a cohort needs at least 2 episodes for a split")
    out = []
    for i in range(n_episodes):
        ep_cfg = dataclasses.replace(cfg, seed=seed_base + i)
        out.append(generate_episode(ep_cfg, episode_id=f"synth-{i:03d}"))
    return out
