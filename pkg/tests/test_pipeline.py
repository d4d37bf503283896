"""Standardization, peri-onset partitioning, splits, dataset files."""

import dataclasses

import numpy as np
import pytest

from metaictal.core import Episode, Purity
from metaictal.errors import (
    FormatError,
    InsufficientData,
    InvalidConfig,
    ShapeMismatch,
    UnknownEpisode,
)
from metaictal.pipeline import (
    PartitionOptions,
    apply_stats,
    compute_stats,
    load_dataset,
    normalize,
    partition,
    save_dataset,
    split_train_test,
)
from metaictal.synthgen import SynthConfig, generate_cohort


def flat_episode(episode_id="ep", fs=16.0, duration=200.0, onsets=(100.0,), seed=0):
    rng = np.random.default_rng(seed)
    n = round(duration * fs)
    return Episode(
        id=episode_id,
        sample_rate_hz=fs,
        duration_s=duration,
        onset_times_s=tuple(onsets),
        channels=rng.standard_normal((2, n)),
    )


COHORT_CFG = SynthConfig(
    n_channels=2,
    sample_rate_hz=16.0,
    duration_s=200.0,
    onset_s=120.0,
    ramp_s=40.0,
    seed=0,
)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(COHORT_CFG, 5, seed_base=11)


# ---------------------------------------------------------------------------
# Standardization


def test_normalize_zero_mean_unit_variance():
    eps = [flat_episode(f"e{i}", seed=i) for i in range(3)]
    out, stats = normalize(eps)
    pooled = np.concatenate([ep.channels for ep in out], axis=1)
    np.testing.assert_allclose(pooled.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(pooled.std(axis=1), 1.0, atol=1e-12)
    assert stats.source_episodes == ("e0", "e1", "e2")


def test_normalize_stats_from_subset():
    eps = [flat_episode(f"e{i}", seed=i) for i in range(3)]
    out, stats = normalize(eps, stats_from=["e0", "e1"])
    assert stats.source_episodes == ("e0", "e1")
    # all three transformed, but moments only guaranteed for the sources
    pooled = np.concatenate([ep.channels for ep in out[:2]], axis=1)
    np.testing.assert_allclose(pooled.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(pooled.std(axis=1), 1.0, atol=1e-12)


def test_normalize_constant_channel_centered_not_scaled():
    n = round(10.0 * 16)
    ep = Episode(
        id="const",
        sample_rate_hz=16.0,
        duration_s=10.0,
        onset_times_s=(5.0,),
        channels=np.vstack([np.full(n, 7.0), np.random.default_rng(0).standard_normal(n)]),
    )
    out, stats = normalize([ep])
    np.testing.assert_allclose(out[0].channels[0], 0.0, atol=1e-12)
    assert stats.scale()[0] == 1.0


def test_apply_stats_channel_count_mismatch():
    eps = [flat_episode()]
    _, stats = normalize(eps)
    other = flat_episode()
    three = Episode(
        id="three",
        sample_rate_hz=other.sample_rate_hz,
        duration_s=other.duration_s,
        onset_times_s=other.onset_times_s,
        channels=np.vstack([other.channels, other.channels[:1]]),
    )
    with pytest.raises(ShapeMismatch):
        apply_stats(three, stats)


def test_compute_stats_empty():
    with pytest.raises(InsufficientData):
        compute_stats([])


# ---------------------------------------------------------------------------
# Partition: the peri-onset zone


def test_partition_counts_and_zone():
    ep = flat_episode(duration=200.0, onsets=(100.0,))
    clean, noisy = partition(ep, 20.0, 5.0)
    assert len(noisy) == 40
    assert len(clean) == 80
    ends = sorted(w.pair.t_end_s for w in noisy)
    assert ends[0] == pytest.approx(90.0)  # onset - 10 included
    assert ends[-1] == pytest.approx(109.5)  # onset + 10 excluded
    starts = sorted(w.pair.t_start_s for w in noisy)
    assert starts[0] == pytest.approx(65.0)
    assert starts[-1] == pytest.approx(84.5)
    assert all(w.label is None for w in noisy)


def test_partition_clean_sides():
    ep = flat_episode(duration=200.0, onsets=(100.0,))
    clean, _ = partition(ep, 20.0, 5.0)
    zero = sorted(w.pair.t_end_s for w in clean if w.label == 0)
    one = sorted(w.pair.t_end_s for w in clean if w.label == 1)
    assert len(zero) == len(one) == 40
    # nearest-first below the zone: t_end from 89.5 down to 70.0
    assert zero[-1] == pytest.approx(89.5)
    assert zero[0] == pytest.approx(70.0)
    # nearest-first at and above the zone close: 110.0 up to 129.5
    assert one[0] == pytest.approx(110.0)
    assert one[-1] == pytest.approx(129.5)


def test_partition_windows_unique_and_sorted():
    ep = flat_episode(duration=200.0, onsets=(100.0,))
    clean, noisy = partition(ep, 20.0, 5.0)
    keys = [round(w.pair.t_start_s * 1e6) for w in clean + noisy]
    assert len(set(keys)) == len(keys)
    for group in (clean, noisy):
        starts = [w.pair.t_start_s for w in group]
        assert starts == sorted(starts)


def test_partition_insufficient_left_side():
    # onset at 30 s: label-0 windows would need to start before t = 0
    ep = flat_episode(duration=200.0, onsets=(30.0,))
    with pytest.raises(InsufficientData):
        partition(ep, 20.0, 5.0)


def test_partition_insufficient_right_side():
    ep = flat_episode(duration=124.0, onsets=(100.0,))
    with pytest.raises(InsufficientData):
        partition(ep, 20.0, 5.0)


def test_partition_two_onsets_zones_disjoint():
    ep = flat_episode(duration=400.0, onsets=(150.0, 250.0))
    clean, noisy = partition(ep, 20.0, 5.0)
    assert len(noisy) == 80
    zones = [(140.0, 160.0), (240.0, 260.0)]
    for w in clean:
        inside = any(lo - 1e-9 <= w.pair.t_end_s < hi - 1e-9 for lo, hi in zones)
        assert not inside


def test_partition_options_validation():
    with pytest.raises(InvalidConfig):
        PartitionOptions(stride_s=0.0)
    with pytest.raises(InvalidConfig):
        PartitionOptions(noisy_halfwidth_s=10.3)  # not a stride multiple
    with pytest.raises(InvalidConfig):
        PartitionOptions(clean_per_side=0)


# ---------------------------------------------------------------------------
# Split


def test_split_counts(cohort):
    train, test = split_train_test(cohort, "synth-004", (20.0, 5.0))
    assert len(train.clean) == 4 * 80
    assert len(train.noisy) == 4 * 40
    assert len(test.clean) == 80
    assert len(test.noisy) == 40
    assert {w.pair.episode_id for w in test.clean} == {"synth-004"}
    assert "synth-004" not in {w.pair.episode_id for w in train.clean}


def test_split_stats_from_training_only(cohort):
    train, test = split_train_test(cohort, "synth-004", (20.0, 5.0))
    assert "synth-004" not in train.normalization_stats.source_episodes
    assert train.normalization_stats.source_episodes == test.normalization_stats.source_episodes
    # test windows are standardized with those statistics: recompute one
    raw = cohort[-1]
    assert raw.id == "synth-004"
    stats = train.normalization_stats
    w = test.clean[0]
    i0 = round(w.pair.t_start_s * raw.sample_rate_hz)
    seg = (raw.channels[:, i0 : i0 + w.pair.x.shape[1]] - stats.mean[:, None]) / stats.scale()[:, None]
    np.testing.assert_allclose(w.pair.x, seg, atol=1e-12)


def test_split_unknown_episode(cohort):
    with pytest.raises(UnknownEpisode):
        split_train_test(cohort, "missing", (20.0, 5.0))


def test_split_carries_ground_truth_metadata(cohort):
    train, test = split_train_test(cohort, "synth-004", (20.0, 5.0))
    for ds in (train, test):
        for ep_id, meta in ds.episode_meta.items():
            assert meta.onset_times_s == (COHORT_CFG.onset_s,)
            assert meta.duration_s == COHORT_CFG.duration_s


def test_split_grid_recorded(cohort):
    train, _ = split_train_test(cohort, "synth-000", (20.0, 10.0))
    assert train.grid == (20.0, 10.0)
    assert train.clean[0].pair.y.shape[1] == round(10.0 * COHORT_CFG.sample_rate_hz)


# ---------------------------------------------------------------------------
# Dataset files


def test_dataset_round_trip(tmp_path, cohort):
    train, _ = split_train_test(cohort, "synth-004", (20.0, 5.0))
    save_dataset(train, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.grid == train.grid
    assert len(back.clean) == len(train.clean)
    assert len(back.noisy) == len(train.noisy)
    for a, b in zip(train.clean[:5], back.clean[:5]):
        assert a.label == b.label
        assert a.pair.t_start_s == b.pair.t_start_s
        np.testing.assert_array_equal(a.pair.x, b.pair.x)
        np.testing.assert_array_equal(a.pair.y, b.pair.y)
    np.testing.assert_array_equal(
        back.normalization_stats.mean, train.normalization_stats.mean
    )
    assert back.episode_meta.keys() == train.episode_meta.keys()


def test_dataset_truncated_tensors(tmp_path, cohort):
    train, _ = split_train_test(cohort, "synth-004", (20.0, 5.0))
    save_dataset(train, tmp_path / "ds")
    blob = (tmp_path / "ds" / "tensors.bin").read_bytes()
    (tmp_path / "ds" / "tensors.bin").write_bytes(blob[:-16])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "ds")


def test_dataset_missing_directory(tmp_path):
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "nope")
