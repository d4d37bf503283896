"""Networks: initialization, forward contracts, loss, gradients, checkpoints."""

import numpy as np
import pytest
import torch

from _oracles import fd_grad, tiny_main, tiny_meta

from metaictal.core import ParamVector
from metaictal.errors import (
    FormatError,
    InvalidConfig,
    MissingCheckpoint,
    NonFinite,
    ShapeMismatch,
)
from metaictal.nets import (
    Architecture,
    MainHyper,
    MainNetwork,
    MetaHyper,
    MetaNetwork,
    as_tensors,
    bce_loss,
    bce_loss_t,
    grad,
    init_params,
    load_main_network,
    load_meta_network,
    load_params,
    randomize_params,
    resnet_layout,
    save_main_network,
    save_meta_network,
    save_params,
)

ARCHS = [Architecture.RESNET1D, Architecture.LSTM]


# ---------------------------------------------------------------------------
# Initialization and forward contracts


@pytest.mark.parametrize("arch", ARCHS)
def test_fresh_network_outputs_exactly_half(arch):
    net = MainNetwork.build(arch, 3, 32, seed=4)
    x = np.random.default_rng(0).standard_normal((5, 3, 32))
    np.testing.assert_array_equal(net.forward_batch(x), 0.5)


def test_fresh_meta_outputs_exactly_half():
    net = MetaNetwork.build(2, 16, 8, seed=4)
    rng = np.random.default_rng(0)
    out = net.forward_batch(rng.standard_normal((3, 2, 16)), rng.standard_normal((3, 2, 8)))
    np.testing.assert_array_equal(out, 0.5)


def test_init_is_deterministic():
    a = MainNetwork.build(Architecture.RESNET1D, 2, 16, seed=9)
    b = MainNetwork.build(Architecture.RESNET1D, 2, 16, seed=9)
    c = MainNetwork.build(Architecture.RESNET1D, 2, 16, seed=10)
    np.testing.assert_array_equal(a.params.values, b.params.values)
    assert not np.array_equal(a.params.values, c.params.values)


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_batch_matches_single(arch):
    net = tiny_main(arch, n_channels=2, x_samples=10, seed=1)
    net = net.with_params(randomize_params(net.params.layout, seed=2))
    xs = np.random.default_rng(3).standard_normal((7, 2, 10))
    batch = net.forward_batch(xs)
    singles = [net.forward(x) for x in xs]
    np.testing.assert_allclose(batch, singles, atol=1e-12)
    assert np.all((batch > 0) & (batch < 1))


def test_forward_batch_chunking_consistent():
    net = tiny_main(Architecture.RESNET1D, n_channels=1, x_samples=8, seed=1)
    net = net.with_params(randomize_params(net.params.layout, seed=2))
    xs = np.random.default_rng(0).standard_normal((30, 1, 8))
    np.testing.assert_array_equal(
        net.forward_batch(xs, batch_size=7), net.forward_batch(xs, batch_size=256)
    )


def test_forward_shape_checks():
    net = MainNetwork.build(Architecture.RESNET1D, 3, 32, seed=0)
    with pytest.raises(ShapeMismatch):
        net.forward_batch(np.zeros((2, 2, 32)))  # wrong channel count
    with pytest.raises(ShapeMismatch):
        net.forward_batch(np.zeros((2, 3, 31)))  # wrong sample count
    meta = MetaNetwork.build(2, 16, 8, seed=0)
    with pytest.raises(ShapeMismatch):
        meta.forward_batch(np.zeros((2, 2, 16)), np.zeros((3, 2, 8)))  # batch mismatch


def test_forward_accepts_read_only_arrays():
    net = MainNetwork.build(Architecture.RESNET1D, 1, 16, seed=0)
    x = np.zeros((2, 1, 16))
    x.setflags(write=False)
    np.testing.assert_array_equal(net.forward_batch(x), 0.5)


def test_with_params_layout_check():
    a = MainNetwork.build(Architecture.RESNET1D, 2, 16, seed=0)
    b = MainNetwork.build(Architecture.LSTM, 2, 16, seed=0)
    with pytest.raises(ShapeMismatch):
        a.with_params(b.params)


def test_hyper_validation():
    with pytest.raises(InvalidConfig):
        MainHyper(blocks=2, widths=(8,), kernel=7, hidden=16)  # widths/blocks mismatch
    with pytest.raises(InvalidConfig):
        MainHyper(blocks=1, widths=(8,), kernel=4, hidden=16)  # even kernel
    with pytest.raises(InvalidConfig):
        MetaHyper(hidden=0)


# ---------------------------------------------------------------------------
# Cross entropy


def test_bce_half_is_ln2():
    assert bce_loss(0.5, 1.0) == pytest.approx(np.log(2.0), abs=1e-15)
    assert bce_loss(0.5, 0.0) == pytest.approx(np.log(2.0), abs=1e-15)


def test_bce_symmetry():
    for p in (0.1, 0.25, 0.6, 0.9):
        assert abs(bce_loss(p, 0.0) - bce_loss(1.0 - p, 1.0)) < 1e-12


def test_bce_known_value():
    # -ln(0.4): confidently wrong by 0.1 above chance
    assert bce_loss(0.6, 0.0) == pytest.approx(0.9162907318741551, abs=1e-12)


def test_bce_batch_mean_and_permutation_invariance():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, 20)
    t = rng.integers(0, 2, 20).astype(float)
    total = bce_loss(p, t)
    per = np.mean([bce_loss(a, b) for a, b in zip(p, t)])
    assert total == pytest.approx(per, rel=1e-12)
    perm = rng.permutation(20)
    assert bce_loss(p[perm], t[perm]) == pytest.approx(total, rel=1e-12)


def test_bce_soft_targets():
    # cross entropy against a soft target is minimized at p = target
    losses = [bce_loss(p, 0.3) for p in (0.1, 0.3, 0.7)]
    assert losses[1] < losses[0] and losses[1] < losses[2]


def test_bce_error_cases():
    with pytest.raises(ShapeMismatch):
        bce_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        bce_loss(np.zeros(0), np.zeros(0))
    with pytest.raises(NonFinite):
        bce_loss(np.array([np.nan, 0.5]), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        bce_loss(np.array([0.5]), np.array([1.5]))


def test_bce_loss_t_matches_numpy():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.01, 0.99, 16)
    t = rng.uniform(0.0, 1.0, 16)
    tv = float(bce_loss_t(torch.from_numpy(p), torch.from_numpy(t)))
    assert tv == pytest.approx(bce_loss(p, t), rel=1e-12)


# ---------------------------------------------------------------------------
# Gradients against finite differences


@pytest.mark.parametrize("arch", ARCHS)
def test_gradient_matches_finite_differences(arch):
    """grad() agrees with central differences on tiny nets, several seeds."""
    rng = np.random.default_rng(7)
    for seed in range(3):
        net = tiny_main(arch, n_channels=1, x_samples=8, seed=seed)
        assert net.params.size <= 200
        net = net.with_params(randomize_params(net.params.layout, seed=seed + 50))
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
        np.testing.assert_allclose(g.values, g_fd, rtol=1e-4, atol=1e-6)


def test_meta_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    net = tiny_meta(n_channels=1, x_samples=8, y_samples=4, seed=0)
    net = net.with_params(randomize_params(net.params.layout, seed=3))
    x = rng.standard_normal((4, 1, 8))
    y = rng.standard_normal((4, 1, 4))
    t = rng.integers(0, 2, 4).astype(float)

    def loss_fn(p):
        return bce_loss_t(
            net.forward_t(p, torch.from_numpy(x), torch.from_numpy(y)),
            torch.from_numpy(t),
        )

    def loss_at(pv):
        with torch.no_grad():
            return float(loss_fn(as_tensors(pv)))

    g = grad(loss_fn, net.params)
    np.testing.assert_allclose(g.values, fd_grad(loss_at, net.params), rtol=1e-4, atol=1e-6)


def test_grad_zero_fills_unused_parameters():
    net = tiny_main(Architecture.RESNET1D, seed=0)

    def loss_fn(p):
        return (p["head.weight"] ** 2).sum()  # touches a single parameter

    g = grad(loss_fn, net.params)
    assert g.size == net.params.size
    assert np.all(np.isfinite(g.values))


def test_grad_rejects_nonfinite():
    net = tiny_main(Architecture.RESNET1D, seed=0)

    def loss_fn(p):
        return torch.log(p["head.weight"].sum())  # -inf gradient at 0

    with pytest.raises(NonFinite):
        grad(loss_fn, net.params)


# ---------------------------------------------------------------------------
# Amplitude sensitivity (the early-warning cue must be learnable)


def test_resnet_is_not_scale_invariant():
    """Per-block normalization must not erase overall signal amplitude."""
    net = tiny_main(Architecture.RESNET1D, n_channels=1, x_samples=16, seed=0)
    net = net.with_params(randomize_params(net.params.layout, seed=1))
    x = np.random.default_rng(2).standard_normal((1, 1, 16))
    assert abs(net.forward(x[0]) - net.forward(3.0 * x[0])) > 1e-6


# ---------------------------------------------------------------------------
# Checkpoints


def test_params_round_trip_bitwise(tmp_path):
    pv = randomize_params(resnet_layout(2, MainHyper()), seed=5)
    save_params(pv, tmp_path / "p.bin")
    back = load_params(tmp_path / "p.bin")
    np.testing.assert_array_equal(back.values, pv.values)
    assert back.layout == pv.layout


def test_params_missing_file(tmp_path):
    with pytest.raises(MissingCheckpoint):
        load_params(tmp_path / "absent.bin")


def test_params_truncated(tmp_path):
    pv = randomize_params(resnet_layout(1, MainHyper()), seed=5)
    save_params(pv, tmp_path / "p.bin")
    blob = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "p.bin").write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        load_params(tmp_path / "p.bin")


def test_params_bad_magic(tmp_path):
    pv = randomize_params(resnet_layout(1, MainHyper()), seed=5)
    save_params(pv, tmp_path / "p.bin")
    blob = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "p.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        load_params(tmp_path / "p.bin")


@pytest.mark.parametrize("arch", ARCHS)
def test_main_network_round_trip(tmp_path, arch):
    net = MainNetwork.build(arch, 2, 16, seed=1)
    net = net.with_params(randomize_params(net.params.layout, seed=2))
    save_main_network(net, tmp_path)
    back = load_main_network(tmp_path)
    assert back.architecture == net.architecture
    assert back.x_samples == net.x_samples
    np.testing.assert_array_equal(back.params.values, net.params.values)
    x = np.random.default_rng(0).standard_normal((3, 2, 16))
    np.testing.assert_array_equal(back.forward_batch(x), net.forward_batch(x))


def test_meta_network_round_trip(tmp_path):
    net = MetaNetwork.build(2, 16, 8, seed=1)
    net = net.with_params(randomize_params(net.params.layout, seed=2))
    save_meta_network(net, tmp_path)
    back = load_meta_network(tmp_path)
    assert back.y_samples == 8
    np.testing.assert_array_equal(back.params.values, net.params.values)


def test_main_network_wrong_kind(tmp_path):
    net = MetaNetwork.build(2, 16, 8, seed=1)
    save_meta_network(net, tmp_path)
    with pytest.raises(FormatError):
        load_main_network(tmp_path)


def test_main_network_corrupt_arch_json(tmp_path):
    net = MainNetwork.build(Architecture.RESNET1D, 2, 16, seed=1)
    save_main_network(net, tmp_path)
    (tmp_path / "arch.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_main_network(tmp_path)
