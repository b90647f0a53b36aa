import numpy as np
import pytest
import torch

from conftest import fd_check
from harunet.metrics import count_macs
from harunet.network import (HAB, RHAG, ChannelAttention, HaruNet, NetworkConfig, ResidualConvBlock,
                             WindowAttention, tiny_config)
from harunet.nn_core import MacCounter, ShapeError

D = torch.float64


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=gen(seed), dtype=D) * 2 - 1


def weighted_sum(out, seed=99):
    return (out * rand(*out.shape, seed=seed)).sum()


# ---------------------------------------------------------------- config

def test_default_widths():
    cfg = NetworkConfig()
    assert cfg.widths == (64, 128, 256, 512) and cfg.bottleneck_channels == 1024
    assert cfg.size_multiple == 128
    assert cfg.heads_for(64) == 2 and cfg.heads_for(1024) == 32


def test_config_text_round_trip(tmp_path):
    cfg = tiny_config(num_heads=(1, 2, 2, 4, 4), ablate_attention=True, cab_weight=0.5)
    assert NetworkConfig.from_text(cfg.to_text()) == cfg
    p = tmp_path / "n.cfg"
    p.write_text(NetworkConfig().to_text())
    assert NetworkConfig.load(p) == NetworkConfig()
    assert NetworkConfig.load(p, base_channels=32).base_channels == 32
    with pytest.raises(ValueError):
        NetworkConfig.from_text("colour = red\n")


@pytest.mark.parametrize("kw", [dict(rhag_depth=0), dict(num_heads=(3, 3, 3, 3, 3)),
                                dict(num_heads=(1, 2)), dict(se_reduction=16)])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        tiny_config(**kw)


# ---------------------------------------------------------------- residual block

def test_residual_block_identity_and_shape():
    blk = ResidualConvBlock(4, 4, gen=gen(), dtype=D)
    with torch.no_grad():
        for conv in (blk.conv1, blk.conv2):
            conv.weight.zero_()
            conv.bias.zero_()
        blk.proj.weight.copy_(torch.eye(4, dtype=D)[:, :, None, None])
        blk.proj.bias.zero_()
    x = rand(2, 4, 8, 8)
    assert torch.equal(blk(x), x)
    wide = ResidualConvBlock(64, 128, gen=gen())
    assert wide(torch.zeros(1, 64, 32, 32)).shape == (1, 128, 32, 32)
    with pytest.raises(ShapeError):
        wide(torch.zeros(1, 3, 8, 8))


def test_residual_block_projection_gets_grad_when_body_saturates():
    blk = ResidualConvBlock(3, 5, gen=gen(), dtype=D)
    with torch.no_grad():
        blk.conv2.weight.zero_()
        blk.conv2.bias.fill_(-10.0)
    blk(rand(1, 3, 6, 6)).sum().backward()
    assert torch.count_nonzero(blk.proj.weight.grad) > 0


# ---------------------------------------------------------------- window attention

def test_window_locality_at_shift_zero():
    att = WindowAttention(8, 4, 2, 0, gen=gen(), dtype=D)
    x = rand(1, 8, 16, 16)
    y0 = att(x)
    x2 = x.clone()
    x2[:, :, 4:8, 8:12] = 0
    y1 = att(x2)
    changed = (y0 - y1).abs().sum(1)[0] > 0
    expected = torch.zeros(16, 16, dtype=torch.bool)
    expected[4:8, 8:12] = True
    assert torch.equal(changed, expected)


def test_shifted_window_crosses_window_borders():
    att = WindowAttention(8, 4, 2, 2, gen=gen(), dtype=D)
    x = rand(1, 8, 16, 16)
    x2 = x.clone()
    x2[:, :, 4:8, 8:12] = 0
    changed = (att(x) - att(x2)).abs().sum(1)[0] > 0
    outside = changed.clone()
    outside[4:8, 8:12] = False
    assert outside.any()


def test_uniform_attention_averages_window():
    c, w = 4, 4
    att = WindowAttention(c, w, 1, 0, gen=gen(), dtype=D)
    with torch.no_grad():
        att.qkv.weight.zero_()
        att.qkv.bias.zero_()
        att.qkv.weight[2 * c:] = torch.eye(c, dtype=D)
        att.proj.weight.copy_(torch.eye(c, dtype=D))
        att.proj.bias.zero_()
    x = rand(1, c, 8, 8)
    y = att(x)
    means = x.reshape(1, c, 2, w, 2, w).mean(dim=(3, 5))
    expected = means.repeat_interleave(w, 2).repeat_interleave(w, 3)
    assert torch.allclose(y, expected, atol=1e-12)


def test_window_attention_shapes_and_errors():
    att = WindowAttention(16, 8, 2, gen=gen())
    assert att(torch.zeros(1, 16, 32, 32)).shape == (1, 16, 32, 32)
    with pytest.raises(ShapeError):
        att(torch.zeros(1, 16, 12, 16))
    with pytest.raises(ValueError):
        WindowAttention(10, 8, 3, gen=gen())


# ---------------------------------------------------------------- channel attention

def test_channel_attention_gates(rng):
    ca = ChannelAttention(8, 4, gen=gen(), dtype=D)
    x = rand(2, 8, 5, 5)
    y = ca(x)
    assert bool((y.abs() <= x.abs()).all())
    with torch.no_grad():
        ca.fc2.weight.zero_()
        ca.fc2.bias.zero_()
    assert torch.equal(ca(x), x / 2)
    with pytest.raises(ValueError):
        ChannelAttention(4, 8, gen=gen())


def test_channel_attention_permutation_equivariance(rng):
    ca = ChannelAttention(8, 2, gen=gen(3), dtype=D)
    x = rand(1, 8, 6, 6)
    perm = torch.as_tensor(rng.permutation(36))
    xp = x.reshape(1, 8, 36)[:, :, perm].reshape(1, 8, 6, 6)
    assert torch.allclose(ca.gates(xp), ca.gates(x), atol=1e-14)
    assert torch.allclose(ca(xp), ca(x).reshape(1, 8, 36)[:, :, perm].reshape(1, 8, 6, 6), atol=1e-14)


# ---------------------------------------------------------------- HAB / RHAG

def test_hab_zero_projections_leave_residual_plus_half_gated_branch():
    hab = HAB(8, 4, 2, cab_weight=0.25, reduction=2, gen=gen(), dtype=D)
    hab.zero_output_projections()
    with torch.no_grad():
        hab.ca.fc2.weight.zero_()
        hab.ca.fc2.bias.zero_()
    x = rand(1, 8, 8, 8)
    u = hab.norm1(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
    assert torch.allclose(hab(x), x + 0.25 * 0.5 * u, atol=1e-14)


def test_hab_zero_projections_without_ca_is_identity():
    hab = HAB(8, 4, 2, cab_weight=0.0, gen=gen(), reduction=2, dtype=D)
    hab.zero_output_projections()
    x = rand(1, 8, 8, 8)
    assert torch.equal(hab(x), x)


def test_hab_alpha_zero_matches_build_without_ca():
    x = rand(2, 8, 8, 8)
    a = HAB(8, 4, 2, 2, cab_weight=0.0, reduction=2, gen=gen(7), dtype=D)
    b = HAB(8, 4, 2, 2, cab_weight=0.01, reduction=2, channel_attention=False, gen=gen(7), dtype=D)
    assert torch.equal(a(x), b(x))
    assert a(x).shape == x.shape


def test_rhag_identity_blocks_double_input():
    g = RHAG(8, 4, 2, depth=6, reduction=2, cab_weight=0.0, gen=gen(), dtype=D)
    for blk in g.blocks:
        blk.zero_output_projections()
    x = rand(1, 8, 8, 8)
    assert torch.equal(g(x), 2 * x)
    assert [b.attn.shift for b in g.blocks] == [0, 2, 0, 2, 0, 2]
    with pytest.raises(ValueError):
        RHAG(8, 4, 2, depth=0, gen=gen())


# ---------------------------------------------------------------- layer gradients (64-bit)

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_attention_blocks(seed):
    x = rand(1, 8, 8, 8, seed=seed).requires_grad_()
    att = WindowAttention(8, 4, 2, 2, gen=gen(seed), dtype=D)
    with torch.no_grad():
        att.rel_bias.normal_(0, 0.1, generator=gen(seed + 5))
    assert fd_check(lambda: weighted_sum(att(x)), [x, att.qkv.weight, att.rel_bias, att.proj.bias]) < 1e-4
    ca = ChannelAttention(8, 2, gen=gen(seed), dtype=D)
    assert fd_check(lambda: weighted_sum(ca(x)), [x, ca.fc1.weight, ca.fc2.bias]) < 1e-4
    hab = HAB(8, 4, 2, 2, reduction=2, cab_weight=0.3, gen=gen(seed), dtype=D)
    ps = [x, hab.attn.qkv.weight, hab.norm1.gain, hab.mlp.fc1.weight, hab.ca.fc1.weight]
    assert fd_check(lambda: weighted_sum(hab(x)), ps, n_samples=200, seed=seed) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_rhag_and_residual_block(seed):
    x = rand(1, 8, 8, 8, seed=seed).requires_grad_()
    g = RHAG(8, 4, 2, depth=2, reduction=2, gen=gen(seed), dtype=D)
    ps = [x] + [p for p in g.parameters()]
    assert fd_check(lambda: weighted_sum(g(x)), ps, n_samples=200, seed=seed) < 1e-4
    blk = ResidualConvBlock(8, 4, gen=gen(seed), dtype=D)
    assert fd_check(lambda: weighted_sum(blk(x)), [x, blk.conv1.weight, blk.conv2.bias, blk.proj.weight],
                    n_samples=200, seed=seed) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_tiny_network(seed):
    net = HaruNet(tiny_config(), seed=seed, dtype=D)
    with torch.no_grad():
        for blk in net.attention_blocks():
            blk.attn.rel_bias.normal_(0, 0.1, generator=gen(seed))
    x = torch.rand(2, 1, 64, 64, generator=gen(seed + 10), dtype=D)
    target = torch.rand(2, 1, 64, 64, generator=gen(seed + 20), dtype=D)
    params = [p for p in net.parameters()]
    err = fd_check(lambda: ((net(x) - target) ** 2).mean(), params, n_samples=200, seed=seed)
    assert err < 1e-4


# ---------------------------------------------------------------- full network

def test_network_shapes_and_widths():
    net = HaruNet(tiny_config())
    assert net(torch.zeros(2, 1, 64, 64)).shape == (2, 1, 64, 64)
    assert [e.conv1.weight.shape[0] for e in net.encoders] == [8, 16, 32, 64]
    assert net.bottleneck.conv.weight.shape[0] == 128
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 1, 48, 64))
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 2, 64, 64))


@pytest.mark.slow
def test_default_network_shape():
    net = HaruNet(NetworkConfig())
    with torch.no_grad():
        assert net(torch.zeros(1, 1, 256, 256)).shape == (1, 1, 256, 256)
    assert net.bottleneck.proj.weight.shape[:2] == (1024, 512)


def test_construction_is_deterministic():
    a, b = HaruNet(tiny_config(), seed=4), HaruNet(tiny_config(), seed=4)
    for (ka, va), (kb, vb) in zip(a.params.state().items(), b.params.state().items()):
        assert ka == kb and np.array_equal(va, vb)
    c = HaruNet(tiny_config(), seed=5)
    assert not np.array_equal(a.params.state()["head.weight"], c.params.state()["head.weight"])


def test_zeroed_attention_outputs_stay_finite():
    net = HaruNet(tiny_config())
    net.zero_attention_outputs()
    y = net.denoise_array(np.random.default_rng(0).random((64, 64)))
    assert y.shape == (64, 64) and bool(torch.isfinite(y).all())


def test_ablation_has_fewer_params_and_macs():
    full, abl = tiny_config(), tiny_config(ablate_attention=True)
    assert HaruNet(abl).params.count() < HaruNet(full).params.count()
    assert count_macs(abl, (1, 1, 64, 64)).total < count_macs(full, (1, 1, 64, 64)).total
    net = HaruNet(abl)
    assert len(net.skips) == 0 and net.bottleneck.rhag is None
    assert net(torch.zeros(1, 1, 64, 64)).shape == (1, 1, 64, 64)


@pytest.mark.parametrize("cfg,dims", [
    (tiny_config(), (2, 1, 64, 64)),
    (tiny_config(ablate_attention=True), (1, 1, 64, 128)),
    (NetworkConfig(base_channels=16, rhag_depth=2), (1, 1, 128, 128)),
    (NetworkConfig(base_channels=16, window_size=4, se_reduction=4, rhag_depth=2), (1, 1, 128, 128)),
])
def test_graph_macs_equal_analytic_count(cfg, dims):
    net = HaruNet(cfg)
    with MacCounter() as mc, torch.no_grad():
        net(torch.zeros(dims))
    analytic = count_macs(cfg, dims)
    assert dict(mc.per_layer) == dict(analytic.per_layer)
    assert mc.total == analytic.total


def test_global_residual_option():
    net = HaruNet(tiny_config(global_residual=True), dtype=D)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    x = torch.rand(1, 1, 64, 64, dtype=D)
    assert torch.equal(net(x), x)
