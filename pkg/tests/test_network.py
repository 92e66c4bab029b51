import numpy as np
import pytest

from ddcmnet import tensorio
from ddcmnet.config import default_config
from ddcmnet.ddcm import Ddcm, DdcmSpec, fused_receptive_fields
from ddcmnet.network import (BackboneSpec, CheckpointError, NetworkSpec, StructuralBackboneError,
                             build_network, load_checkpoint, save_checkpoint)
from ddcmnet.config import render_config
from oracles import close, fd_grad, probe_coords


def small_spec(**kw):
    base = dict(backbone=BackboneSpec("toy", (4, 6)),
                low_level=DdcmSpec((1, 2), 3),
                high_level=(DdcmSpec((1, 2), 5), DdcmSpec((1,), 4)),
                num_classes=3, head_channels=6)
    base.update(kw)
    return NetworkSpec(**base)


def unit_params(cin, cout, k, groups=1):
    # conv weight + bias, PReLU slope, BN gamma + beta
    return cin // groups * cout * k * k + cout + cout + 2 * cout


def test_fused_receptive_fields_small_cases():
    assert fused_receptive_fields(3, [1]) == ([[3]], [3, 1])
    per, merged = fused_receptive_fields(3, [1, 2, 4])
    assert per == [[3], [7, 5], [15, 11, 9]]
    assert merged == [15, 11, 9, 7, 5, 3, 1]
    assert fused_receptive_fields(3, [1, 1])[1] == [5, 3, 1]
    with pytest.raises(ValueError):
        fused_receptive_fields(3, [])


def test_ddcm_spec_blocks_and_counts():
    spec = DdcmSpec((1, 2, 3), 4, in_channels=5)
    blocks = spec.blocks()
    assert [b.in_channels for b in blocks] == [5, 9, 13]
    assert spec.stack_channels == 17
    m = Ddcm(spec, np.random.default_rng(0))
    expected = sum(unit_params(b.in_channels, 4, 3) for b in blocks) + unit_params(17, 4, 1)
    assert sum(p.data.size for _, p in m.named_parameters()) == expected
    out = m.forward(np.zeros((1, 5, 6, 6), np.float32))
    assert out.shape == (1, 4, 6, 6)


def test_ddcm_dynamic_stride_and_grouping():
    spec = DdcmSpec((1, 2), 4, groups=2, stride="dynamic", in_channels=4)
    assert [b.stride for b in spec.blocks()] == [2, 3]
    m = Ddcm(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((1, 4, 9, 9)).astype(np.float32)
    assert m.forward(x, train=True).shape == (1, 4, 9, 9)
    with pytest.raises(ValueError):
        DdcmSpec((1,), 3, groups=2, in_channels=4).blocks()
    with pytest.raises(ValueError):
        DdcmSpec((), 3)
    with pytest.raises(ValueError):
        DdcmSpec((0,), 3)


def test_network_forward_shapes_and_call_counts():
    net = build_network(small_spec(), seed=0)
    x = np.random.default_rng(0).random((2, 3, 16, 12), dtype=np.float32)
    out = net.forward(x, train=True)
    assert out.shape == (2, 3, 16, 12) and out.dtype == np.float32
    assert net.calls["encoder"] == 1
    g = net.backward(np.ones_like(out))
    assert g.shape == x.shape
    with pytest.raises(Exception):
        net.forward(np.zeros((1, 3, 10, 16), np.float32))
    with pytest.raises(Exception):
        net.forward(np.zeros((1, 1, 16, 16), np.float32))


def test_network_gradients_match_finite_differences():
    # Average fusion pooling: max-pool near-ties make this small net non-smooth at FD scale.
    net = build_network(small_spec(decoder_upsample=2, pool="avg"), seed=4)
    rng = np.random.default_rng(4)
    x = rng.random((2, 3, 8, 8))
    out = net.forward(x, train=True)
    R = rng.standard_normal(out.shape)
    net.zero_grad()
    net.backward(R)
    f = lambda: float(np.sum(net.forward(x, train=True) * R))
    for name, p in net.named_parameters():
        if not name.endswith("weight"):
            continue
        coords = probe_coords(p.data.shape, rng, 4)
        got = [float(p.grad[c]) for c in coords]
        ok, err = close(got, fd_grad(f, p.data, coords, 1e-6), rtol=1e-3, atol=1e-6)
        assert ok, (name, err)


def test_ablation_flags():
    spec = small_spec(no_ll_encoder=True)
    eff = spec.effective()
    assert eff.low_level is None
    assert eff.high_level[-1].out_channels == 4 + 3
    nd = small_spec(no_dilation=True).effective()
    assert all(r == 1 for d in nd.high_level for r in d.rates)
    a = build_network(small_spec()).parameter_count()
    assert build_network(small_spec(no_dilation=True)).parameter_count() == a
    with pytest.raises(ValueError):
        small_spec(fusion="sum").effective()
    assert build_network(small_spec(fusion="sum", low_level=DdcmSpec((1,), 4))).forward(
        np.zeros((1, 3, 8, 8), np.float32)).shape == (1, 3, 8, 8)


def test_block_order_variant_runs():
    net = build_network(small_spec(block_order="conv-bn-prelu", pool="avg"))
    assert net.forward(np.zeros((1, 3, 8, 8), np.float32), train=True).shape == (1, 3, 8, 8)


def test_structural_backbone_refuses_to_run():
    net = build_network(default_config("isprs").network)
    with pytest.raises(StructuralBackboneError):
        net.forward(np.zeros((1, 3, 32, 32), np.float32))


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(high_level=())
    with pytest.raises(ValueError):
        small_spec(num_classes=1)
    with pytest.raises(ValueError):
        small_spec(decoder_upsample=3)
    with pytest.raises(ValueError):
        BackboneSpec("vgg")


def test_checkpoint_round_trip(tmp_path):
    config = default_config("toy").replace(network__classes=6)
    net = build_network(config.network, seed=2)
    x = np.random.default_rng(0).random((1, 3, 16, 16), dtype=np.float32)
    net.forward(x, train=True)
    path = tmp_path / "c.ddcm"
    save_checkpoint(path, net, render_config(config), {"__extra__": np.arange(3, dtype=np.float32)}, "epoch=1")
    net2, cfg2, extra, state = load_checkpoint(path)
    assert cfg2 == config and state == "epoch=1"
    np.testing.assert_array_equal(extra["__extra__"], [0, 1, 2])
    np.testing.assert_array_equal(net2.forward(x), net.forward(x))
    entries = tensorio.load(path)
    entries.pop(next(k for k in entries if k.endswith("running_var")))
    tensorio.save(path, entries)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_dc_block_concat_and_strided_contract():
    from ddcmnet.ddcm import DcBlock, DcBlockSpec
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    out = DcBlock(DcBlockSpec(3, 1), rng).forward(x)
    assert out.shape == (1, 4, 8, 8)
    np.testing.assert_array_equal(out[:, 1:], x)
    block = DcBlock(DcBlockSpec(3, 2, stride=2), rng)
    x = rng.standard_normal((1, 3, 64, 64)).astype(np.float32)
    out = block.forward(x, train=True)
    assert block._inner_hw == (32, 32) and out.shape == (1, 5, 64, 64)
    with pytest.raises(ValueError):
        DcBlockSpec(3, 0)


def test_low_level_encoder_shape():
    m = Ddcm(DdcmSpec((1, 2, 3, 5, 7, 9), 3, in_channels=3), np.random.default_rng(0))
    x = np.random.default_rng(1).random((1, 3, 64, 64), dtype=np.float32)
    assert m.forward(x).shape == (1, 3, 64, 64)


def test_ddcm_identity_configuration():
    spec = DdcmSpec((1, 2), 2, in_channels=2)
    m = Ddcm(spec, np.random.default_rng(0))
    for name, p in m.named_parameters():
        if name.endswith("slope") or name.endswith("gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
    w = m.merge.conv.weight.data
    # stack is [block1 out, block0 out, input]; the input sits in the last channels
    w[0, spec.stack_channels - 2] = 1.0
    w[1, spec.stack_channels - 1] = 1.0
    x = np.random.default_rng(2).standard_normal((1, 2, 6, 6)).astype(np.float32)
    out = m.forward(x, train=False)
    np.testing.assert_allclose(out, x, rtol=1e-5, atol=1e-5)


def test_params_closed_form_in_block_count():
    m, k, cin, out = 3, 3, 4, 5
    for n in range(1, 9):
        spec = DdcmSpec((1,) * n, out, width=m, in_channels=cin)
        counted = sum(p.data.size for _, p in Ddcm(spec, np.random.default_rng(0)).named_parameters())
        # block i: conv cin+i*m -> m, plus bias/slope/gamma/beta; merge: 1x1 over cin+n*m
        blocks = sum((cin + i * m) * m * k * k + 4 * m for i in range(n))
        merge = (cin + n * m) * out + 4 * out
        assert counted == blocks + merge


def test_toy_network_contract():
    config = default_config("toy")
    net = build_network(config.network, seed=0)
    x = np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)
    a, b = net.forward(x), net.forward(x)
    assert a.shape == (1, 6, 64, 64)
    np.testing.assert_array_equal(a, b)


def test_toy_probe_weight_gradient_32px():
    config = default_config("toy")
    net = build_network(config.network, seed=1)
    x = np.random.default_rng(3).random((2, 3, 32, 32))
    net.zero_grad()
    out = net.forward(x, train=True)
    net.backward(np.ones_like(out))
    f = lambda: float(net.forward(x, train=True).sum())
    p = dict(net.named_parameters())["head.conv.weight"]
    coords = probe_coords(p.data.shape, np.random.default_rng(0), 6)
    ok, err = close([float(p.grad[c]) for c in coords], fd_grad(f, p.data, coords, 1e-4), atol=1e-4)
    assert ok, err


def test_toy_checkpoint_size_bound():
    from ddcmnet.network import checkpoint_size_bytes
    config = default_config("toy")
    net = build_network(config.network)
    n_values = sum(a.size for a in net.state_dict().values())
    size = checkpoint_size_bytes(net, render_config(config))
    assert 4 * n_values < size < 4 * n_values + 200_000
    assert size < 4_000_000
