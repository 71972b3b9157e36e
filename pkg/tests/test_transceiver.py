import numpy as np
import pytest
import torch

from twsc.errors import (CheckpointError, ContractError, DegenerateInputError,
                         NumericFaultError)
from twsc.transceiver import (NetArch, Node, build_channel_decoder,
                              build_channel_encoder, build_semantic_decoder,
                              build_semantic_encoder, load_node_checkpoint,
                              normalize_power, pack_complex,
                              save_node_checkpoint, unpack_complex)

TINY = NetArch(image_side=8, semantic_filters=(2, 2), semantic_strides=(1, 2),
               channel_filters=(2, 2), channel_strides=(1, 2))


def conv2d_oracle(x, weight, bias, stride):
    """Loop conv with same padding 1. x: (Cin,H,W), weight: (Cout,Cin,k,k)."""
    cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    pad = 1
    out_h = (h - 1) // stride + 1
    out_w = (w - 1) // stride + 1
    out = np.zeros((cout, out_h, out_w))
    for o in range(cout):
        for i in range(out_h):
            for j in range(out_w):
                acc = bias[o]
                for c in range(cin):
                    for a in range(k):
                        for b in range(k):
                            ii = i * stride + a - pad
                            jj = j * stride + b - pad
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += x[c, ii, jj] * weight[o, c, a, b]
                out[o, i, j] = acc
    return out


def convtranspose2d_oracle(x, weight, bias, stride, out_pad):
    """Loop transposed conv with padding 1. weight: (Cin,Cout,k,k)."""
    cin, h, w = x.shape
    _, cout, k, _ = weight.shape
    pad = 1
    out_h = (h - 1) * stride - 2 * pad + k + out_pad
    out_w = (w - 1) * stride - 2 * pad + k + out_pad
    out = np.zeros((cout, out_h, out_w))
    for o in range(cout):
        out[o, :, :] = bias[o]
    for c in range(cin):
        for i in range(h):
            for j in range(w):
                for a in range(k):
                    for b in range(k):
                        ii = i * stride + a - pad
                        jj = j * stride + b - pad
                        if 0 <= ii < out_h and 0 <= jj < out_w:
                            for o in range(cout):
                                out[o, ii, jj] += x[c, i, j] * weight[c, o, a, b]
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_layer_matches_loop_oracle(stride):
    rng = np.random.Generator(np.random.PCG64(1))
    conv = torch.nn.Conv2d(2, 3, 3, stride=stride, padding=1).double()
    x = rng.standard_normal((2, 5, 5))
    with torch.no_grad():
        got = conv(torch.from_numpy(x)[None]).numpy()[0]
    want = conv2d_oracle(x, conv.weight.detach().numpy(),
                         conv.bias.detach().numpy(), stride)
    assert np.allclose(got, want, atol=1e-10)


@pytest.mark.parametrize("stride,out_pad", [(1, 0), (2, 0), (2, 1)])
def test_transposed_conv_matches_loop_oracle(stride, out_pad):
    rng = np.random.Generator(np.random.PCG64(2))
    conv = torch.nn.ConvTranspose2d(2, 3, 3, stride=stride, padding=1,
                                    output_padding=out_pad).double()
    x = rng.standard_normal((2, 4, 4))
    with torch.no_grad():
        got = conv(torch.from_numpy(x)[None]).numpy()[0]
    want = convtranspose2d_oracle(x, conv.weight.detach().numpy(),
                                  conv.bias.detach().numpy(), stride, out_pad)
    assert np.allclose(got, want, atol=1e-10)


def test_default_architecture_shape_chain():
    arch = NetArch()
    assert arch.semantic_size_chain() == [28, 28, 14, 14, 7, 7]
    assert arch.channel_size_chain() == [7, 7, 7, 4, 4]
    assert arch.symbol_count == 256
    x = torch.zeros(2, 1, 28, 28)
    feats = build_semantic_encoder(arch)(x)
    assert feats.shape == (2, 16, 7, 7)
    raw = build_channel_encoder(arch)(feats)
    assert raw.shape == (2, 32, 4, 4)
    back = build_channel_decoder(arch)(raw)
    assert back.shape == (2, 16, 7, 7)
    out = build_semantic_decoder(arch)(back)
    assert out.shape == (2, 1, 28, 28)


def test_tiny_architecture_mirrors_exactly():
    assert TINY.semantic_size_chain() == [8, 8, 4]
    assert TINY.channel_size_chain() == [4, 4, 2]
    assert TINY.symbol_count == 4
    node = Node(TINY, "A", seed=0)
    images = torch.rand(3, 1, 8, 8)
    block = node.encode(images)
    assert block.data.shape == (3, 4, 2)
    recon = node.decode(block)
    assert recon.shape == (3, 1, 8, 8)


def test_node_end_to_end_shapes_and_pixel_range():
    node = Node(NetArch(), "A", seed=1)
    images = torch.rand(2, 1, 28, 28)
    with torch.no_grad():
        block = node.encode(images)
        assert block.data.shape == (2, 256, 2)
        recon = node.decode(block)
    assert recon.shape == (2, 1, 28, 28)
    assert float(recon.min()) >= 0.0
    assert float(recon.max()) <= 1.0


def test_pack_pairs_consecutive_channels():
    b, c, h, w = 1, 4, 3, 3
    feats = torch.zeros(b, c, h, w)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                feats[0, ch, i, j] = ch * 10000 + i * 100 + j
    symbols = pack_complex(feats)
    assert symbols.shape == (1, (c // 2) * h * w, 2)
    for pair in range(c // 2):
        for i in range(h):
            for j in range(w):
                k = pair * h * w + i * w + j
                assert symbols[0, k, 0] == 2 * pair * 10000 + i * 100 + j
                assert symbols[0, k, 1] == (2 * pair + 1) * 10000 + i * 100 + j


def test_pack_unpack_round_trip_is_exact():
    feats = torch.randn(3, 32, 4, 4)
    back = unpack_complex(pack_complex(feats), 32, 4)
    assert torch.equal(back, feats)


def test_pack_rejects_odd_channels():
    with pytest.raises(ContractError):
        pack_complex(torch.zeros(1, 3, 4, 4))


def test_power_normalization_per_item():
    rng = torch.Generator().manual_seed(5)
    raw = torch.randn(6, 256, 2, generator=rng) * torch.linspace(0.1, 4.0, 6)[:, None, None]
    block = normalize_power(raw)
    per_item = block.per_item_power()
    assert torch.all((per_item - 1.0).abs() < 1e-6)
    assert abs(block.mean_power() - 1.0) < 1e-6
    assert block.norm_scale is not None
    # Any sub-batch of a normalized block is itself normalized.
    sub = block.data[2:5]
    assert torch.all((sub.square().sum(-1).mean(-1) - 1.0).abs() < 1e-6)


def test_power_normalization_differentiable():
    raw = torch.randn(2, 8, 2, requires_grad=True)
    block = normalize_power(raw)
    block.data.square().sum().backward()
    assert raw.grad is not None
    assert torch.isfinite(raw.grad).all()


def test_zero_power_input_is_degenerate():
    with pytest.raises(DegenerateInputError):
        normalize_power(torch.zeros(2, 8, 2))


def test_numeric_fault_names_net_and_layer():
    node = Node(TINY, "A", seed=0)
    with torch.no_grad():
        node.semantic_encoder.layers[1].weight[0, 0, 0, 0] = float("inf")
    with pytest.raises(NumericFaultError) as err:
        node.encode(torch.rand(1, 1, 8, 8))
    assert "semantic_encoder layer 1" in str(err.value)


def test_nodes_share_seeded_initialization():
    a = Node(NetArch(), "A", seed=3)
    b = Node(NetArch(), "B", seed=3)
    for pa, pb in zip(a.tx_parameters() + a.rx_parameters(),
                      b.tx_parameters() + b.rx_parameters()):
        assert torch.equal(pa, pb)
    c = Node(NetArch(), "A", seed=4)
    diffs = [not torch.equal(pa, pc) for pa, pc in
             zip(a.tx_parameters(), c.tx_parameters())]
    assert any(diffs)


def _train_one_step(node: Node):
    images = torch.rand(2, 1, 8, 8, generator=torch.Generator().manual_seed(9))
    recon = node.decode(node.encode(images))
    loss = torch.nn.functional.mse_loss(recon, images)
    node.opt_tx.zero_grad()
    node.opt_rx.zero_grad()
    loss.backward()
    node.opt_tx.step()
    node.opt_rx.step()


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    node = Node(TINY, "A", seed=6)
    _train_one_step(node)
    first = save_node_checkpoint(tmp_path / "1.ckpt", node, epoch=1, config_hash="h")
    fresh = Node(TINY, "A", seed=99)
    epoch = load_node_checkpoint(first, fresh, expect_config_hash="h")
    assert epoch == 1
    second = save_node_checkpoint(tmp_path / "2.ckpt", fresh, epoch=1, config_hash="h")
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_restores_behaviour(tmp_path):
    node = Node(TINY, "A", seed=6)
    _train_one_step(node)
    images = torch.rand(2, 1, 8, 8, generator=torch.Generator().manual_seed(10))
    with torch.no_grad():
        want = node.decode(node.encode(images))
    path = save_node_checkpoint(tmp_path / "n.ckpt", node, epoch=3, config_hash="x")
    other = Node(TINY, "A", seed=1234)
    load_node_checkpoint(path, other)
    with torch.no_grad():
        got = other.decode(other.encode(images))
    assert torch.equal(want, got)


def test_checkpoint_rejects_config_hash_mismatch(tmp_path):
    node = Node(TINY, "A", seed=6)
    path = save_node_checkpoint(tmp_path / "n.ckpt", node, epoch=1, config_hash="aaa")
    with pytest.raises(CheckpointError) as err:
        load_node_checkpoint(path, Node(TINY, "A", seed=6), expect_config_hash="bbb")
    assert "hash" in str(err.value)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_node_checkpoint(path, Node(TINY, "A", seed=0))


def test_arch_rejects_odd_complex_packing():
    with pytest.raises(ContractError):
        NetArch(channel_filters=(16, 16, 32, 31))
