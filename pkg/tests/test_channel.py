import math

import numpy as np
import pytest
import scipy.stats
import torch

from twsc.channel import (ChannelRealization, LinkAudit, apply_channel,
                          awgn_realization, link_transmit,
                          sample_reciprocal_rayleigh, snr_to_noise_var)
from twsc.errors import ContractError, LinkFeedbackError
from twsc.rng import torch_stream
from twsc.transceiver import SymbolBlock


def unit_power_block(batch: int, n: int, seed: int = 0) -> SymbolBlock:
    gen = torch.Generator().manual_seed(seed)
    raw = torch.randn(batch, n, 2, generator=gen)
    power = raw.square().sum(-1).mean(-1, keepdim=True)
    return SymbolBlock(raw / power.sqrt()[..., None])


@pytest.mark.parametrize("snr_db,var", [(0.0, 1.0), (10.0, 0.1), (20.0, 0.01),
                                        (-10.0, 10.0), (float("inf"), 0.0)])
def test_snr_to_noise_variance(snr_db, var):
    assert snr_to_noise_var(snr_db) == pytest.approx(var, rel=1e-12)


@pytest.mark.parametrize("snr_db", [0.0, 5.0, 10.0, 15.0])
def test_awgn_noise_variance_calibration(snr_db):
    # 1e5 complex samples of pure noise (zero signal input).
    block = SymbolBlock(torch.zeros(100, 1000, 2))
    gen = torch_stream(0, "cal", repr(snr_db))
    y = apply_channel(block, awgn_realization(100, snr_db), gen)
    measured = float(y.data.square().sum(-1).mean())
    expected = snr_to_noise_var(snr_db)
    assert abs(measured - expected) / expected < 0.01
    # Both components carry half the variance.
    re_var = float(y.data[..., 0].square().mean())
    im_var = float(y.data[..., 1].square().mean())
    assert re_var == pytest.approx(expected / 2, rel=0.03)
    assert im_var == pytest.approx(expected / 2, rel=0.03)


def test_awgn_infinite_snr_is_exact_passthrough():
    x = unit_power_block(4, 64)
    y = apply_channel(x, awgn_realization(4, float("inf")), torch_stream(0, "x"))
    assert torch.equal(y.data, x.data)


def test_awgn_is_additive():
    x = unit_power_block(4, 64, seed=3)
    y_sig = apply_channel(x, awgn_realization(4, 10.0), torch_stream(7, "n"))
    zero = SymbolBlock(torch.zeros_like(x.data))
    y_noise = apply_channel(zero, awgn_realization(4, 10.0), torch_stream(7, "n"))
    assert torch.allclose(y_sig.data - x.data, y_noise.data, atol=1e-7)


def test_rayleigh_unit_mean_square_and_exponential_gain():
    gen = torch_stream(0, "ray")
    r = sample_reciprocal_rayleigh(gen, 100000, 10.0)
    gains = r.h.square().sum(-1).numpy()
    assert abs(float(gains.mean()) - 1.0) < 0.01
    stat = scipy.stats.kstest(gains, "expon").statistic
    assert stat < 0.01


def test_rayleigh_fading_matches_scalar_complex_multiply():
    x = unit_power_block(5, 16, seed=8)
    gen = torch_stream(1, "h")
    r = sample_reciprocal_rayleigh(gen, 5, float("inf"))
    y = apply_channel(x, r, torch_stream(2, "unused"))
    for b in range(5):
        h = complex(float(r.h[b, 0]), float(r.h[b, 1]))
        for k in range(16):
            s = complex(float(x.data[b, k, 0]), float(x.data[b, k, 1]))
            w = h * s
            assert float(y.data[b, k, 0]) == pytest.approx(w.real, abs=1e-6)
            assert float(y.data[b, k, 1]) == pytest.approx(w.imag, abs=1e-6)


def test_reciprocal_realization_is_shared_not_redrawn():
    gen = torch_stream(3, "h")
    r = sample_reciprocal_rayleigh(gen, 4, 10.0)
    x = unit_power_block(4, 32, seed=5)
    noise_a = torch_stream(4, "n")
    noise_b = torch_stream(4, "n")
    y_ab = apply_channel(x, r, noise_a)
    y_ba = apply_channel(x, r, noise_b)
    assert torch.equal(y_ab.data, y_ba.data)


def test_realization_batch_mismatch_is_contract_error():
    x = unit_power_block(4, 8)
    with pytest.raises(ContractError):
        apply_channel(x, awgn_realization(5, 10.0), torch_stream(0, "n"))
    bad = ChannelRealization(snr_db=10.0, batch_size=4, h=torch.zeros(3, 2))
    with pytest.raises(ContractError):
        apply_channel(x, bad, torch_stream(0, "n"))


def test_link_counts_forward_payloads_and_bytes():
    audit = LinkAudit("A", "B")
    x = unit_power_block(2, 16)
    for _ in range(3):
        link_transmit(audit, x, awgn_realization(2, 10.0), torch_stream(0, "n"))
    assert audit.forward_payload_count == 3
    assert audit.forward_bytes == 3 * 2 * 16 * 2 * 4
    assert audit.backward_gradient_count == 0


def test_link_blocks_gradient_with_hard_fault():
    audit = LinkAudit("A", "B")
    raw = torch.randn(2, 16, 2, requires_grad=True)
    y = link_transmit(audit, SymbolBlock(raw), awgn_realization(2, 10.0),
                      torch_stream(0, "n"))
    loss = y.data.square().sum()
    with pytest.raises(LinkFeedbackError):
        loss.backward()
    assert audit.backward_gradient_count == 0


def test_link_passes_detached_payloads_silently():
    audit = LinkAudit("A", "B")
    raw = torch.randn(2, 16, 2)
    y = link_transmit(audit, SymbolBlock(raw), awgn_realization(2, 10.0),
                      torch_stream(0, "n"))
    assert not y.data.requires_grad


def test_link_rejects_loopback():
    audit = LinkAudit("A", "A")
    with pytest.raises(ContractError):
        link_transmit(audit, unit_power_block(1, 4),
                      awgn_realization(1, 10.0), torch_stream(0, "n"))
