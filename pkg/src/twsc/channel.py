"""Physical channel models and the forward-only link.

Signal power is 1 by the transmitter's power normalization, so an SNR of
``s`` dB fixes the complex noise variance at ``10**(-s/10)``, split
evenly between the real and imaginary components. Fading is flat within
a block: one complex coefficient per item, h ~ CN(0, 1), drawn once and
reused for both link directions (reciprocal channel).

``link_transmit`` is the only way payloads cross between nodes. It
severs the autograd graph with a barrier whose backward raises: any
gradient that tries to traverse the physical link is a hard fault, never
a silent detach. Per-direction audit counters record forward payloads
and would record backward traffic; the latter stays zero by
construction.
"""

import math
from dataclasses import dataclass, field

import torch

from .errors import ContractError, LinkFeedbackError
from .transceiver import SymbolBlock


def snr_to_noise_var(snr_db: float) -> float:
    """Complex noise variance for unit signal power; inf dB -> 0."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return 10.0 ** (-snr_db / 10.0)


@dataclass
class ChannelRealization:
    """One block's channel draw. ``h`` is (B, 2) real/imag per item, or
    None for a pure AWGN link (h = 1)."""

    snr_db: float
    batch_size: int
    h: torch.Tensor | None = None

    @property
    def noise_var(self) -> float:
        return snr_to_noise_var(self.snr_db)


def awgn_realization(batch_size: int, snr_db: float) -> ChannelRealization:
    return ChannelRealization(snr_db=snr_db, batch_size=batch_size, h=None)


def sample_reciprocal_rayleigh(gen: torch.Generator, batch_size: int,
                               snr_db: float,
                               dtype: torch.dtype = torch.float32) -> ChannelRealization:
    """Rayleigh block fading, E|h|^2 = 1. The caller passes the same
    realization to both directions; that is what makes it reciprocal."""
    h = torch.randn(batch_size, 2, generator=gen, dtype=dtype) * math.sqrt(0.5)
    return ChannelRealization(snr_db=snr_db, batch_size=batch_size, h=h)


def apply_channel(x: SymbolBlock, realization: ChannelRealization,
                  gen: torch.Generator) -> SymbolBlock:
    """y = h*x + n elementwise over complex symbols. Differentiable in
    x; use :func:`link_transmit` for the physical link instead."""
    data = x.data
    if realization.batch_size != data.shape[0]:
        raise ContractError(
            f"realization batch {realization.batch_size} != payload batch {data.shape[0]}")
    if realization.h is None:
        faded = data
    else:
        h = realization.h.to(data.dtype)
        if h.shape != (data.shape[0], 2):
            raise ContractError(f"fading coefficients must be (B, 2), got {tuple(h.shape)}")
        hr = h[:, 0][:, None]
        hi = h[:, 1][:, None]
        xr = data[..., 0]
        xi = data[..., 1]
        faded = torch.stack((hr * xr - hi * xi, hr * xi + hi * xr), dim=-1)
    var = realization.noise_var
    if var == 0.0:
        return SymbolBlock(faded if realization.h is not None else faded.clone())
    noise = torch.randn(data.shape, generator=gen, dtype=data.dtype) * math.sqrt(var / 2.0)
    return SymbolBlock(faded + noise)


class _LinkBarrier(torch.autograd.Function):
    @staticmethod
    def forward(ctx, payload):
        return payload.view_as(payload)

    @staticmethod
    def backward(ctx, grad_output):
        raise LinkFeedbackError(
            "a gradient attempted to traverse the physical link; "
            "the link carries forward payloads only")


@dataclass
class LinkAudit:
    """Traffic counters for one link direction."""

    src: str
    dst: str
    forward_payload_count: int = 0
    forward_bytes: int = 0
    backward_gradient_count: int = 0

    def as_dict(self) -> dict:
        return {"src": self.src, "dst": self.dst,
                "forward_payload_count": self.forward_payload_count,
                "forward_bytes": self.forward_bytes,
                "backward_gradient_count": self.backward_gradient_count}


def link_transmit(audit: LinkAudit, x: SymbolBlock,
                  realization: ChannelRealization,
                  gen: torch.Generator) -> SymbolBlock:
    """Send a symbol block over the physical channel, one way.

    The payload is counted, the autograd graph is cut by the barrier,
    and the channel is applied on the far side. The result never carries
    a path back to the transmitter's parameters.
    """
    if audit.src == audit.dst:
        raise ContractError(f"link endpoints must differ, got {audit.src!r} twice")
    data = x.data
    if data.requires_grad:
        data = _LinkBarrier.apply(data)
    audit.forward_payload_count += 1
    audit.forward_bytes += data.numel() * data.element_size()
    return apply_channel(SymbolBlock(data), realization, gen)
