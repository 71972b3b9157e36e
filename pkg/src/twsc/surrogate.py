"""Learned channel surrogate: a conditional GAN over symbol blocks.

The generator consumes, per symbol position, the locally re-encoded
pilot (the node's own transmit symbols for the shared batch), fresh
Gaussian noise, and a constant conditioning channel carrying the linear
noise standard deviation ``10**(-snr_db/20)``. It emits a fake received
block. The discriminator scores (pilot, candidate, snr) triples. Both
are 1-D conv stacks over the symbol axis with ReLU activations; the
generator's output layer is linear so residuals can take either sign,
and the discriminator ends in a small dense head.

Losses are hinge-style. The generator always minimizes
``mean(max(1 - s_fake, 0))``. The discriminator has two modes:
``standard_hinge`` is ``mean(max(1 - s_real, 0)) + mean(max(1 + s_fake, 0))``
and ``paper_literal`` is ``mean(-s_real - max(1 - s_fake, 0))``, which is
unbounded below in the real scores and kept only for comparison runs.

A training step updates the generator first, then the discriminator,
with fresh noise for each phase. The noise draw order per step is
exactly: one (B, noise_dim, N) tensor for the generator phase, then one
for the discriminator phase.

``forbid_generation`` guards evaluation: while active, any call to the
generator raises, so surrogate samples can never leak into
real-channel metrics.
"""

import contextlib
import math
from dataclasses import dataclass

import torch
from torch import nn

from .channel import snr_to_noise_var
from .errors import ContractError, NumericFaultError
from .rng import torch_stream
from .transceiver import SymbolBlock, _tree_to_numpy, _tree_to_torch, init_parameters


@dataclass(frozen=True)
class SurrogateArch:
    symbol_count: int
    noise_dim: int = 2
    conditioned_on_pilot: bool = True
    generator_filters: tuple[int, ...] = (256, 128, 64, 2)
    generator_kernels: tuple[int, ...] = (5, 3, 3, 3)
    disc_filters: tuple[int, ...] = (256, 128, 64, 16)
    disc_kernels: tuple[int, ...] = (5, 3, 3, 3)
    disc_hidden: int = 100

    def __post_init__(self):
        if self.generator_filters[-1] != 2:
            raise ContractError("generator must emit 2 channels (real, imag)")
        if len(self.generator_filters) != len(self.generator_kernels):
            raise ContractError("generator filters and kernels differ in length")
        if len(self.disc_filters) != len(self.disc_kernels):
            raise ContractError("discriminator filters and kernels differ in length")

    @property
    def pilot_channels(self) -> int:
        return 2 if self.conditioned_on_pilot else 0


class Conv1dStack(nn.Module):
    """Same-padding 1-D conv stack, ReLU between layers; the final
    activation is optional. Checks layer outputs are finite."""

    def __init__(self, name: str, in_channels: int, filters, kernels,
                 final_relu: bool):
        super().__init__()
        self.name = name
        self.final_relu = final_relu
        layers = []
        for out_ch, k in zip(filters, kernels):
            layers.append(nn.Conv1d(in_channels, out_ch, k, padding=k // 2))
            in_channels = out_ch
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_relu:
                x = torch.relu(x)
            if not torch.isfinite(x).all():
                raise NumericFaultError(f"{self.name} layer {i} produced non-finite values")
        return x


class ScoreHead(nn.Module):
    def __init__(self, in_features: int, hidden: int):
        super().__init__()
        self.dense = nn.Linear(in_features, hidden)
        self.out = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.dense(x))).squeeze(-1)


@dataclass
class ConditionInput:
    """What one surrogate call is conditioned on. The noise itself is
    drawn inside the call from ``rng``, never stored, so it cannot be
    reused across calls."""

    pilot: SymbolBlock
    snr_db: float
    rng: torch.Generator


def generator_hinge_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return torch.relu(1.0 - fake_scores).mean()


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor,
                       mode: str) -> torch.Tensor:
    if mode == "standard_hinge":
        return torch.relu(1.0 - real_scores).mean() + torch.relu(1.0 + fake_scores).mean()
    if mode == "paper_literal":
        return (-real_scores - torch.relu(1.0 - fake_scores)).mean()
    raise ContractError(f"unknown loss mode {mode!r}")


@dataclass
class GanStepRecord:
    generator_loss: float
    discriminator_loss: float
    real_score_mean: float
    fake_score_mean: float


_forbid_depth = 0


@contextlib.contextmanager
def forbid_generation():
    """While active, surrogate sampling raises. Wrap every real-channel
    evaluation in this."""
    global _forbid_depth
    _forbid_depth += 1
    try:
        yield
    finally:
        _forbid_depth -= 1


class ChannelSurrogate:
    """Generator/discriminator pair plus their optimizers."""

    def __init__(self, arch: SurrogateArch, seed: int, lr: float = 1e-3,
                 dtype: torch.dtype = torch.float32, loss_mode: str = "standard_hinge"):
        if loss_mode not in ("standard_hinge", "paper_literal"):
            raise ContractError(f"unknown loss mode {loss_mode!r}")
        self.arch = arch
        self.loss_mode = loss_mode
        self.dtype = dtype
        gen_in = arch.pilot_channels + arch.noise_dim + 1
        disc_in = arch.pilot_channels + 2 + 1
        self.generator = Conv1dStack("surrogate_generator", gen_in,
                                     arch.generator_filters, arch.generator_kernels,
                                     final_relu=False).to(dtype)
        self.disc_convs = Conv1dStack("surrogate_discriminator", disc_in,
                                      arch.disc_filters, arch.disc_kernels,
                                      final_relu=True).to(dtype)
        self.disc_head = ScoreHead(arch.disc_filters[-1] * arch.symbol_count,
                                   arch.disc_hidden).to(dtype)
        init_parameters(self.generator, torch_stream(seed, "init", "surrogate_generator"))
        init_parameters(self.disc_convs, torch_stream(seed, "init", "surrogate_disc_convs"))
        init_parameters(self.disc_head, torch_stream(seed, "init", "surrogate_disc_head"))
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=lr)
        self.opt_d = torch.optim.Adam(self.disc_parameters(), lr=lr)

    def disc_parameters(self):
        return list(self.disc_convs.parameters()) + list(self.disc_head.parameters())

    def all_parameters(self):
        return list(self.generator.parameters()) + self.disc_parameters()

    def _snr_channel(self, batch: int, n: int, snr_db: float) -> torch.Tensor:
        sigma = math.sqrt(snr_to_noise_var(snr_db))
        return torch.full((batch, 1, n), sigma, dtype=self.dtype)

    def generate(self, cond: ConditionInput) -> SymbolBlock:
        """Sample one fake received block; differentiable in the pilot
        and the generator parameters."""
        if _forbid_depth > 0:
            raise ContractError(
                "surrogate generation is forbidden here (real-channel evaluation)")
        pilot = cond.pilot.data.to(self.dtype)
        b, n = pilot.shape[0], pilot.shape[1]
        if n != self.arch.symbol_count:
            raise ContractError(
                f"pilot has {n} symbols, surrogate expects {self.arch.symbol_count}")
        z = torch.randn(b, self.arch.noise_dim, n, generator=cond.rng, dtype=self.dtype)
        parts = []
        if self.arch.conditioned_on_pilot:
            parts.append(pilot.permute(0, 2, 1))
        parts.append(z)
        parts.append(self._snr_channel(b, n, cond.snr_db))
        out = self.generator(torch.cat(parts, dim=1))
        return SymbolBlock(out.permute(0, 2, 1))

    def discriminate(self, cond: ConditionInput, candidate: SymbolBlock) -> torch.Tensor:
        pilot = cond.pilot.data.to(self.dtype)
        sample = candidate.data.to(self.dtype)
        if sample.shape != pilot.shape:
            raise ContractError(
                f"candidate shape {tuple(sample.shape)} != pilot shape {tuple(pilot.shape)}")
        b, n = sample.shape[0], sample.shape[1]
        parts = []
        if self.arch.conditioned_on_pilot:
            parts.append(pilot.permute(0, 2, 1))
        parts.append(sample.permute(0, 2, 1))
        parts.append(self._snr_channel(b, n, cond.snr_db))
        feats = self.disc_convs(torch.cat(parts, dim=1))
        return self.disc_head(feats.flatten(1))

    def train_step(self, pilot: SymbolBlock, received: SymbolBlock,
                   snr_db: float, rng: torch.Generator,
                   step_label: str = "") -> GanStepRecord:
        """One generator update followed by one discriminator update."""
        pilot = pilot.detached()
        real = received.detached()

        self.opt_g.zero_grad(set_to_none=True)
        self.opt_d.zero_grad(set_to_none=True)
        cond = ConditionInput(pilot, snr_db, rng)
        fake = self.generate(cond)
        g_loss = generator_hinge_loss(self.discriminate(cond, fake))
        if not torch.isfinite(g_loss):
            raise NumericFaultError(f"surrogate generator loss non-finite {step_label}")
        g_loss.backward()
        self.opt_g.step()

        self.opt_d.zero_grad(set_to_none=True)
        with torch.no_grad():
            fake_d = self.generate(cond)
        s_real = self.discriminate(cond, real)
        s_fake = self.discriminate(cond, fake_d)
        d_loss = discriminator_loss(s_real, s_fake, self.loss_mode)
        if not torch.isfinite(d_loss):
            raise NumericFaultError(f"surrogate discriminator loss non-finite {step_label}")
        d_loss.backward()
        self.opt_d.step()

        return GanStepRecord(generator_loss=g_loss.item(),
                             discriminator_loss=d_loss.item(),
                             real_score_mean=s_real.mean().item(),
                             fake_score_mean=s_fake.mean().item())

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def payload(self) -> dict:
        return {
            "generator": _tree_to_numpy(self.generator.state_dict()),
            "disc_convs": _tree_to_numpy(self.disc_convs.state_dict()),
            "disc_head": _tree_to_numpy(self.disc_head.state_dict()),
            "opt_g": _tree_to_numpy(self.opt_g.state_dict()),
            "opt_d": _tree_to_numpy(self.opt_d.state_dict()),
        }

    def load_payload(self, payload: dict) -> None:
        self.generator.load_state_dict(_tree_to_torch(payload["generator"]))
        self.disc_convs.load_state_dict(_tree_to_torch(payload["disc_convs"]))
        self.disc_head.load_state_dict(_tree_to_torch(payload["disc_head"]))
        self.opt_g.load_state_dict(_tree_to_torch(payload["opt_g"]))
        self.opt_d.load_state_dict(_tree_to_torch(payload["opt_d"]))


@dataclass
class ResidualStats:
    """Noise statistics of generated minus pilot over a probe batch.

    For a surrogate imitating an additive channel the residual is its
    implied noise model: ``bias_magnitude`` should approach zero and
    ``complex_variance`` the channel's true noise variance.
    """

    bias_magnitude: float
    complex_variance: float
    sample_count: int


def residual_stats(surr: ChannelSurrogate, pilot: SymbolBlock,
                   snr_db: float, rng: torch.Generator,
                   draws: int = 1) -> ResidualStats:
    with torch.no_grad():
        residuals = []
        for _ in range(draws):
            fake = surr.generate(ConditionInput(pilot, snr_db, rng))
            residuals.append(fake.data - pilot.data)
        flat = torch.cat(residuals).reshape(-1, 2)
        mean = flat.mean(dim=0)
        var = flat.var(dim=0, unbiased=False).sum()
        return ResidualStats(bias_magnitude=float(mean.norm()),
                             complex_variance=float(var),
                             sample_count=flat.shape[0])


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Temporarily stop gradient accumulation into these modules'
    parameters; gradients still flow through to their inputs."""
    params = [p for m in modules for p in m.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad_(s)
