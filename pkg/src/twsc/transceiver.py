"""Transceiver networks and node state.

Each node owns four convolutional nets. The downlink side maps images to
channel symbols (semantic encoder then channel encoder), the uplink side
maps received symbols back to images (channel decoder then semantic
decoder). Decoders are strict mirrors of the encoders: reversed stride
chains with output padding chosen per layer so every spatial size on
the way down is reproduced exactly on the way up.

Channel-encoder feature maps are packed into complex symbols by pairing
consecutive channels (2k, 2k+1) -> (real, imag) and flattening spatial
positions. Packed blocks are normalized to unit average power per item:
for every image in the batch, mean(|s|^2) over its symbols equals 1, so
any sub-batch of a normalized block is itself normalized. The scale is
part of the autograd graph; transmitter training differentiates through
it.

All activations are ELU except the final semantic-decoder layer, which
is a sigmoid onto the pixel range. Every layer output is checked for
non-finite values and failures name the net and layer.
"""

import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import (CheckpointError, ContractError, DegenerateInputError,
                     NumericFaultError)
from .rng import torch_stream

CHECKPOINT_FORMAT_VERSION = 1
_MIN_ITEM_POWER = 1e-20


@dataclass(frozen=True)
class NetArch:
    """Static architecture plan; all derived shapes live here."""

    image_side: int = 28
    image_channels: int = 1
    semantic_filters: tuple[int, ...] = (4, 8, 8, 16, 16)
    semantic_strides: tuple[int, ...] = (1, 2, 1, 2, 1)
    channel_filters: tuple[int, ...] = (16, 16, 32, 32)
    channel_strides: tuple[int, ...] = (1, 1, 2, 1)
    kernel_size: int = 3

    def __post_init__(self):
        if len(self.semantic_filters) != len(self.semantic_strides):
            raise ContractError("semantic filters and strides differ in length")
        if len(self.channel_filters) != len(self.channel_strides):
            raise ContractError("channel filters and strides differ in length")
        if self.channel_filters[-1] % 2 != 0:
            raise ContractError("last channel-encoder filter count must be even "
                                "to pack complex symbols")
        if self.semantic_filters[-1] != self.channel_filters[0]:
            raise ContractError("channel encoder must accept the semantic encoder output")

    def _chain(self, start: int, strides: tuple[int, ...]) -> list[int]:
        sizes = [start]
        for s in strides:
            prev = sizes[-1]
            sizes.append((prev - 1) // s + 1)
        return sizes

    def semantic_size_chain(self) -> list[int]:
        return self._chain(self.image_side, self.semantic_strides)

    def channel_size_chain(self) -> list[int]:
        return self._chain(self.semantic_size_chain()[-1], self.channel_strides)

    @property
    def feature_side(self) -> int:
        return self.channel_size_chain()[-1]

    @property
    def symbol_count(self) -> int:
        return self.feature_side ** 2 * (self.channel_filters[-1] // 2)


def _mirror_plan(sizes: list[int], strides: tuple[int, ...]) -> list[tuple[int, int]]:
    """Per transposed layer: (stride, output_padding) recovering the
    encoder size chain in reverse."""
    plan = []
    for layer in range(len(strides) - 1, -1, -1):
        cur, target, stride = sizes[layer + 1], sizes[layer], strides[layer]
        out_pad = target - ((cur - 1) * stride + 1)
        if not 0 <= out_pad < max(stride, 2):
            raise ContractError(
                f"cannot mirror stride {stride} from size {cur} to {target}")
        plan.append((stride, out_pad))
    return plan


class ConvStack(nn.Module):
    """A named stack of conv layers with ELU between them and a
    configurable final activation. Checks each layer output is finite."""

    def __init__(self, name: str, layers: list[nn.Module], final: str = "elu"):
        super().__init__()
        self.name = name
        self.layers = nn.ModuleList(layers)
        self.final = final

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final == "elu":
                x = torch.nn.functional.elu(x)
            elif self.final == "sigmoid":
                x = torch.sigmoid(x)
            if not torch.isfinite(x).all():
                raise NumericFaultError(
                    f"{self.name} layer {i} produced non-finite values")
        return x


def build_semantic_encoder(arch: NetArch) -> ConvStack:
    layers = []
    in_ch = arch.image_channels
    for out_ch, stride in zip(arch.semantic_filters, arch.semantic_strides):
        layers.append(nn.Conv2d(in_ch, out_ch, arch.kernel_size, stride=stride, padding=1))
        in_ch = out_ch
    return ConvStack("semantic_encoder", layers)


def build_channel_encoder(arch: NetArch) -> ConvStack:
    layers = []
    in_ch = arch.semantic_filters[-1]
    for out_ch, stride in zip(arch.channel_filters, arch.channel_strides):
        layers.append(nn.Conv2d(in_ch, out_ch, arch.kernel_size, stride=stride, padding=1))
        in_ch = out_ch
    return ConvStack("channel_encoder", layers)


def build_channel_decoder(arch: NetArch) -> ConvStack:
    sizes = arch.channel_size_chain()
    plan = _mirror_plan(sizes, arch.channel_strides)
    out_channels = (arch.channel_filters[-2::-1]) + (arch.semantic_filters[-1],)
    layers = []
    in_ch = arch.channel_filters[-1]
    for (stride, out_pad), out_ch in zip(plan, out_channels):
        layers.append(nn.ConvTranspose2d(in_ch, out_ch, arch.kernel_size,
                                         stride=stride, padding=1, output_padding=out_pad))
        in_ch = out_ch
    return ConvStack("channel_decoder", layers)


def build_semantic_decoder(arch: NetArch) -> ConvStack:
    sizes = arch.semantic_size_chain()
    plan = _mirror_plan(sizes, arch.semantic_strides)
    out_channels = (arch.semantic_filters[-2::-1]) + (arch.image_channels,)
    layers = []
    in_ch = arch.semantic_filters[-1]
    for (stride, out_pad), out_ch in zip(plan, out_channels):
        layers.append(nn.ConvTranspose2d(in_ch, out_ch, arch.kernel_size,
                                         stride=stride, padding=1, output_padding=out_pad))
        in_ch = out_ch
    return ConvStack("semantic_decoder", layers, final="sigmoid")


def init_parameters(module: nn.Module, gen: torch.Generator) -> None:
    """Seeded re-init. Matches the usual fan-in uniform bound but draws
    from an explicit generator so both nodes can start identical."""
    for sub in module.modules():
        if isinstance(sub, (nn.Conv1d, nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = sub.weight.shape[1] * int(np.prod(sub.weight.shape[2:]))
            bound = 1.0 / float(np.sqrt(fan_in))
            with torch.no_grad():
                sub.weight.uniform_(-bound, bound, generator=gen)
                if sub.bias is not None:
                    sub.bias.uniform_(-bound, bound, generator=gen)


@dataclass
class SymbolBlock:
    """A batch of complex symbol vectors, stored as (B, N, 2) real
    tensors with [..., 0] the real part. ``norm_scale`` records the
    per-item factor applied by power normalization, when any."""

    data: torch.Tensor
    norm_scale: torch.Tensor | None = None

    def __post_init__(self):
        if self.data.dim() != 3 or self.data.shape[-1] != 2:
            raise ContractError(f"symbol block must be (B, N, 2), got {tuple(self.data.shape)}")

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def symbol_count(self) -> int:
        return self.data.shape[1]

    def per_item_power(self) -> torch.Tensor:
        return self.data.square().sum(-1).mean(-1)

    def mean_power(self) -> float:
        return float(self.per_item_power().mean())

    def detached(self) -> "SymbolBlock":
        return SymbolBlock(self.data.detach(), None if self.norm_scale is None
                           else self.norm_scale.detach())


def pack_complex(features: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, C/2*H*W, 2); channels (2k, 2k+1) pair into
    one complex symbol per spatial position."""
    b, c, h, w = features.shape
    if c % 2 != 0:
        raise ContractError(f"cannot pack odd channel count {c} into complex symbols")
    paired = features.reshape(b, c // 2, 2, h, w)
    return paired.permute(0, 1, 3, 4, 2).reshape(b, (c // 2) * h * w, 2)


def unpack_complex(symbols: torch.Tensor, channels: int, side: int) -> torch.Tensor:
    """Inverse of :func:`pack_complex` for square feature maps."""
    b, n, two = symbols.shape
    if two != 2 or n != (channels // 2) * side * side:
        raise ContractError(
            f"cannot unpack {tuple(symbols.shape)} into ({channels}, {side}, {side})")
    paired = symbols.reshape(b, channels // 2, side, side, 2)
    return paired.permute(0, 1, 4, 2, 3).reshape(b, channels, side, side)


def normalize_power(symbols: torch.Tensor) -> SymbolBlock:
    """Scale each item so its average power per complex symbol is 1."""
    power = symbols.square().sum(-1).mean(-1)
    if bool((power < _MIN_ITEM_POWER).any()):
        raise DegenerateInputError(
            "symbol vector has (near-)zero power and cannot be normalized")
    scale = power.rsqrt()
    return SymbolBlock(symbols * scale[:, None, None], norm_scale=scale)


class Node:
    """One endpoint: four nets plus transmitter/receiver optimizers.

    Both nodes of a run are initialized from the same seed-derived
    streams, deliberately excluding the node id, so they start with
    identical weights.
    """

    NET_NAMES = ("semantic_encoder", "channel_encoder", "channel_decoder",
                 "semantic_decoder")

    def __init__(self, arch: NetArch, node_id: str, seed: int,
                 lr: float = 1e-3, dtype: torch.dtype = torch.float32):
        if node_id not in ("A", "B"):
            raise ContractError(f"node_id must be 'A' or 'B', got {node_id!r}")
        self.arch = arch
        self.node_id = node_id
        self.dtype = dtype
        self.semantic_encoder = build_semantic_encoder(arch)
        self.channel_encoder = build_channel_encoder(arch)
        self.channel_decoder = build_channel_decoder(arch)
        self.semantic_decoder = build_semantic_decoder(arch)
        for name in self.NET_NAMES:
            net = getattr(self, name).to(dtype)
            init_parameters(net, torch_stream(seed, "init", name))
        self.opt_tx = torch.optim.Adam(self.tx_parameters(), lr=lr)
        self.opt_rx = torch.optim.Adam(self.rx_parameters(), lr=lr)

    def nets(self) -> dict[str, ConvStack]:
        return {name: getattr(self, name) for name in self.NET_NAMES}

    def tx_parameters(self):
        return list(self.semantic_encoder.parameters()) + \
            list(self.channel_encoder.parameters())

    def rx_parameters(self):
        return list(self.channel_decoder.parameters()) + \
            list(self.semantic_decoder.parameters())

    def encode(self, images: torch.Tensor) -> SymbolBlock:
        """Images (B, 1, H, W) -> unit-power symbol block."""
        if images.dim() != 4:
            raise ContractError(f"expected NCHW images, got shape {tuple(images.shape)}")
        features = self.semantic_encoder(images.to(self.dtype))
        raw = self.channel_encoder(features)
        return normalize_power(pack_complex(raw))

    def decode(self, received: SymbolBlock) -> torch.Tensor:
        """Received symbol block -> reconstructed images (B, 1, H, W)."""
        feats = unpack_complex(received.data.to(self.dtype),
                               self.arch.channel_filters[-1], self.arch.feature_side)
        return self.semantic_decoder(self.channel_decoder(feats))

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_tx, self.opt_rx):
            for group in opt.param_groups:
                group["lr"] = lr


def _tree_to_numpy(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().numpy().copy()
    if isinstance(obj, dict):
        return {k: _tree_to_numpy(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_tree_to_numpy(v) for v in obj)
    return obj


def _tree_to_torch(obj):
    if isinstance(obj, np.ndarray):
        return torch.from_numpy(obj.copy())
    if isinstance(obj, dict):
        return {k: _tree_to_torch(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_tree_to_torch(v) for v in obj)
    return obj


def node_payload(node: Node, epoch: int, config_hash: str,
                 surrogate=None) -> dict:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "node_id": node.node_id,
        "epoch": epoch,
        "config_hash": config_hash,
        "nets": {name: _tree_to_numpy(net.state_dict())
                 for name, net in node.nets().items()},
        "optimizers": {"tx": _tree_to_numpy(node.opt_tx.state_dict()),
                       "rx": _tree_to_numpy(node.opt_rx.state_dict())},
    }
    if surrogate is not None:
        payload["surrogate"] = surrogate.payload()
    return payload


def save_node_checkpoint(path, node: Node, epoch: int, config_hash: str,
                         surrogate=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = pickle.dumps(node_payload(node, epoch, config_hash, surrogate), protocol=4)
    path.write_bytes(blob)
    return path


def load_node_checkpoint(path, node: Node, surrogate=None,
                         expect_config_hash: str | None = None) -> int:
    """Restore nets and optimizer state in place; returns the epoch."""
    path = Path(path)
    try:
        payload = pickle.loads(path.read_bytes())
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format {payload.get('format_version')}")
    if expect_config_hash is not None and payload["config_hash"] != expect_config_hash:
        raise CheckpointError(
            f"{path}: config hash {payload['config_hash']} does not match "
            f"expected {expect_config_hash}")
    for name, net in node.nets().items():
        net.load_state_dict(_tree_to_torch(payload["nets"][name]))
    node.opt_tx.load_state_dict(_tree_to_torch(payload["optimizers"]["tx"]))
    node.opt_rx.load_state_dict(_tree_to_torch(payload["optimizers"]["rx"]))
    if surrogate is not None:
        if "surrogate" not in payload:
            raise CheckpointError(f"{path}: checkpoint has no surrogate section")
        surrogate.load_payload(payload["surrogate"])
    return int(payload["epoch"])
