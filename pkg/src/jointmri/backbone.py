"""U-Net style encoder-decoder shared by the reconstruction and segmentation networks.

Tensors use the PyTorch ``(batch, channels, H, W)`` layout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from jointmri.errors import ConfigError, DataError, DimensionError


@dataclass(frozen=True)
class EncoderDecoderConfig:
    in_channels: int
    out_channels: int
    base_channels: int = 32
    depth: int = 4
    param_seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if min(self.in_channels, self.out_channels, self.base_channels) < 1:
            raise ConfigError("channel counts must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class EncoderDecoder(nn.Module):
    """Plain U-Net: max-pool down, nearest-neighbour upsample + 3x3 conv up.

    No activation on the output; segmentation logits get their softmax in the loss.
    """

    def __init__(self, config: EncoderDecoderConfig):
        super().__init__()
        self.config = config
        c = config.channels
        d = config.depth
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for k in range(d):
            self.encoders.append(_double_conv(cin, c(k)))
            cin = c(k)
        self.bottleneck = _double_conv(c(d - 1), c(d))
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for k in reversed(range(d)):
            self.upconvs.append(nn.Conv2d(c(k + 1), c(k), 3, padding=1))
            self.decoders.append(_double_conv(2 * c(k), c(k)))
        self.head = nn.Conv2d(c(0), config.out_channels, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.config.param_seed)
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.xavier_uniform_(module.weight, generator=gen)
                nn.init.zeros_(module.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(
                f"expected input (B, {cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        factor = 2**cfg.depth
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise DimensionError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by 2**depth = {factor}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec in zip(self.upconvs, self.decoders):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = dec(torch.cat([skips.pop(), x], dim=1))
        return self.head(x)


def build(config: EncoderDecoderConfig) -> EncoderDecoder:
    return EncoderDecoder(config)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def save_checkpoint(net: EncoderDecoder, path) -> None:
    """Config echo plus named tensors in a ``torch.save`` container."""
    torch.save({"format": "jointmri.backbone/1", "config": asdict(net.config),
                "state_dict": net.state_dict()}, Path(path))


def load_checkpoint(path) -> EncoderDecoder:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format") != "jointmri.backbone/1":
        raise DataError(f"{path}: not a backbone checkpoint")
    net = EncoderDecoder(EncoderDecoderConfig(**blob["config"]))
    net.load_state_dict(blob["state_dict"])
    return net
