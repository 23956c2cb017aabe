"""2D U-Net style encoder, projection head and skip-connected decoder."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


class SpatialSizeError(ValueError):
    pass


class SkipMismatchError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    stage_widths: tuple[int, ...] = (16, 32, 64, 128)
    downsamples: int = 3
    backbone: str = "unet"
    negative_slope: float = 0.2
    norm: str = "instance"

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if len(self.stage_widths) != self.downsamples + 1:
            raise ValueError(
                f"need downsamples + 1 = {self.downsamples + 1} stage widths, got {len(self.stage_widths)}"
            )
        if self.backbone not in ("unet", "resunet"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def bottleneck_channels(self) -> int:
        return self.stage_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by instance norm and leaky ReLU."""

    def __init__(self, cin: int, cout: int, cfg: EncoderConfig):
        super().__init__()
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(((cin, cout), (cout, cout))):
            layers.append(nn.Conv2d(a, b, 3, padding=1))
            if cfg.norm == "instance":
                layers.append(nn.InstanceNorm2d(b, affine=True))
            layers.append(nn.LeakyReLU(cfg.negative_slope))
        self.body = nn.Sequential(*layers)
        self.skip = None
        if cfg.backbone == "resunet":
            self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.body(x)
        if self.skip is not None:
            y = y + self.skip(x)
        return y


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths
        chans = (cfg.in_channels, *widths)
        self.stages = nn.ModuleList(ConvBlock(chans[i], chans[i + 1], cfg) for i in range(len(widths)))

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Return the skip feature map of every resolution stage and the bottleneck."""
        factor = 2 ** self.cfg.downsamples
        h, w = x.shape[-2:]
        if h % factor or w % factor:
            raise SpatialSizeError(f"input {h}x{w} not divisible by 2^{self.cfg.downsamples}")
        skips = []
        for stage in self.stages[:-1]:
            x = stage(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return skips, self.stages[-1](x)


class ProjectionHead(nn.Module):
    """Global average pool followed by one linear layer, no output nonlinearity."""

    def __init__(self, in_channels: int, dim: int = 256):
        super().__init__()
        self.fc = nn.Linear(in_channels, dim)

    def forward(self, bottleneck: torch.Tensor) -> torch.Tensor:
        return self.fc(bottleneck.mean(dim=(-2, -1)))


class Decoder(nn.Module):
    """Transposed-conv upsampling with skip concatenation, ending in a 1x1 conv.

    The output bias starts at ``logit(foreground_prior)`` so that initial
    predictions match the rarity of organ pixels; with soft Dice and a zero
    bias every pixel starts at 0.5 and training stalls for many steps.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), out_channels: int = 1, foreground_prior: float = 0.05):
        super().__init__()
        if not 0.0 < foreground_prior < 1.0:
            raise ValueError(f"foreground_prior must lie in (0, 1), got {foreground_prior}")
        self.cfg = cfg
        widths = cfg.stage_widths
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(cfg.downsamples, 0, -1):
            self.ups.append(nn.ConvTranspose2d(widths[i], widths[i - 1], 2, stride=2))
            self.blocks.append(ConvBlock(2 * widths[i - 1], widths[i - 1], cfg))
        self.out = nn.Conv2d(widths[0], out_channels, 1)
        nn.init.constant_(self.out.bias, math.log(foreground_prior / (1.0 - foreground_prior)))

    def forward(self, skips: list[torch.Tensor], bottleneck: torch.Tensor) -> torch.Tensor:
        if len(skips) != self.cfg.downsamples:
            raise SkipMismatchError(f"decoder expects {self.cfg.downsamples} skips, got {len(skips)}")
        x = bottleneck
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = up(x)
            if x.shape[1:] != skip.shape[1:]:
                raise SkipMismatchError(f"skip shape {tuple(skip.shape)} vs upsampled {tuple(x.shape)}")
            x = block(torch.cat([x, skip], dim=1))
        return self.out(x)


class ContrastiveNet(nn.Module):
    """Encoder plus projection head, used during pre-training."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), proj_dim: int = 256):
        super().__init__()
        self.encoder = Encoder(cfg)
        self.head = ProjectionHead(cfg.bottleneck_channels, proj_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, bottleneck = self.encoder(x)
        return self.head(bottleneck)


class SegmentationNet(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips, bottleneck = self.encoder(x)
        return self.decoder(skips, bottleneck)


def logits_to_mask(logits: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    return torch.sigmoid(logits) > threshold


@dataclass
class Checkpoint:
    state_dict: dict
    encoder_config: EncoderConfig
    stage: str
    config_hash: str = ""
    metadata: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "state_dict": self.state_dict,
                "encoder_config": self.encoder_config.to_dict(),
                "stage": self.stage,
                "config_hash": self.config_hash,
                "metadata": self.metadata,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
        return cls(
            state_dict=blob["state_dict"],
            encoder_config=EncoderConfig(**blob["encoder_config"]),
            stage=blob["stage"],
            config_hash=blob.get("config_hash", ""),
            metadata=blob.get("metadata", {}),
        )

    def encoder_state(self) -> dict:
        return {
            k[len("encoder."):]: v for k, v in self.state_dict.items() if k.startswith("encoder.")
        }
