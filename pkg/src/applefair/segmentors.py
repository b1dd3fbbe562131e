"""Split segmentors: an encoder producing a latent embedding and a decoder consuming it."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

PROFILES = {
    "desk": (8, 16, 32, 64, 128),
    "small": (16, 32, 64, 128, 256),
    "full": (64, 128, 256, 512, 1024),
}


class FrozenParameterError(RuntimeError):
    pass


@dataclass
class LatentEmbedding:
    tensor: torch.Tensor
    skips: list[torch.Tensor] = field(default_factory=list)

    def replace(self, tensor: torch.Tensor) -> "LatentEmbedding":
        return LatentEmbedding(tensor, self.skips)

    def detach(self) -> "LatentEmbedding":
        return LatentEmbedding(self.tensor.detach(), [s.detach() for s in self.skips])

    def __getitem__(self, idx) -> "LatentEmbedding":
        return LatentEmbedding(self.tensor[idx], [s[idx] for s in self.skips])


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNetEncoder(nn.Module):
    def __init__(self, in_channels: int, channels: Sequence[int]):
        super().__init__()
        self.stages = nn.ModuleList()
        prev = in_channels
        for c in channels:
            self.stages.append(conv_block(prev, c))
            prev = c

    def forward(self, x: torch.Tensor) -> LatentEmbedding:
        skips = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            if i < len(self.stages) - 1:
                skips.append(x)
        return LatentEmbedding(x, skips)


class UNetDecoder(nn.Module):
    def __init__(self, channels: Sequence[int], num_classes: int):
        super().__init__()
        rev = list(channels)[::-1]
        self.ups = nn.ModuleList()
        self.stages = nn.ModuleList()
        for cin, cout in zip(rev, rev[1:]):
            self.ups.append(nn.ConvTranspose2d(cin, cout, 2, stride=2))
            self.stages.append(conv_block(2 * cout, cout))
        self.head = nn.Conv2d(rev[-1], num_classes, 1)
        # uniform prediction at initialization
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z: LatentEmbedding) -> torch.Tensor:
        x = z.tensor
        for up, stage, skip in zip(self.ups, self.stages, reversed(z.skips)):
            x = stage(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class SplitSegmentor(nn.Module):
    """A segmentation network ``phi(x) = decoder(encoder(x))``.

    Any pair of modules works as long as the encoder returns a
    ``LatentEmbedding`` and the decoder maps it to ``B x L x H x W`` logits.
    """

    def __init__(self, encoder: nn.Module, decoder: nn.Module, embedding_channels: int,
                 num_classes: int, arch: Optional[dict] = None):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.embedding_channels = embedding_channels
        self.num_classes = num_classes
        self.arch = dict(arch or {})
        self.frozen = False
        self.frozen_hash: Optional[str] = None

    def encode(self, x: torch.Tensor) -> LatentEmbedding:
        return self.encoder(x)

    def decode(self, z: LatentEmbedding) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def embedding_spatial(self, input_hw: tuple[int, int]) -> tuple[int, int]:
        depth = len(self.arch.get("channels", ())) - 1
        return input_hw[0] >> depth, input_hw[1] >> depth

    def train(self, mode: bool = True):
        # a frozen segmentor always runs with fixed normalization statistics
        return super().train(mode and not self.frozen)


def build_reference_segmentor(
    channels: Sequence[int] | str = "desk",
    num_classes: int = 2,
    input_shape: tuple[int, int, int] = (1, 64, 64),
) -> SplitSegmentor:
    """4-down/4-up U-Net split at the bottleneck (skips travel with the embedding)."""
    if isinstance(channels, str):
        profile = channels
        channels = PROFILES[channels]
    else:
        profile = "custom"
    channels = tuple(int(c) for c in channels)
    depth = len(channels) - 1
    c_in, h, w = input_shape
    if h % (2 ** depth) or w % (2 ** depth):
        raise ValueError(f"input {h}x{w} is not divisible by 2**{depth}")
    arch = {"type": "unet", "profile": profile, "channels": list(channels),
            "num_classes": num_classes, "input_shape": [c_in, h, w]}
    return SplitSegmentor(UNetEncoder(c_in, channels), UNetDecoder(channels, num_classes),
                          embedding_channels=channels[-1], num_classes=num_classes, arch=arch)


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state_dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(segmentor: SplitSegmentor) -> SplitSegmentor:
    for p in segmentor.parameters():
        p.requires_grad_(False)
        p._applefair_frozen = True  # type: ignore[attr-defined]
    segmentor.frozen = True
    segmentor.eval()
    segmentor.frozen_hash = parameter_hash(segmentor)
    return segmentor


def check_trainable(params) -> list[nn.Parameter]:
    params = list(params)
    if any(getattr(p, "_applefair_frozen", False) for p in params):
        raise FrozenParameterError("refusing to optimize parameters of a frozen segmentor")
    return params


def save_segmentor(segmentor: SplitSegmentor, directory: str | Path, seed: Optional[int] = None,
                   extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(segmentor.state_dict(), directory / "segmentor.pt")
    manifest = {"arch": segmentor.arch, "seed": seed, "sha256": parameter_hash(segmentor)}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_segmentor(directory: str | Path, frozen: bool = True) -> SplitSegmentor:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no segmentor checkpoint at {directory}")
    manifest = json.loads(manifest_path.read_text())
    arch = manifest["arch"]
    if arch.get("type") != "unet":
        raise ValueError(f"unsupported architecture {arch.get('type')!r}")
    seg = build_reference_segmentor(arch["channels"], arch["num_classes"], tuple(arch["input_shape"]))
    seg.arch = arch
    seg.load_state_dict(torch.load(directory / "segmentor.pt", weights_only=True))
    if parameter_hash(seg) != manifest["sha256"]:
        raise ValueError(f"checkpoint hash mismatch in {directory}")
    return freeze(seg) if frozen else seg
