"""Latent perturbation generator, attribute discriminator and the adversarial losses.

The generator learns a residual ``f_p = f_o + G(f_o)`` on the bottleneck
embedding of a frozen segmentor. The discriminator tries to recover the
sensitive attribute from ``f_p``; the generator is rewarded for keeping the
segmentation intact while making the discriminator uncertain.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .segmentors import LatentEmbedding

DICE_SMOOTH = 1e-5


@dataclass
class AppleHyperparams:
    alpha: float = 0.1
    beta: float = 1.0

    def __post_init__(self) -> None:
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class PerturbationGenerator(nn.Module):
    """Encoder (32, 64, 128) -> 4 bottleneck blocks -> decoder (64, 32, C).

    Downsampling uses stride-2 convolutions and upsampling is nearest
    neighbour followed by a convolution. When the embedding is smaller than
    8x8 (or not divisible by 8) every stage keeps the resolution. The last
    convolution is linear and zero-initialized, so a fresh generator
    outputs exactly zero.
    """

    def __init__(self, embedding_channels: int, embedding_spatial: tuple[int, int],
                 widths: Sequence[int] = (32, 64, 128), bottleneck_blocks: int = 4):
        super().__init__()
        self.embedding_channels = embedding_channels
        self.embedding_spatial = tuple(embedding_spatial)
        h, w = self.embedding_spatial
        scale = 2 ** len(widths)
        self.resample = min(h, w) >= scale and h % scale == 0 and w % scale == 0
        stride = 2 if self.resample else 1

        down = []
        prev = embedding_channels
        for c in widths:
            down.append(_block(prev, c, stride))
            prev = c
        self.down = nn.Sequential(*down)
        self.bottleneck = nn.Sequential(*[_block(prev, prev) for _ in range(bottleneck_blocks)])

        up_widths = list(widths[::-1][1:])  # (64, 32)
        self.up = nn.ModuleList()
        for c in up_widths:
            self.up.append(_block(prev, c))
            prev = c
        self.out = nn.Conv2d(prev, embedding_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def _upsample(self, x: torch.Tensor) -> torch.Tensor:
        return F.interpolate(x, scale_factor=2, mode="nearest") if self.resample else x

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if tuple(f.shape[1:]) != (self.embedding_channels, *self.embedding_spatial):
            raise ValueError(
                f"embedding shape {tuple(f.shape[1:])} does not match generator "
                f"{(self.embedding_channels, *self.embedding_spatial)}"
            )
        x = self.bottleneck(self.down(f))
        for block in self.up:
            x = block(self._upsample(x))
        return self.out(self._upsample(x))


class AttributeDiscriminator(nn.Module):
    """Global average pooling followed by three Linear-BatchNorm blocks."""

    def __init__(self, embedding_channels: int, num_groups: int, hidden: int = 128):
        super().__init__()
        self.num_groups = num_groups
        self.net = nn.Sequential(
            nn.Linear(embedding_channels, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, num_groups), nn.BatchNorm1d(num_groups),
        )

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.net(f.mean(dim=(2, 3)))


class PerturberBundle(nn.Module):
    def __init__(self, embedding_channels: int, embedding_spatial: tuple[int, int],
                 num_groups: int, hparams: Optional[AppleHyperparams] = None):
        super().__init__()
        self.generator = PerturbationGenerator(embedding_channels, embedding_spatial)
        self.discriminator = AttributeDiscriminator(embedding_channels, num_groups)
        self.hparams = hparams or AppleHyperparams()
        self.config = {"embedding_channels": embedding_channels,
                       "embedding_spatial": list(embedding_spatial), "num_groups": num_groups}

    def perturb(self, f_o: LatentEmbedding) -> LatentEmbedding:
        return perturb(self.generator, f_o)

    def save(self, directory: str | Path, extra: Optional[dict] = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.generator.state_dict(), directory / "generator.pt")
        torch.save(self.discriminator.state_dict(), directory / "discriminator.pt")
        manifest = {**self.config, **asdict(self.hparams), **(extra or {})}
        (directory / "apple_manifest.json").write_text(json.dumps(manifest, indent=2))
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "PerturberBundle":
        directory = Path(directory)
        m = json.loads((directory / "apple_manifest.json").read_text())
        bundle = cls(m["embedding_channels"], tuple(m["embedding_spatial"]), m["num_groups"],
                     AppleHyperparams(m["alpha"], m["beta"]))
        bundle.generator.load_state_dict(torch.load(directory / "generator.pt", weights_only=True))
        bundle.discriminator.load_state_dict(torch.load(directory / "discriminator.pt", weights_only=True))
        return bundle


def perturb(generator: PerturbationGenerator, f_o: LatentEmbedding) -> LatentEmbedding:
    """``f_p = f_o + G(f_o)``; skip tensors pass through untouched."""
    return f_o.replace(f_o.tensor + generator(f_o.tensor))


def entropy(logits: torch.Tensor) -> torch.Tensor:
    """Batch mean of the Shannon entropy (nats) of ``softmax(logits)``."""
    logp = F.log_softmax(logits, dim=1)
    return -(logp.exp() * logp).sum(dim=1).mean()


def loss_discriminator(logits: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, a)


def soft_dice_loss(logits: torch.Tensor, y: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """``1 - mean_c dice_c`` with dice computed over the whole batch per class."""
    probs = F.softmax(logits, dim=1)
    onehot = F.one_hot(y, logits.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    total = probs.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2.0 * inter + smooth) / (total + smooth)).mean()


def loss_seg(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Dice-CE: half the sum of pixel cross-entropy and soft Dice loss."""
    return 0.5 * (F.cross_entropy(logits, y) + soft_dice_loss(logits, y))


def loss_fair(logits: torch.Tensor, a: torch.Tensor, alpha: float) -> torch.Tensor:
    return -F.cross_entropy(logits, a) - alpha * entropy(logits)


def loss_generator(seg_loss, fair_loss, beta: float):
    return seg_loss + beta * fair_loss
