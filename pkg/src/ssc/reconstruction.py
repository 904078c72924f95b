"""Image reconstruction from CAM features and the multi-stage perceptual loss.

The decoder recovers the input image from the class-channel feature tensor
(head conv block, one residual block, a chain of 2x up-sample blocks, tanh
tail). Reconstruction quality is scored by mean absolute differences between
the feature maps of a frozen convolutional loss network, taken before each of
its pooling layers and combined with resolution-matched weights.
"""
from __future__ import annotations

import contextlib

import torch
import torch.nn as nn

DEFAULT_DECODER_WIDTH = 32
DEFAULT_LOSSNET_CHANNELS = (8, 16, 32, 32, 32)
DEFAULT_LOSSNET_SEED = 1311


@contextlib.contextmanager
def _seeded(seed: int | None):
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def to_signed(image01: torch.Tensor) -> torch.Tensor:
    """Map [0, 1] pixels to the [-1, 1] range the decoder tail and loss network use."""
    return image01 * 2.0 - 1.0


def to_unit(signed: torch.Tensor) -> torch.Tensor:
    return (signed + 1.0) * 0.5


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GroupNorm(1, channels),
            nn.ReLU(inplace=False),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GroupNorm(1, channels),
        )

    def forward(self, x):
        return x + self.body(x)


class _UpBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=False),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GroupNorm(1, channels),
            nn.ReLU(inplace=False),
        )

    def forward(self, x):
        return self.body(x)


class Decoder(nn.Module):
    """Feature-to-image decoder; `n_up` 2x blocks recover the feature stride."""

    def __init__(
        self,
        in_channels: int,
        width: int = DEFAULT_DECODER_WIDTH,
        n_up: int = 4,
        seed: int | None = None,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.n_up = n_up
        with _seeded(seed):
            self.head = nn.Sequential(
                nn.Conv2d(in_channels, width, 3, padding=1),
                nn.GroupNorm(1, width),
                nn.ReLU(inplace=False),
            )
            self.res = _ResBlock(width)
            self.ups = nn.Sequential(*[_UpBlock(width) for _ in range(n_up)])
            self.tail = nn.Sequential(nn.Conv2d(width, 3, 3, padding=1), nn.Tanh())

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, in_channels, h, w) -> (B, 3, h * 2**n_up, w * 2**n_up) in (-1, 1)."""
        if features.shape[1] != self.in_channels:
            raise ValueError(
                f"decoder head expects {self.in_channels} channels, got {features.shape[1]}"
            )
        x = self.head(features)
        x = self.res(x)
        x = self.ups(x)
        return self.tail(x)


def reconstruct(features: torch.Tensor, decoder: Decoder) -> torch.Tensor:
    return decoder(features)


class LossNetwork(nn.Module):
    """Frozen stack of (3x3 conv, ReLU, 2x average pool) stages.

    Stage features are tapped right before each pool. Weights are drawn once
    from a seeded initialization and never trained; gradients flow through the
    network but not into it. `load_weights` can substitute pretrained stages.
    """

    def __init__(
        self,
        stage_channels: tuple[int, ...] = DEFAULT_LOSSNET_CHANNELS,
        seed: int = DEFAULT_LOSSNET_SEED,
    ):
        super().__init__()
        self.stage_channels = tuple(stage_channels)
        with _seeded(seed):
            convs = []
            in_ch = 3
            for out_ch in stage_channels:
                convs.append(nn.Conv2d(in_ch, out_ch, 3, padding=1))
                in_ch = out_ch
            self.convs = nn.ModuleList(convs)
        self.act = nn.ReLU(inplace=False)
        self.pool = nn.AvgPool2d(2)
        self.requires_grad_(False)

    @property
    def n_stages(self) -> int:
        return len(self.convs)

    def features(self, signed_image: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage feature maps for a (B, 3, H, W) image in [-1, 1]."""
        feats = []
        x = signed_image
        for conv in self.convs:
            x = self.act(conv(x))
            feats.append(x)
            x = self.pool(x)
        return feats

    def forward(self, signed_image: torch.Tensor) -> list[torch.Tensor]:
        return self.features(signed_image)

    def load_weights(self, path) -> None:
        from . import checkpoint

        checkpoint.load_module(path, self)
        self.requires_grad_(False)

    def save_weights(self, path) -> None:
        from . import checkpoint

        checkpoint.save_module(path, self)


def perceptual_weights(n_stages: int) -> list[float]:
    """Stage weights 1 / 2**((J+1)-j) for j = 1..J; later stages weigh more."""
    return [0.5 ** ((n_stages + 1) - j) for j in range(1, n_stages + 1)]


def stage_loss(
    loss_net: LossNetwork, recon_signed: torch.Tensor, image_signed: torch.Tensor, stage: int
) -> torch.Tensor:
    """Mean absolute difference of the `stage`-th (1-based) feature maps."""
    fa = loss_net.features(recon_signed)[stage - 1]
    fb = loss_net.features(image_signed)[stage - 1]
    return (fa - fb).abs().mean()


def perceptual_loss(
    loss_net: LossNetwork, recon_signed: torch.Tensor, image_signed: torch.Tensor
) -> torch.Tensor:
    """Weighted sum of per-stage mean absolute feature differences."""
    feats_a = loss_net.features(recon_signed)
    feats_b = loss_net.features(image_signed)
    weights = perceptual_weights(loss_net.n_stages)
    total = recon_signed.new_zeros(())
    for w, fa, fb in zip(weights, feats_a, feats_b):
        total = total + w * (fa - fb).abs().mean()
    return total


def pixel_loss(recon: torch.Tensor, image: torch.Tensor, kind: str) -> torch.Tensor:
    """Plain per-pixel loss for the reconstruction ablation: 'L1' or 'L2'."""
    if recon.shape != image.shape:
        raise ValueError(f"shape mismatch: {tuple(recon.shape)} vs {tuple(image.shape)}")
    diff = recon - image
    if kind == "L1":
        return diff.abs().mean()
    if kind == "L2":
        return diff.square().mean()
    raise ValueError(f"unknown pixel loss kind {kind!r} (expected 'L1' or 'L2')")
