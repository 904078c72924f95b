"""Small convolutional classifier that yields class-aware CAM features.

The final fully-connected layer is replaced by a bias-free 1x1 convolution
with one output channel per class, so the last-layer feature tensor doubles
as the per-class localization evidence and global average pooling of it gives
the classification logits.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DRS_BOUND = 0.55       # fraction of the channel max that survives suppression
LOG_EPS = 1e-12        # lower clamp for log arguments in the classification loss
DEFAULT_STAGE_CHANNELS = (16, 32, 64, 64)
STRIDE = 16


def drs_suppress(x: torch.Tensor) -> torch.Tensor:
    """Clip every channel at DRS_BOUND times its spatial maximum.

    Accepts (K, H, W) or (B, K, H, W); parameter-free and differentiable
    (subgradient at ties).
    """
    bound = DRS_BOUND * x.amax(dim=(-2, -1), keepdim=True)
    return torch.minimum(x, bound)


def normalize_cam(channel: torch.Tensor) -> torch.Tensor:
    """ReLU then divide by the spatial max; all-nonpositive input gives the zero map.

    Normalizes over the trailing two dims, so batched (..., h, w) inputs work.
    """
    pos = F.relu(channel)
    peak = pos.amax(dim=(-2, -1), keepdim=True)
    tiny = torch.finfo(pos.dtype).tiny
    return pos / peak.clamp_min(tiny)


def classify(features: torch.Tensor) -> torch.Tensor:
    """Global average pooling of the CAM features: (..., C, h, w) -> (..., C)."""
    return features.mean(dim=(-2, -1))


def classification_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Multi-label soft margin loss, averaged over classes (and batch).

    Log arguments are clamped at LOG_EPS so saturated sigmoids stay finite.
    """
    s = torch.sigmoid(logits)
    pos = torch.log(s.clamp_min(LOG_EPS))
    neg = torch.log((1.0 - s).clamp_min(LOG_EPS))
    return -(targets * pos + (1.0 - targets) * neg).mean()


class CamBackbone(nn.Module):
    """Four conv stages (3x3 conv, GroupNorm, ReLU, 2x max pool) + 1x1 classifier.

    Total stride 16 with the default pooling plan. When suppression is enabled
    it is applied to the outputs of stages 3 and 4, before the classifier
    convolution. `pool_stages` exists for miniature test configurations that
    need a smaller stride; the artifact default keeps all four pools.
    """

    def __init__(
        self,
        n_classes: int,
        stage_channels: tuple[int, ...] = DEFAULT_STAGE_CHANNELS,
        pool_stages: tuple[int, ...] = (0, 1, 2, 3),
    ):
        super().__init__()
        if len(stage_channels) != 4:
            raise ValueError("backbone expects exactly 4 stages")
        self.n_classes = n_classes
        self.stage_channels = tuple(stage_channels)
        self.pool_stages = tuple(pool_stages)
        stages = []
        in_ch = 3
        for i, out_ch in enumerate(stage_channels):
            layers = [
                nn.Conv2d(in_ch, out_ch, 3, padding=1),
                nn.GroupNorm(1, out_ch),
                nn.ReLU(inplace=False),
            ]
            if i in self.pool_stages:
                layers.append(nn.MaxPool2d(2))
            stages.append(nn.Sequential(*layers))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.classifier = nn.Conv2d(in_ch, n_classes, 1, bias=False)
        self.drs_stage_indices = (2, 3)

    @property
    def stride(self) -> int:
        return 2 ** len(self.pool_stages)

    @property
    def stage3_stride(self) -> int:
        """Downsampling factor at the stage-3 output (early-feature tap)."""
        return 2 ** len([i for i in self.pool_stages if i <= 2])

    def forward_features(
        self, x: torch.Tensor, drs_enabled: bool = False, return_stages: bool = False
    ):
        """CAM feature tensor F for a (B, 3, H, W) batch; H and W must divide by 16.

        With `return_stages`, also returns the per-stage outputs (after any
        suppression) for inspection.
        """
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[-2] % self.stride or x.shape[-1] % self.stride:
            raise ValueError(
                f"input dims must be divisible by {self.stride}, got {tuple(x.shape[-2:])}"
            )
        outputs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if drs_enabled and i in self.drs_stage_indices:
                x = drs_suppress(x)
            outputs.append(x)
        features = self.classifier(x)
        if return_stages:
            return features, outputs
        return features

    def forward(self, x: torch.Tensor, drs_enabled: bool = False) -> torch.Tensor:
        return self.forward_features(x, drs_enabled=drs_enabled)

    @property
    def stage3_channels(self) -> int:
        return self.stage_channels[2]


def image_to_tensor(image, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) array in [0, 1] -> (1, 3, H, W) tensor."""
    import numpy as np

    arr = np.ascontiguousarray(image, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1)[None].to(dtype)
