"""Activation self-modulation: superpixel-consistent CAM targets.

The live CAM features are upsampled to half the image resolution, averaged
within each superpixel, and renormalized into a regionally consistent CAM.
Reliable activation selection keeps the original high activations: a
threshold-plus-erosion mask gates the live CAM and the gated map is fused by
an elementwise max. The alignment loss pulls live CAMs toward these targets,
which are always treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import normalize_cam


@dataclass(frozen=True)
class ModulationConfig:
    t_obj: float = 0.3       # threshold selecting high-attention area
    r: int = 8               # square erosion window, in pixels
    upsample_factor: int = 8  # CAM grid -> half image resolution at stride 16

    def __post_init__(self):
        if not (0.0 < self.t_obj < 1.0):
            raise ValueError(f"t_obj must be in (0, 1), got {self.t_obj}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")


def regional_average(values: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Replace each value by the mean over its region; differentiable.

    `values` is (..., h, w), `labels` an (h, w) integer raster. The gradient
    distributes 1/|S_k| to every member of region k.
    """
    if values.shape[-2:] != labels.shape:
        raise ValueError(f"shape mismatch: values {tuple(values.shape)} vs labels {tuple(labels.shape)}")
    flat_labels = labels.reshape(-1).long()
    n_regions = int(flat_labels.max().item()) + 1
    lead = values.shape[:-2]
    flat = values.reshape(*lead, -1)
    counts = torch.bincount(flat_labels, minlength=n_regions).to(values.dtype)
    sums = values.new_zeros(*lead, n_regions)
    sums.index_add_(-1, flat_labels, flat)
    means = sums / counts.clamp_min(1.0)
    return means.index_select(-1, flat_labels).reshape(values.shape)


def regional_cam(averaged_channel: torch.Tensor) -> torch.Tensor:
    """ReLU + max normalization of a regionally averaged channel."""
    return normalize_cam(averaged_channel)


def erode_binary(mask: np.ndarray, r: int) -> np.ndarray:
    """Binary erosion with a centered r x r square; outside the image counts as 0.

    The window covers offsets -(r//2) .. r-1-r//2 in both axes. Supports
    leading batch dimensions.
    """
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    mask = np.asarray(mask, dtype=bool)
    if r == 1:
        return mask.copy()
    h, w = mask.shape[-2:]
    lo = -(r // 2)
    pt = -lo
    padded = np.zeros(mask.shape[:-2] + (h + r - 1, w + r - 1), dtype=bool)
    padded[..., pt : pt + h, pt : pt + w] = mask
    out = np.ones_like(mask)
    for dy in range(r):
        for dx in range(r):
            out &= padded[..., dy : dy + h, dx : dx + w]
    return out


def reliable_mask(cam: np.ndarray, cfg: ModulationConfig) -> np.ndarray:
    """Eroded high-activation mask: erode(cam >= t_obj) with an r x r window."""
    cam = np.asarray(cam)
    return erode_binary(cam >= cfg.t_obj, cfg.r)


def apply_reliable_selection(
    averaged_cam: torch.Tensor, live_cam: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Fuse the gated live CAM back in: max(averaged, live * mask)."""
    return torch.maximum(averaged_cam, live_cam * mask)


def upsample_features(features: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsampling of (C, h, w) or (B, C, h, w) features."""
    squeeze = features.dim() == 3
    x = features[None] if squeeze else features
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor label downsampling: keep the top-left pixel of each block."""
    if labels.shape[0] % factor or labels.shape[1] % factor:
        raise ValueError(f"label raster {labels.shape} not divisible by factor {factor}")
    return np.ascontiguousarray(labels[::factor, ::factor])


def build_modulation_target(
    upsampled_features: torch.Tensor,
    labels: torch.Tensor,
    cfg: ModulationConfig,
    ras_enabled: bool = True,
) -> torch.Tensor:
    """Alignment target for the present-class channels; detached by construction.

    `upsampled_features` is (C', H', W') at half image resolution, `labels`
    the superpixel raster downsampled to the same grid.
    """
    with torch.no_grad():
        averaged = regional_average(upsampled_features, labels)
        target = normalize_cam(averaged)
        if ras_enabled:
            live = normalize_cam(upsampled_features)
            gate = reliable_mask(live.cpu().numpy(), cfg)
            gate_t = torch.from_numpy(gate.astype(np.float32)).to(live.dtype)
            target = apply_reliable_selection(target, live, gate_t)
    return target


def alignment_loss(live_cams: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean squared error over (C', H', W'); zero when no class is present.

    Targets are detached here as well, so no gradient ever reaches the
    target branch.
    """
    if live_cams.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(live_cams.shape)} vs {tuple(targets.shape)}")
    if live_cams.numel() == 0:
        return live_cams.new_zeros(())
    return (live_cams - targets.detach()).square().mean()
