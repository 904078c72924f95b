"""Pseudo-mask generation from trained CAMs and mIoU scoring.

CAM export file layout: magic ``CAMF``, u32 version, u32 C', u32 H, u32 W,
C' u32 class indices, then C' * H * W float32 little-endian values,
row-major per class.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import CamBackbone, image_to_tensor, normalize_cam
from .modulation import upsample_features

CAM_MAGIC = b"CAMF"
CAM_VERSION = 1
DEFAULT_T_BG = 0.25  # sits below the reliable-selection threshold 0.3


def cams_for_image(
    backbone: CamBackbone, image: np.ndarray, labels: np.ndarray, drs_enabled: bool
) -> dict[int, np.ndarray]:
    """Full-resolution activation maps for the classes present in `labels`.

    Returns {1-based class index: (H, W) map in [0, 1]}; normalization happens
    on the CAM grid, then bilinear upsampling to image resolution. Suppression
    must match the training-time setting.
    """
    h, w = image.shape[:2]
    with torch.no_grad():
        feats = backbone.forward_features(image_to_tensor(image), drs_enabled=drs_enabled)[0]
        cams = normalize_cam(feats)
        up = upsample_features(cams, (h, w)).numpy()
    present = np.nonzero(np.asarray(labels) > 0.5)[0]
    return {int(c) + 1: up[int(c)] for c in present}


def pseudo_mask(cams: dict[int, np.ndarray], t_bg: float) -> np.ndarray:
    """Background below `t_bg`, else the argmax class (ties to the lowest index)."""
    classes = sorted(cams)
    if not classes:
        raise ValueError("pseudo_mask needs at least one activation map")
    stack = np.stack([cams[c] for c in classes])
    best = stack.argmax(axis=0)
    peak = stack.max(axis=0)
    out = np.asarray(classes, dtype=np.int32)[best]
    out[peak < t_bg] = 0
    return out


@dataclass
class IoUTable:
    intersection: np.ndarray  # (C+1,) pixel counts, background at index 0
    union: np.ndarray
    iou: np.ndarray           # NaN where the union is empty
    miou: float

    def format(self, class_names: list[str] | None = None) -> str:
        names = ["background"] + (
            class_names if class_names else [f"class_{c}" for c in range(1, len(self.iou))]
        )
        lines = ["%-14s %12s %12s %8s" % ("class", "intersection", "union", "IoU")]
        for c, name in enumerate(names):
            iou = "-" if np.isnan(self.iou[c]) else f"{self.iou[c]:.4f}"
            lines.append(
                "%-14s %12d %12d %8s" % (name, self.intersection[c], self.union[c], iou)
            )
        lines.append("%-14s %34s %8.4f" % ("mIoU", "", self.miou))
        return "\n".join(lines)

    def to_tsv(self, class_names: list[str] | None = None) -> str:
        names = ["background"] + (
            class_names if class_names else [f"class_{c}" for c in range(1, len(self.iou))]
        )
        rows = ["class\tintersection\tunion\tiou"]
        for c, name in enumerate(names):
            iou = "" if np.isnan(self.iou[c]) else f"{self.iou[c]:.6f}"
            rows.append(f"{name}\t{int(self.intersection[c])}\t{int(self.union[c])}\t{iou}")
        rows.append(f"miou\t\t\t{self.miou:.6f}")
        return "\n".join(rows) + "\n"


class IoUAccumulator:
    """Streaming per-class intersection/union counts; merging is associative."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.intersection = np.zeros(n_classes + 1, dtype=np.int64)
        self.union = np.zeros(n_classes + 1, dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray, image_id: str = "?") -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(
                f"shape mismatch for image {image_id!r}: pred {pred.shape} vs gt {gt.shape}"
            )
        for c in range(self.n_classes + 1):
            p = pred == c
            g = gt == c
            self.intersection[c] += np.count_nonzero(p & g)
            self.union[c] += np.count_nonzero(p | g)

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        out = IoUAccumulator(self.n_classes)
        out.intersection = self.intersection + other.intersection
        out.union = self.union + other.union
        return out

    def table(self) -> IoUTable:
        with np.errstate(invalid="ignore"):
            iou = np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)
        valid = self.union > 0
        miou = float(iou[valid].mean()) if valid.any() else float("nan")
        return IoUTable(self.intersection.copy(), self.union.copy(), iou, miou)


def miou(preds: dict[str, np.ndarray], gts: dict[str, np.ndarray], n_classes: int) -> IoUTable:
    """Dataset-level IoU per class plus the mean over classes with nonempty union."""
    if set(preds) != set(gts):
        missing = sorted(set(gts) ^ set(preds))
        raise ValueError(f"prediction/ground-truth id sets differ (e.g. {missing[:3]})")
    acc = IoUAccumulator(n_classes)
    for image_id in sorted(preds):
        acc.add(preds[image_id], gts[image_id], image_id)
    return acc.table()


def write_cam_file(path: str | Path, cams: dict[int, np.ndarray]) -> None:
    classes = sorted(cams)
    if not classes:
        raise ValueError("refusing to write an empty CAM file")
    h, w = cams[classes[0]].shape
    with open(path, "wb") as f:
        f.write(CAM_MAGIC)
        f.write(struct.pack("<IIII", CAM_VERSION, len(classes), h, w))
        for c in classes:
            f.write(struct.pack("<I", c))
        for c in classes:
            f.write(np.ascontiguousarray(cams[c], dtype="<f4").tobytes(order="C"))


def read_cam_file(path: str | Path) -> dict[int, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CAM_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, n, h, w = struct.unpack_from("<IIII", data, 4)
    if version != CAM_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 20
    classes = struct.unpack_from(f"<{n}I", data, offset)
    offset += 4 * n
    out = {}
    for c in classes:
        arr = np.frombuffer(data, dtype="<f4", count=h * w, offset=offset)
        offset += 4 * h * w
        out[int(c)] = arr.reshape(h, w).copy()
    return out


def render_cam_overlay(image: np.ndarray, cam: np.ndarray) -> np.ndarray:
    """Grayscale activation alpha-blended 50% over the image (fixed colormap)."""
    act = np.clip(np.asarray(cam, dtype=np.float32), 0.0, 1.0)[:, :, None]
    return 0.5 * np.asarray(image, dtype=np.float32) + 0.5 * act
