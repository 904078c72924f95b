"""Synthetic shapes corpus, corpus loading, and train-time augmentation.

Corpus layout on disk:
    root/images/<id>.png   8-bit RGB
    root/masks/<id>.png    8-bit single channel, value = class index, 0 = background (optional)
    root/labels.txt        line 1: "classes <C> <name_1> ... <name_C>"
                           then one "<id> <c1>,<c2>,..." line per image (1-based class indices)
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image as PILImage

SHAPE_NAMES = ("disk", "square", "triangle", "ring", "cross", "bar", "ell", "diamond")

MAX_SHAPES_PER_IMAGE = 3
MIN_AREA_FRAC = 0.05
MAX_AREA_FRAC = 0.20
NOISE_AMPLITUDE = 0.12
FREQ_LO, FREQ_HI = 0.2, 0.8


class CorpusFormatError(ValueError):
    """Raised when labels.txt or a corpus file does not match the documented layout."""


@dataclass
class CorpusItem:
    id: str
    image: np.ndarray           # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray          # (C,) float32 binary vector
    mask: Optional[np.ndarray]  # (H, W) int32 in {0..C}, evaluation only


def save_image_png(path: str | Path, pixels: np.ndarray) -> None:
    """Save an (H, W, 3) float image in [0, 1] as 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image_png(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_mask_png(path: str | Path, labels: np.ndarray) -> None:
    PILImage.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_mask_png(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.int32)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap float pixels to the 8-bit grid so disk round-trips are exact."""
    return (np.clip(np.rint(pixels * 255.0), 0, 255) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# shape rasterization

def _shape_mask(shape: str, size: int, area: float, cy: float, cx: float) -> np.ndarray:
    """Boolean (size, size) raster of one archetype with roughly `area` pixels."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        r = np.sqrt(area / np.pi)
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        half = np.sqrt(area) / 2.0
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if shape == "triangle":
        # isoceles, apex up: base w, height 0.9 w
        w = np.sqrt(2.0 * area / 0.9)
        h = 0.9 * w
        t = (dy + h / 2.0) / h  # 0 at apex, 1 at base
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * w / 2.0)
    if shape == "ring":
        r = np.sqrt(4.0 * area / (3.0 * np.pi))
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r / 2.0) ** 2)
    if shape == "cross":
        w = np.sqrt(area / 5.0)
        arm = 1.5 * w
        vert = (np.abs(dx) <= w / 2.0) & (np.abs(dy) <= arm)
        horz = (np.abs(dy) <= w / 2.0) & (np.abs(dx) <= arm)
        return vert | horz
    if shape == "bar":
        w = np.sqrt(2.5 * area)
        h = w / 2.5
        return (np.abs(dx) <= w / 2.0) & (np.abs(dy) <= h / 2.0)
    if shape == "ell":
        s = np.sqrt(4.0 * area / 3.0)
        inside = (np.abs(dy) <= s / 2.0) & (np.abs(dx) <= s / 2.0)
        notch = (dy < 0) & (dx > 0)
        return inside & ~notch
    if shape == "diamond":
        r = np.sqrt(area / 2.0)
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(f"unknown shape archetype: {shape}")


def _value_noise(rng: np.random.Generator, size: int, cells: int = 5) -> np.ndarray:
    """Smooth noise field in [0, 1]: coarse random grid, bilinearly upsampled."""
    grid = rng.uniform(0.0, 1.0, size=(cells, cells))
    src = np.linspace(0.0, cells - 1.0, size)
    i0 = np.clip(np.floor(src).astype(int), 0, cells - 2)
    frac = src - i0
    rows = grid[i0, :] * (1 - frac)[:, None] + grid[i0 + 1, :] * frac[:, None]
    out = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return out


def _assign_classes(rng: np.random.Generator, n_images: int, n_classes: int) -> list[np.ndarray]:
    """Per-image class subsets, redrawn until every class frequency is in [0.2, 0.8].

    The frequency bound is only enforceable for corpora of a useful size; tiny
    smoke corpora (< 25 images) take the first draw.
    """
    max_k = min(MAX_SHAPES_PER_IMAGE, n_classes)

    def draw() -> list[np.ndarray]:
        return [
            np.sort(rng.choice(n_classes, size=int(rng.integers(1, max_k + 1)), replace=False)) + 1
            for _ in range(n_images)
        ]

    if n_images < 25:
        return draw()
    for _ in range(1000):
        sets = draw()
        counts = np.zeros(n_classes)
        for s in sets:
            counts[s - 1] += 1
        freq = counts / n_images
        if np.all(freq >= FREQ_LO) and np.all(freq <= FREQ_HI):
            return sets
    raise RuntimeError("could not satisfy class frequency bounds")


def _render_image(
    rng: np.random.Generator, size: int, classes: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Render one image with the given present classes; returns (pixels, gt_mask)."""
    field = _value_noise(rng, size)
    pixels = np.empty((size, size, 3), dtype=np.float64)
    for ch in range(3):
        pixels[:, :, ch] = 0.10 + rng.uniform(0.0, 0.03) + NOISE_AMPLITUDE * field
    gt = np.zeros((size, size), dtype=np.int32)
    occupied = np.zeros((size, size), dtype=bool)
    for cls in classes:
        shape = SHAPE_NAMES[cls - 1]
        placed = False
        for _ in range(200):
            area = rng.uniform(MIN_AREA_FRAC, MAX_AREA_FRAC) * size * size
            margin = 0.55 * np.sqrt(area)
            cy = rng.uniform(margin, size - margin)
            cx = rng.uniform(margin, size - margin)
            mask = _shape_mask(shape, size, area, cy, cx)
            if mask.sum() < MIN_AREA_FRAC * size * size * 0.5:
                continue
            if not (mask & occupied).any():
                placed = True
                break
        if not placed:
            continue  # crowded image keeps its remaining shapes off
        # bright color on a dark background; shared palette across classes so
        # only the archetype geometry is class-discriminative
        color = rng.uniform(0.50, 1.0, size=3)
        color[int(rng.integers(0, 3))] = rng.uniform(0.80, 1.0)
        pixels[mask] = color
        occupied |= mask
        gt[mask] = cls
    return pixels, gt


def generate_synthetic_corpus(
    out_dir: str | Path, n_images: int, n_classes: int, image_size: int, seed: int
) -> Path:
    """Write a labeled shapes corpus; deterministic for a given argument tuple.

    Each image holds 1..3 non-overlapping shapes over low-amplitude value
    noise, one archetype per class, with ground-truth masks for evaluation.
    """
    if not (2 <= n_classes <= len(SHAPE_NAMES)):
        raise ValueError(f"n_classes must be in [2, {len(SHAPE_NAMES)}], got {n_classes}")
    if image_size < 32 or image_size % 16 != 0:
        raise ValueError(f"image_size must be >= 32 and divisible by 16, got {image_size}")
    if n_images < 1:
        raise ValueError("n_images must be positive")

    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.Generator(np.random.PCG64(seed))
    class_sets = _assign_classes(rng, n_images, n_classes)

    lines = ["classes %d %s" % (n_classes, " ".join(SHAPE_NAMES[:n_classes]))]
    for i, classes in enumerate(class_sets):
        image_id = f"img_{i:04d}"
        pixels, gt = _render_image(rng, image_size, classes)
        present = np.unique(gt[gt > 0])
        if present.size == 0:  # placement never failed in practice; keep the contract anyway
            classes = classes[:1]
            pixels, gt = _render_image(rng, image_size, classes)
            present = np.unique(gt[gt > 0])
        save_image_png(root / "images" / f"{image_id}.png", quantize(pixels))
        save_mask_png(root / "masks" / f"{image_id}.png", gt)
        lines.append("%s %s" % (image_id, ",".join(str(c) for c in present)))
    (root / "labels.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


# ---------------------------------------------------------------------------
# loading

class Corpus:
    """Iterable view over a corpus directory; masks attach when present."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        labels_path = self.root / "labels.txt"
        if not labels_path.is_file():
            raise FileNotFoundError(f"no labels.txt under {self.root}")
        raw = labels_path.read_text(encoding="utf-8").splitlines()
        if not raw:
            raise CorpusFormatError(f"{labels_path}: empty file")
        header = raw[0].split()
        if len(header) < 2 or header[0] != "classes":
            raise CorpusFormatError(f"{labels_path}:1: bad header {raw[0]!r}")
        try:
            n_classes = int(header[1])
        except ValueError as exc:
            raise CorpusFormatError(f"{labels_path}:1: bad class count {header[1]!r}") from exc
        names = header[2:]
        if len(names) != n_classes:
            raise CorpusFormatError(
                f"{labels_path}:1: header promises {n_classes} class names, found {len(names)}"
            )
        self.class_names = names
        self.n_classes = n_classes
        self.entries: list[tuple[str, list[int]]] = []
        for lineno, line in enumerate(raw[1:], start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise CorpusFormatError(f"{labels_path}:{lineno}: expected '<id> <c1>,<c2>,...', got {line!r}")
            image_id, spec = parts
            try:
                classes = sorted({int(tok) for tok in spec.split(",")})
            except ValueError as exc:
                raise CorpusFormatError(f"{labels_path}:{lineno}: bad class list {spec!r}") from exc
            if not classes or min(classes) < 1 or max(classes) > n_classes:
                raise CorpusFormatError(
                    f"{labels_path}:{lineno}: class indices must be 1..{n_classes}, got {spec!r}"
                )
            self.entries.append((image_id, classes))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [image_id for image_id, _ in self.entries]

    def label_vector(self, classes: list[int]) -> np.ndarray:
        y = np.zeros(self.n_classes, dtype=np.float32)
        y[np.asarray(classes) - 1] = 1.0
        return y

    def load(self, image_id: str) -> CorpusItem:
        classes = dict(self.entries).get(image_id)
        if classes is None:
            raise KeyError(f"id {image_id!r} not listed in labels.txt")
        image_path = self.root / "images" / f"{image_id}.png"
        if not image_path.is_file():
            raise FileNotFoundError(f"missing image file for id {image_id!r}: {image_path}")
        image = load_image_png(image_path)
        mask_path = self.root / "masks" / f"{image_id}.png"
        mask = load_mask_png(mask_path) if mask_path.is_file() else None
        return CorpusItem(id=image_id, image=image, labels=self.label_vector(classes), mask=mask)

    def __iter__(self) -> Iterator[CorpusItem]:
        for image_id, _ in self.entries:
            yield self.load(image_id)


def load_corpus(root: str | Path) -> Corpus:
    return Corpus(root)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    scale: float
    dy: float  # crop/pad anchor in [0, 1]
    dx: float


def draw_augment_params(rng: np.random.Generator) -> AugmentParams:
    """One augmentation draw: flip with p=0.5, scale in [0.75, 1.25], crop anchor."""
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(0.75, 1.25))
    dy = float(rng.random())
    dx = float(rng.random())
    return AugmentParams(flip=flip, scale=scale, dy=dy, dx=dx)


def _resize_bilinear(image: np.ndarray, h2: int, w2: int) -> np.ndarray:
    import torch

    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = torch.nn.functional.interpolate(t, size=(h2, w2), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def _resize_nearest_labels(labels: np.ndarray, h2: int, w2: int) -> np.ndarray:
    import torch

    t = torch.from_numpy(np.ascontiguousarray(labels, dtype=np.float32))[None, None]
    out = torch.nn.functional.interpolate(t, size=(h2, w2), mode="nearest")
    return out[0, 0].numpy().astype(labels.dtype)


def _crop_or_pad(arr: np.ndarray, out_h: int, out_w: int, dy: float, dx: float) -> np.ndarray:
    h, w = arr.shape[:2]
    if h > out_h:
        top = int(round(dy * (h - out_h)))
        arr = arr[top : top + out_h]
    elif h < out_h:
        top = int(round(dy * (out_h - h)))
        widths = [(top, out_h - h - top)] + [(0, 0)] * (arr.ndim - 1)
        arr = np.pad(arr, widths, mode="edge")
    if w > out_w:
        left = int(round(dx * (w - out_w)))
        arr = arr[:, left : left + out_w]
    elif w < out_w:
        left = int(round(dx * (out_w - w)))
        widths = [(0, 0), (left, out_w - w - left)] + [(0, 0)] * (arr.ndim - 2)
        arr = np.pad(arr, widths, mode="edge")
    return arr


def apply_augment(image: np.ndarray, params: AugmentParams, out_size: int) -> np.ndarray:
    out = image
    if params.flip:
        out = out[:, ::-1]
    if params.scale != 1.0 or out.shape[0] != out_size or out.shape[1] != out_size:
        h2 = max(1, int(round(params.scale * out.shape[0])))
        w2 = max(1, int(round(params.scale * out.shape[1])))
        out = _resize_bilinear(out, h2, w2)
        out = _crop_or_pad(out, out_size, out_size, params.dy, params.dx)
    return np.ascontiguousarray(out, dtype=np.float32)


def apply_augment_labels(labels: np.ndarray, params: AugmentParams, out_size: int) -> np.ndarray:
    """Same geometric transform for an integer label raster (nearest resampling)."""
    out = labels
    if params.flip:
        out = out[:, ::-1]
    if params.scale != 1.0 or out.shape[0] != out_size or out.shape[1] != out_size:
        h2 = max(1, int(round(params.scale * out.shape[0])))
        w2 = max(1, int(round(params.scale * out.shape[1])))
        out = _resize_nearest_labels(np.ascontiguousarray(out), h2, w2)
        out = _crop_or_pad(out, out_size, out_size, params.dy, params.dx)
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, rng: np.random.Generator, out_size: int | None = None) -> np.ndarray:
    """Random flip/scale/crop of one image, padded or cropped back to `out_size`."""
    if out_size is None:
        out_size = image.shape[0]
    return apply_augment(image, draw_augment_params(rng), out_size)
