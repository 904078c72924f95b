"""Joint training of the classifier backbone and the reconstruction decoder.

One SGD-with-momentum optimizer drives both networks under

    total = l_cls + beta_p * l_p + beta_a * l_a

with each constraint contributing exactly zero when its flag is off (the
corresponding graph is never built, so parameter updates are bitwise
identical to a run without it). Data order, augmentation draws, and weight
initialization all derive from the config seed.

Config files are UTF-8 ``key = value`` lines holding exactly the TrainConfig
keys plus the path keys (corpus, out, sp_cache); unknown keys are an error.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbone import CamBackbone, classification_loss, classify, normalize_cam
from .data import Corpus
from .modulation import (
    ModulationConfig,
    alignment_loss,
    build_modulation_target,
    downsample_labels,
    upsample_features,
)
from .reconstruction import (
    Decoder,
    LossNetwork,
    perceptual_loss,
    pixel_loss,
    to_signed,
    to_unit,
)
from .superpixel import load_superpixels

PATH_KEYS = ("corpus", "out", "sp_cache")


class ConfigError(ValueError):
    """Bad training configuration (unknown key, missing cache, invalid value)."""


class NonFiniteLossError(RuntimeError):
    """A loss component became NaN or infinite during training."""


@dataclass
class TrainConfig:
    beta_p: float = 1.0
    beta_a: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    drs_enabled: bool = False
    cdr_enabled: bool = False
    asm_enabled: bool = False
    ras_enabled: bool = False
    cdr_early: bool = False

    def __post_init__(self):
        if self.beta_p < 0 or self.beta_a < 0:
            raise ConfigError("betas must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class LossReport:
    l_cls: float
    l_p: float
    l_a: float
    total: float
    step: int


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_BOOL_FIELDS = {f.name for f in fields(TrainConfig) if f.type in (bool, "bool")}
_INT_FIELDS = {"epochs", "batch_size", "seed"}


def _parse_value(key: str, raw: str):
    if key in _BOOL_FIELDS:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"bad boolean for {key}: {raw!r}")
    if key in _INT_FIELDS:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"bad integer for {key}: {raw!r}") from exc
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad number for {key}: {raw!r}") from exc


def parse_config_file(path: str | Path) -> tuple[dict, dict]:
    """Read a config file into (train config values, path values)."""
    values: dict = {}
    paths: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key in PATH_KEYS:
            paths[key] = raw
        elif key in _FIELD_TYPES:
            values[key] = _parse_value(key, raw)
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    return values, paths


def lr_schedule(step: int, total_steps: int, lr0: float) -> float:
    """Polynomial decay lr0 * (1 - step/total_steps)**0.9."""
    if not (0 <= step < total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps})")
    return lr0 * (1.0 - step / total_steps) ** 0.9


@dataclass
class ModelBundle:
    backbone: CamBackbone
    decoder: Decoder
    loss_net: LossNetwork
    modulation: ModulationConfig

    def trainable_parameters(self):
        yield from self.backbone.parameters()
        yield from self.decoder.parameters()


def _seeded_module(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_models(
    n_classes: int,
    seed: int,
    cdr_early: bool = False,
    stage_channels: tuple[int, ...] = (16, 32, 64, 64),
    pool_stages: tuple[int, ...] = (0, 1, 2, 3),
    decoder_width: int = 32,
    lossnet_channels: tuple[int, ...] = (8, 16, 32, 32, 32),
    lossnet_seed: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> ModelBundle:
    """Construct backbone, decoder, and frozen loss network with seeded init.

    The backbone draw never depends on the decoder shape, so runs that differ
    only in constraint flags start from identical classifier weights.
    """
    backbone = _seeded_module(seed, lambda: CamBackbone(n_classes, stage_channels, pool_stages))
    if cdr_early:
        dec_in, dec_stride = backbone.stage_channels[2], backbone.stage3_stride
    else:
        dec_in, dec_stride = n_classes, backbone.stride
    decoder = Decoder(dec_in, width=decoder_width, n_up=int(math.log2(dec_stride)), seed=seed + 1)
    loss_net = LossNetwork(lossnet_channels) if lossnet_seed is None else LossNetwork(
        lossnet_channels, seed=lossnet_seed
    )
    modulation = ModulationConfig(upsample_factor=max(1, backbone.stride // 2))
    bundle = ModelBundle(backbone, decoder, loss_net, modulation)
    if dtype != torch.float32:
        bundle.backbone.to(dtype)
        bundle.decoder.to(dtype)
        bundle.loss_net.to(dtype)
    return bundle


def save_bundle_checkpoint(path: str | Path, bundle: ModelBundle) -> None:
    tensors = {}
    for prefix, module in (("backbone", bundle.backbone), ("decoder", bundle.decoder)):
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value.detach().cpu().numpy()
    ckpt.save_checkpoint(path, tensors)


def load_bundle_checkpoint(path: str | Path, bundle: ModelBundle) -> None:
    stored = ckpt.load_checkpoint(path)
    for prefix, module in (("backbone", bundle.backbone), ("decoder", bundle.decoder)):
        state = module.state_dict()
        sub = {k[len(prefix) + 1 :]: v for k, v in stored.items() if k.startswith(prefix + ".")}
        if set(sub) != set(state):
            raise ckpt.CheckpointError(f"{path}: {prefix} parameter names do not match")
        for name, arr in sub.items():
            if tuple(arr.shape) != tuple(state[name].shape):
                raise ckpt.CheckpointError(
                    f"{path}: shape mismatch for {prefix}.{name}: "
                    f"file {arr.shape} vs model {tuple(state[name].shape)}"
                )
        module.load_state_dict(
            {k: torch.as_tensor(v, dtype=state[k].dtype) for k, v in sub.items()}
        )


def _optimizer(bundle: ModelBundle, config: TrainConfig) -> torch.optim.SGD:
    """SGD with momentum; normalization affine parameters skip weight decay."""
    norm_params, other_params = [], []
    for module in (bundle.backbone, bundle.decoder):
        for m in module.modules():
            if isinstance(m, (torch.nn.GroupNorm, torch.nn.InstanceNorm2d)):
                norm_params.extend(p for p in m.parameters(recurse=False))
    norm_ids = {id(p) for p in norm_params}
    for p in bundle.trainable_parameters():
        if id(p) not in norm_ids:
            other_params.append(p)
    return torch.optim.SGD(
        [
            {"params": other_params, "weight_decay": config.weight_decay},
            {"params": norm_params, "weight_decay": 0.0},
        ],
        lr=config.lr,
        momentum=config.momentum,
    )


def apply_thread_cap() -> None:
    cap = os.environ.get("SSC_NUM_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _load_training_arrays(corpus: Corpus) -> tuple[list[str], np.ndarray, np.ndarray]:
    ids, images, labels = [], [], []
    for item in corpus:
        ids.append(item.id)
        images.append(item.image)
        labels.append(item.labels)
    return ids, np.stack(images), np.stack(labels)


def _batch_losses(
    bundle: ModelBundle,
    images: torch.Tensor,
    targets: torch.Tensor,
    sp_batch: list[np.ndarray] | None,
    config: TrainConfig,
    cdr_loss: str = "perceptual",
):
    """Assemble the enabled loss components for one batch.

    A component is active only when its flag is set and its weight is
    positive; inactive components are never evaluated, so they contribute
    exactly zero to both the total and the gradients.
    """
    use_cdr = config.cdr_enabled and config.beta_p > 0
    use_asm = config.asm_enabled and config.beta_a > 0
    zero = images.new_zeros(())

    if use_cdr and config.cdr_early:
        feats, stages = bundle.backbone.forward_features(
            images, drs_enabled=config.drs_enabled, return_stages=True
        )
        decoder_input = stages[2]
    else:
        feats = bundle.backbone.forward_features(images, drs_enabled=config.drs_enabled)
        decoder_input = feats

    l_cls = classification_loss(classify(feats), targets)

    l_p = zero
    if use_cdr:
        recon = bundle.decoder(decoder_input)
        if cdr_loss == "perceptual":
            l_p = perceptual_loss(bundle.loss_net, recon, to_signed(images))
        else:
            l_p = pixel_loss(to_unit(recon), images, kind=cdr_loss.upper())

    l_a = zero
    if use_asm:
        half = (images.shape[-2] // 2, images.shape[-1] // 2)
        feats_up = upsample_features(feats, half)
        per_image = []
        for b in range(images.shape[0]):
            present = torch.nonzero(targets[b] > 0.5).flatten()
            if present.numel() == 0:
                continue
            channels = feats_up[b].index_select(0, present)
            live = normalize_cam(channels)
            sp = torch.from_numpy(sp_batch[b].astype(np.int64))
            target = build_modulation_target(
                channels, sp, bundle.modulation, ras_enabled=config.ras_enabled
            )
            per_image.append(alignment_loss(live, target))
        if per_image:
            l_a = torch.stack(per_image).mean()

    total = l_cls
    if use_cdr:
        total = total + config.beta_p * l_p
    if use_asm:
        total = total + config.beta_a * l_a
    return l_cls, l_p, l_a, total


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    epoch_reports: list[LossReport]
    steps: int


def train(
    config: TrainConfig,
    corpus_root: str | Path,
    out_dir: str | Path,
    sp_cache: str | Path | None = None,
    cdr_loss: str = "perceptual",
    deterministic: bool = True,
) -> TrainResult:
    """Run the optimization and write per-epoch checkpoints plus a step log.

    Raises ConfigError before the first step when self-modulation is enabled
    without a complete superpixel cache, and NonFiniteLossError naming the
    offending component if any loss stops being finite.
    """
    apply_thread_cap()
    if deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)

    corpus = Corpus(corpus_root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids, images_np, labels_np = _load_training_arrays(corpus)
    n = len(ids)

    sp_maps: dict[str, np.ndarray] = {}
    if config.asm_enabled and config.beta_a > 0:
        cache_dir = Path(sp_cache) if sp_cache else Path(corpus_root) / "superpixels"
        missing = [i for i in ids if not (cache_dir / f"{i}.sps").is_file()]
        if missing:
            raise ConfigError(
                f"superpixel cache incomplete under {cache_dir}: "
                f"{len(missing)} missing (first: {missing[0]})"
            )
        for i in ids:
            sp_maps[i] = load_superpixels(cache_dir / f"{i}.sps")

    bundle = build_models(corpus.n_classes, config.seed, cdr_early=config.cdr_early)
    optimizer = _optimizer(bundle, config)

    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    rng = np.random.Generator(np.random.PCG64(config.seed))

    log_path = out / "train_log.tsv"
    epoch_reports: list[LossReport] = []
    step = 0
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            flips = rng.random(n) < 0.5
            epoch_sums = np.zeros(4)
            for start in range(0, n, config.batch_size):
                batch_idx = order[start : start + config.batch_size]
                batch_imgs = images_np[batch_idx]
                batch_flips = flips[start : start + len(batch_idx)]
                # horizontal flip keeps cached superpixels pixel-aligned
                batch_imgs = np.stack(
                    [im[:, ::-1] if fl else im for im, fl in zip(batch_imgs, batch_flips)]
                )
                sp_batch = None
                if sp_maps:
                    sp_batch = [
                        np.ascontiguousarray(sp_maps[ids[j]][:, ::-1] if fl else sp_maps[ids[j]])
                        for j, fl in zip(batch_idx, batch_flips)
                    ]
                    sp_batch = [
                        downsample_labels(sp, 2) for sp in sp_batch
                    ]
                images = torch.from_numpy(np.ascontiguousarray(batch_imgs)).permute(0, 3, 1, 2)
                targets = torch.from_numpy(labels_np[batch_idx])

                lr = lr_schedule(step, total_steps, config.lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()
                l_cls, l_p, l_a, total = _batch_losses(
                    bundle, images, targets, sp_batch, config, cdr_loss=cdr_loss
                )
                for name, value in (("l_cls", l_cls), ("l_p", l_p), ("l_a", l_a), ("total", total)):
                    if not torch.isfinite(value):
                        raise NonFiniteLossError(f"{name} is non-finite at step {step}")
                total.backward()
                optimizer.step()

                row = (
                    float(l_cls.detach()),
                    float(l_p.detach()),
                    float(l_a.detach()),
                    float(total.detach()),
                )
                epoch_sums += row
                log.write("%d\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\n" % (step, *row, lr))
                step += 1
            means = epoch_sums / steps_per_epoch
            epoch_reports.append(LossReport(*means, step=step))
            save_bundle_checkpoint(out / f"epoch_{epoch + 1:03d}.ssck", bundle)

    final_path = out / "final.ssck"
    save_bundle_checkpoint(final_path, bundle)
    return TrainResult(final_path, log_path, epoch_reports, step)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    n_params: int
    dtype: str


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest deviation, relative to the dominant gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-30)
    return float(np.abs(analytic - numeric).max() / scale)


def finite_difference_gradient(loss_fn, params: list[torch.Tensor], epsilon: float) -> list[np.ndarray]:
    """Central differences of `loss_fn()` for every element of `params`.

    Evaluations run under no_grad in float64 module weights, so the estimate
    is an independent oracle for the analytic backward pass.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = np.zeros(p.numel())
            flat = p.view(-1)
            for i in range(p.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                hi = float(loss_fn())
                flat[i] = orig - epsilon
                lo = float(loss_fn())
                flat[i] = orig
                g[i] = (hi - lo) / (2.0 * epsilon)
            grads.append(g.reshape(tuple(p.shape)))
    return grads


def _miniature_bundle(seed: int, dtype: torch.dtype) -> ModelBundle:
    """Sub-1e3-parameter configuration on 16x16 inputs with a stride-4 CAM grid."""
    return build_models(
        n_classes=2,
        seed=seed,
        stage_channels=(2, 2, 2, 2),
        pool_stages=(0, 1),
        decoder_width=2,
        lossnet_channels=(2, 2),
        dtype=dtype,
    )


def _miniature_batch(seed: int, dtype: torch.dtype):
    rng = np.random.Generator(np.random.PCG64(seed + 17))
    images = torch.from_numpy(rng.random((2, 3, 16, 16))).to(dtype)
    targets = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=dtype)
    yy, xx = np.mgrid[0:8, 0:8]
    sp = torch.from_numpy((2 * (yy >= 4) + (xx >= 4)).astype(np.int64))
    return images, targets, sp


def grad_check(
    config: TrainConfig, epsilon: float = 1e-5, dtype: torch.dtype = torch.float32
) -> GradCheckReport:
    """Analytic vs central-difference gradients for each loss component.

    The numeric oracle always runs at float64; `dtype` selects the precision
    of the analytic pass under test. The alignment target is built once and
    frozen, matching the constant-target semantics of the loss.
    """
    bundle64 = _miniature_bundle(config.seed, torch.float64)
    images64, targets64, sp = _miniature_batch(config.seed, torch.float64)
    params64 = [p for p in bundle64.trainable_parameters()]
    n_params = sum(p.numel() for p in params64)

    half = (8, 8)
    drs = True

    def loss_cls(b, images, targets):
        feats = b.backbone.forward_features(images, drs_enabled=drs)
        return classification_loss(classify(feats), targets)

    def loss_p(b, images, targets):
        feats = b.backbone.forward_features(images, drs_enabled=drs)
        return perceptual_loss(b.loss_net, b.decoder(feats), to_signed(images))

    present = [torch.nonzero(targets64[b] > 0.5).flatten() for b in range(2)]
    with torch.no_grad():
        feats0 = bundle64.backbone.forward_features(images64, drs_enabled=drs)
        up0 = upsample_features(feats0, half)
        frozen_targets = [
            build_modulation_target(
                up0[b].index_select(0, present[b]), sp, bundle64.modulation, ras_enabled=True
            )
            for b in range(2)
        ]

    def loss_a(b, images, targets):
        feats = b.backbone.forward_features(images, drs_enabled=drs)
        feats_up = upsample_features(feats, half)
        per_image = [
            alignment_loss(
                normalize_cam(feats_up[i].index_select(0, present[i])),
                frozen_targets[i].to(images.dtype),
            )
            for i in range(2)
        ]
        return torch.stack(per_image).mean()

    losses = {"l_cls": loss_cls, "l_p": loss_p, "l_a": loss_a}
    report: dict[str, float] = {}
    for name, fn in losses.items():
        numeric = finite_difference_gradient(
            lambda: fn(bundle64, images64, targets64), params64, epsilon
        )
        if dtype == torch.float64:
            bundle_t, images_t, targets_t = bundle64, images64, targets64
            params_t = params64
        else:
            bundle_t = _miniature_bundle(config.seed, dtype)
            images_t, targets_t, _ = _miniature_batch(config.seed, dtype)
            params_t = [p for p in bundle_t.trainable_parameters()]
        value = fn(bundle_t, images_t, targets_t)
        analytic = torch.autograd.grad(
            value, params_t, retain_graph=False, allow_unused=True
        )
        errs = []
        for a, f in zip(analytic, numeric):
            a_np = np.zeros_like(f) if a is None else a.detach().double().numpy()
            errs.append((a_np, f))
        report[name] = _max_rel_err(
            np.concatenate([a.ravel() for a, _ in errs]),
            np.concatenate([f.ravel() for _, f in errs]),
        )
    return GradCheckReport(report, n_params, str(dtype).replace("torch.", ""))
