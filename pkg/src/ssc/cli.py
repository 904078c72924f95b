"""Command-line entry point wiring corpus generation, superpixel caching,
training, CAM dumping, reconstruction demos, pseudo-mask generation,
evaluation, and the ablation orchestrator.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every subcommand
accepts ``--config <file>``; explicit flags win over file values. Artifact
producing subcommands write a ``manifest.json`` beside their outputs with the
effective configuration, corpus hash, tool version, and seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, data, evaluate, superpixel, trainer

ABLATION_ROWS: list[tuple[str, dict]] = [
    ("baseline", {}),
    ("+DRS", {"drs_enabled": True}),
    ("+DRS+CDR", {"drs_enabled": True, "cdr_enabled": True}),
    (
        "+DRS+CDR+ASM(no RAS)",
        {"drs_enabled": True, "cdr_enabled": True, "asm_enabled": True, "ras_enabled": False},
    ),
    (
        "+DRS+CDR+ASM",
        {"drs_enabled": True, "cdr_enabled": True, "asm_enabled": True, "ras_enabled": True},
    ),
]

LOSS_ABLATION_ROWS: list[tuple[str, dict, str]] = [
    ("w/o CDR", {"drs_enabled": True}, "perceptual"),
    ("CDR+L1", {"drs_enabled": True, "cdr_enabled": True}, "l1"),
    ("CDR+L2", {"drs_enabled": True, "cdr_enabled": True}, "l2"),
    ("CDR+perceptual", {"drs_enabled": True, "cdr_enabled": True}, "perceptual"),
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def _corpus_hash(root: Path) -> str:
    h = hashlib.sha256()
    labels = root / "labels.txt"
    if labels.is_file():
        h.update(labels.read_bytes())
    for sub in ("images", "masks"):
        d = root / sub
        if d.is_dir():
            for p in sorted(d.iterdir()):
                h.update(p.name.encode())
                h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    seed: int | None,
    corpus_root: Path | None = None,
    checkpoint_path: str | None = None,
) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "corpus_hash": _corpus_hash(Path(corpus_root)) if corpus_root else None,
        "checkpoint": checkpoint_path,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _add_config_arg(p: _Parser) -> None:
    p.add_argument("--config", type=str, default=None, help="key = value config file")


def _add_train_flags(p: _Parser) -> None:
    for f in dataclasses.fields(trainer.TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in (bool, "bool"):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        elif f.name in ("epochs", "batch_size", "seed"):
            p.add_argument(flag, type=int, default=None)
        else:
            p.add_argument(flag, type=float, default=None)


def _effective_config(args) -> tuple[dict, dict]:
    """File values overridden by explicit flags; returns (config dict, paths)."""
    file_values: dict = {}
    file_paths: dict = {}
    if getattr(args, "config", None):
        file_values, file_paths = trainer.parse_config_file(args.config)
    merged = {f.name: getattr(trainer.TrainConfig(), f.name) for f in dataclasses.fields(trainer.TrainConfig)}
    merged.update(file_values)
    for key in list(merged):
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    paths = dict(file_paths)
    for key in trainer.PATH_KEYS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            paths[key] = flag_value
    return merged, paths


def _require(paths: dict, key: str) -> Path:
    if key not in paths or not paths[key]:
        raise UsageError(f"missing required path {key!r} (flag --{key.replace('_', '-')} or config file)")
    return Path(paths[key])


def _load_run_bundle(checkpoint_path: Path, n_classes: int):
    """Rebuild models for a checkpoint, honoring the run manifest's flags."""
    cfg = {}
    manifest_path = checkpoint_path.parent / "manifest.json"
    if manifest_path.is_file():
        cfg = json.loads(manifest_path.read_text(encoding="utf-8")).get("config", {})
    stored = checkpoint.load_checkpoint(checkpoint_path)
    stored_classes = stored["backbone.classifier.weight"].shape[0]
    if stored_classes != n_classes:
        raise trainer.ConfigError(
            f"checkpoint has {stored_classes} classes but the corpus defines {n_classes}"
        )
    bundle = trainer.build_models(
        n_classes, seed=int(cfg.get("seed", 0)), cdr_early=bool(cfg.get("cdr_early", False))
    )
    trainer.load_bundle_checkpoint(checkpoint_path, bundle)
    bundle.backbone.eval()
    bundle.decoder.eval()
    return bundle, cfg


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args) -> int:
    merged, paths = _effective_config(args)
    out = _require(paths, "out")
    data.generate_synthetic_corpus(out, args.n, args.classes, args.size, args.seed)
    write_manifest(
        out,
        "gen-data",
        {"n": args.n, "classes": args.classes, "size": args.size},
        args.seed,
        corpus_root=out,
    )
    print(f"wrote corpus with {args.n} images to {out}")
    return 0


def _cmd_superpix(args) -> int:
    merged, paths = _effective_config(args)
    corpus_root = _require(paths, "corpus")
    cache_dir = Path(paths.get("sp_cache") or corpus_root / "superpixels")
    cache_dir.mkdir(parents=True, exist_ok=True)
    corpus = data.load_corpus(corpus_root)
    render_dir = Path(args.render) if args.render else None
    if render_dir:
        render_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for item in corpus:
        target = cache_dir / f"{item.id}.sps"
        if not target.is_file() or args.force:
            labels = superpixel.segment_image(
                item.image, k=args.k, min_size=args.min_size, sigma=args.sigma, budget=args.budget
            )
            superpixel.save_superpixels(target, labels)
        if render_dir:
            labels = superpixel.load_superpixels(target)
            data.save_image_png(
                render_dir / f"{item.id}_superpixels.png",
                superpixel.render_boundaries(item.image, labels),
            )
        count += 1
    write_manifest(
        cache_dir,
        "superpix",
        {"k": args.k, "min_size": args.min_size, "sigma": args.sigma, "budget": args.budget},
        None,
        corpus_root=corpus_root,
    )
    print(f"superpixel cache ready for {count} images under {cache_dir}")
    return 0


def _cmd_train(args) -> int:
    merged, paths = _effective_config(args)
    corpus_root = _require(paths, "corpus")
    out = _require(paths, "out")
    sp_cache = paths.get("sp_cache")
    config = trainer.TrainConfig(**merged)
    result = trainer.train(config, corpus_root, out, sp_cache=sp_cache)
    write_manifest(
        out,
        "train",
        merged,
        config.seed,
        corpus_root=corpus_root,
        checkpoint_path=str(result.checkpoint_path),
    )
    last = result.epoch_reports[-1]
    print(
        f"trained {config.epochs} epochs ({result.steps} steps); "
        f"final epoch means: l_cls={last.l_cls:.4f} l_p={last.l_p:.4f} "
        f"l_a={last.l_a:.4f} total={last.total:.4f}"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_cam(args) -> int:
    merged, paths = _effective_config(args)
    corpus_root = _require(paths, "corpus")
    out = _require(paths, "out")
    out.mkdir(parents=True, exist_ok=True)
    corpus = data.load_corpus(corpus_root)
    bundle, run_cfg = _load_run_bundle(Path(args.checkpoint), corpus.n_classes)
    drs = merged["drs_enabled"] if args.drs_enabled is not None else bool(run_cfg.get("drs_enabled", False))
    sp_cache = Path(paths["sp_cache"]) if paths.get("sp_cache") else corpus_root / "superpixels"
    for item in corpus:
        cams = evaluate.cams_for_image(bundle.backbone, item.image, item.labels, drs)
        evaluate.write_cam_file(out / f"{item.id}.camf", cams)
        if args.heatmaps:
            for c, cam in cams.items():
                data.save_image_png(
                    out / f"{item.id}_class{c}.png", evaluate.render_cam_overlay(item.image, cam)
                )
        if args.dump_modulation:
            _dump_modulation_maps(bundle, item, sp_cache, out, bool(run_cfg.get("ras_enabled", True)), drs)
    write_manifest(out, "cam", {**merged, "drs_enabled": drs}, None, corpus_root=corpus_root,
                   checkpoint_path=args.checkpoint)
    print(f"wrote CAM files for {len(corpus)} images to {out}")
    return 0


def _dump_modulation_maps(bundle, item, sp_cache: Path, out: Path, ras: bool, drs: bool) -> None:
    import torch

    from .backbone import image_to_tensor, normalize_cam
    from .modulation import build_modulation_target, downsample_labels, regional_average, upsample_features

    sp_path = sp_cache / f"{item.id}.sps"
    if not sp_path.is_file():
        raise trainer.ConfigError(f"--dump-modulation needs a superpixel cache entry: {sp_path}")
    sp = downsample_labels(superpixel.load_superpixels(sp_path), 2)
    h, w = item.image.shape[:2]
    with torch.no_grad():
        feats = bundle.backbone.forward_features(image_to_tensor(item.image), drs_enabled=drs)[0]
        up = upsample_features(feats, (h // 2, w // 2))
        present = np.nonzero(item.labels > 0.5)[0]
        channels = up.index_select(0, torch.from_numpy(present.astype(np.int64)))
        averaged = normalize_cam(regional_average(channels, torch.from_numpy(sp.astype(np.int64))))
        rs = build_modulation_target(channels, torch.from_numpy(sp.astype(np.int64)),
                                     bundle.modulation, ras_enabled=ras)
    half_img = item.image[::2, ::2]
    for i, c in enumerate(present + 1):
        data.save_image_png(out / f"{item.id}_class{c}_regional.png",
                            evaluate.render_cam_overlay(half_img, averaged[i].numpy()))
        data.save_image_png(out / f"{item.id}_class{c}_target.png",
                            evaluate.render_cam_overlay(half_img, rs[i].numpy()))


def _cmd_reconstruct(args) -> int:
    import torch

    from .backbone import image_to_tensor
    from .reconstruction import to_unit

    merged, paths = _effective_config(args)
    corpus_root = _require(paths, "corpus")
    corpus = data.load_corpus(corpus_root)
    bundle, run_cfg = _load_run_bundle(Path(args.checkpoint), corpus.n_classes)
    drs = merged["drs_enabled"] if args.drs_enabled is not None else bool(run_cfg.get("drs_enabled", False))
    cdr_early = bool(run_cfg.get("cdr_early", False))
    ids = args.ids.split(",") if args.ids else corpus.ids[: args.n]
    out_dir = Path(paths["out"]) if paths.get("out") else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for image_id in ids:
        item = corpus.load(image_id)
        with torch.no_grad():
            x = image_to_tensor(item.image)
            if cdr_early:
                _, stages = bundle.backbone.forward_features(x, drs_enabled=drs, return_stages=True)
                recon = bundle.decoder(stages[2])
            else:
                recon = bundle.decoder(bundle.backbone.forward_features(x, drs_enabled=drs))
        pixels = to_unit(recon)[0].permute(1, 2, 0).numpy()
        target = (out_dir / f"{image_id}.recon.png") if out_dir else (
            corpus_root / "images" / f"{image_id}.recon.png"
        )
        data.save_image_png(target, pixels)
        written.append(target)
    if out_dir:
        write_manifest(out_dir, "reconstruct", merged, None, corpus_root=corpus_root,
                       checkpoint_path=args.checkpoint)
    print("\n".join(str(p) for p in written))
    return 0


def _cmd_pseudo(args) -> int:
    merged, paths = _effective_config(args)
    corpus_root = _require(paths, "corpus")
    out = _require(paths, "out")
    out.mkdir(parents=True, exist_ok=True)
    corpus = data.load_corpus(corpus_root)
    bundle, run_cfg = _load_run_bundle(Path(args.checkpoint), corpus.n_classes)
    drs = merged["drs_enabled"] if args.drs_enabled is not None else bool(run_cfg.get("drs_enabled", False))
    for item in corpus:
        cams = evaluate.cams_for_image(bundle.backbone, item.image, item.labels, drs)
        mask = evaluate.pseudo_mask(cams, args.t_bg)
        data.save_mask_png(out / f"{item.id}.png", mask)
    write_manifest(out, "pseudo", {**merged, "t_bg": args.t_bg, "drs_enabled": drs}, None,
                   corpus_root=corpus_root, checkpoint_path=args.checkpoint)
    print(f"wrote {len(corpus)} pseudo masks to {out}")
    return 0


def _cmd_eval(args) -> int:
    merged, paths = _effective_config(args)
    corpus_root = _require(paths, "corpus")
    pred_dir = Path(args.pred)
    corpus = data.load_corpus(corpus_root)
    acc = evaluate.IoUAccumulator(corpus.n_classes)
    for item in corpus:
        if item.mask is None:
            raise trainer.ConfigError(f"corpus image {item.id} has no ground-truth mask")
        pred_path = pred_dir / f"{item.id}.png"
        if not pred_path.is_file():
            raise FileNotFoundError(f"missing prediction mask for id {item.id!r}: {pred_path}")
        acc.add(data.load_mask_png(pred_path), item.mask, item.id)
    table = acc.table()
    print(table.format(corpus.class_names))
    if paths.get("out"):
        out_path = Path(paths["out"])
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(table.to_tsv(corpus.class_names), encoding="utf-8")
    return 0


def _cmd_grad_check(args) -> int:
    import torch

    config = trainer.TrainConfig(seed=args.seed)
    ok = True
    n_params = None
    for dtype, threshold in ((torch.float64, 1e-6), (torch.float32, 1e-3)):
        report = trainer.grad_check(config, epsilon=args.epsilon, dtype=dtype)
        n_params = report.n_params
        for name, err in report.max_rel_err.items():
            status = "ok" if err < threshold else "FAIL"
            ok = ok and err < threshold
            print(f"grad-check {report.dtype} {name}: max_rel_err={err:.3e} (< {threshold:g}) {status}")
    print(f"grad-check trainable parameters: {n_params}")
    return 0 if ok else 2


def run_ablation_cell(
    row_name: str,
    overrides: dict,
    cdr_loss: str,
    base_config: dict,
    seed: int,
    corpus_root: str,
    eval_root: str,
    sp_cache: str,
    out_dir: str,
    t_bg: float,
    n_threads: int,
) -> tuple[str, int, float]:
    """Train one configuration and score pseudo masks; used by ablate workers."""
    os.environ["SSC_NUM_THREADS"] = str(n_threads)
    merged = dict(base_config)
    merged.update(overrides)
    merged["seed"] = seed
    config = trainer.TrainConfig(**merged)
    run_dir = Path(out_dir)
    result = trainer.train(config, corpus_root, run_dir, sp_cache=sp_cache, cdr_loss=cdr_loss)
    write_manifest(run_dir, "train", merged, seed, corpus_root=Path(corpus_root),
                   checkpoint_path=str(result.checkpoint_path))

    eval_corpus = data.load_corpus(eval_root)
    bundle = trainer.build_models(eval_corpus.n_classes, config.seed, cdr_early=config.cdr_early)
    trainer.load_bundle_checkpoint(result.checkpoint_path, bundle)
    bundle.backbone.eval()
    acc = evaluate.IoUAccumulator(eval_corpus.n_classes)
    for item in eval_corpus:
        if item.mask is None:
            raise trainer.ConfigError(f"evaluation corpus image {item.id} lacks a mask")
        cams = evaluate.cams_for_image(bundle.backbone, item.image, item.labels, config.drs_enabled)
        acc.add(evaluate.pseudo_mask(cams, t_bg), item.mask, item.id)
    return row_name, seed, acc.table().miou


def _cmd_ablate(args) -> int:
    merged, paths = _effective_config(args)
    corpus_root = _require(paths, "corpus")
    out = _require(paths, "out")
    eval_root = Path(args.eval_corpus) if args.eval_corpus else corpus_root
    seeds = [int(s) for s in str(args.seeds).split(",") if s != ""]
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    out.mkdir(parents=True, exist_ok=True)

    sp_cache = Path(paths.get("sp_cache") or corpus_root / "superpixels")
    corpus = data.load_corpus(corpus_root)
    missing = [i for i in corpus.ids if not (sp_cache / f"{i}.sps").is_file()]
    if missing:
        sp_cache.mkdir(parents=True, exist_ok=True)
        for item in corpus:
            target = sp_cache / f"{item.id}.sps"
            if not target.is_file():
                superpixel.save_superpixels(target, superpixel.segment_image(item.image))

    rows: list[tuple[str, dict, str]]
    if args.loss_ablation:
        rows = list(LOSS_ABLATION_ROWS)
    else:
        rows = [(name, overrides, "perceptual") for name, overrides in ABLATION_ROWS]

    jobs = max(1, args.jobs)
    cap = int(os.environ.get("SSC_NUM_THREADS", "0")) or os.cpu_count() or 1
    per_worker = max(1, cap // jobs)
    tasks = []
    for name, overrides, cdr_loss in rows:
        for seed in seeds:
            run_dir = out / "runs" / f"{name.replace('/', '_').replace(' ', '_')}_seed{seed}"
            tasks.append(
                (name, overrides, cdr_loss, merged, seed, str(corpus_root), str(eval_root),
                 str(sp_cache), str(run_dir), args.t_bg, per_worker)
            )

    results: dict[tuple[str, int], float] = {}
    if jobs == 1:
        for task in tasks:
            name, seed, miou_value = run_ablation_cell(*task)
            results[(name, seed)] = miou_value
    else:
        import concurrent.futures as futures

        ctx_jobs = min(jobs, len(tasks))
        with futures.ProcessPoolExecutor(max_workers=ctx_jobs) as pool:
            for name, seed, miou_value in pool.map(_ablation_star, tasks):
                results[(name, seed)] = miou_value

    lines = ["row\t" + "\t".join(f"seed{s}" for s in seeds) + "\tmedian"]
    print("%-24s %s %10s" % ("row", " ".join(f"seed{s:>6}" for s in seeds), "median"))
    medians = {}
    for name, _, _ in rows:
        per_seed = [results[(name, s)] for s in seeds]
        med = statistics.median(per_seed)
        medians[name] = med
        lines.append(name + "\t" + "\t".join(f"{v:.6f}" for v in per_seed) + f"\t{med:.6f}")
        print("%-24s %s %10.4f" % (name, " ".join(f"{v:10.4f}" for v in per_seed), med))
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(out, "ablate", {**merged, "seeds": seeds, "t_bg": args.t_bg,
                                   "loss_ablation": bool(args.loss_ablation)},
                   seeds[0], corpus_root=corpus_root)
    print(f"ablation table written to {out / 'ablation.tsv'}")
    return 0


def _ablation_star(task):
    return run_ablation_cell(*task)


# ---------------------------------------------------------------------------
# parser assembly

def build_parser() -> _Parser:
    parser = _Parser(prog="ssc", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic shapes corpus")
    _add_config_arg(p)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("superpix", help="build the superpixel cache for a corpus")
    _add_config_arg(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--sp-cache", dest="sp_cache", type=str, default=None)
    p.add_argument("--render", type=str, default=None, help="directory for boundary overlays")
    p.add_argument("--k", type=float, default=None)
    p.add_argument("--min-size", dest="min_size", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--budget", type=int, default=superpixel.DEFAULT_BUDGET)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_superpix)

    p = sub.add_parser("train", help="train the classifier and decoder")
    _add_config_arg(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--sp-cache", dest="sp_cache", type=str, default=None)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("cam", help="dump CAM files (and optional heatmaps)")
    _add_config_arg(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--sp-cache", dest="sp_cache", type=str, default=None)
    p.add_argument("--heatmaps", action="store_true")
    p.add_argument("--dump-modulation", dest="dump_modulation", action="store_true")
    p.add_argument("--drs-enabled", dest="drs_enabled", action=argparse.BooleanOptionalAction,
                   default=None)
    p.set_defaults(func=_cmd_cam)

    p = sub.add_parser("reconstruct", help="write reconstructed images as PNG")
    _add_config_arg(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--out", type=str, default=None,
                   help="output directory (default: next to the input images)")
    p.add_argument("--ids", type=str, default=None, help="comma-separated image ids")
    p.add_argument("--n", type=int, default=5, help="first N images when --ids is absent")
    p.add_argument("--drs-enabled", dest="drs_enabled", action=argparse.BooleanOptionalAction,
                   default=None)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("pseudo", help="generate pseudo segmentation masks")
    _add_config_arg(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--t-bg", dest="t_bg", type=float, default=evaluate.DEFAULT_T_BG)
    p.add_argument("--drs-enabled", dest="drs_enabled", action=argparse.BooleanOptionalAction,
                   default=None)
    p.set_defaults(func=_cmd_pseudo)

    p = sub.add_parser("eval", help="score a mask directory against corpus ground truth")
    _add_config_arg(p)
    p.add_argument("--pred", type=str, required=True)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--out", type=str, default=None, help="write the table as TSV here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and score the component ablation grid")
    _add_config_arg(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--eval-corpus", dest="eval_corpus", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--sp-cache", dest="sp_cache", type=str, default=None)
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--t-bg", dest="t_bg", type=float, default=evaluate.DEFAULT_T_BG)
    p.add_argument("--loss-ablation", dest="loss_ablation", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of every loss gradient")
    _add_config_arg(p)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    trainer.apply_thread_cap()
    try:
        return args.func(args)
    except (UsageError, trainer.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
