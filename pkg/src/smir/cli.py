"""Command-line entry point: ``smir <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError
from .data import (
    DatasetManifest,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    read_image,
    read_label,
    tile_image,
    write_image,
    write_label,
)
from .masking import apply_mask, random_mask, selective_mask_image
from .patches import make_grid
from .pretrain import run_pretraining, validate_reconstruction
from .rng import stream
from .segmentation import SegReport, compare_runs, iou_report, lowest_k, train_downstream
from .unet import build_unet, transfer_weights

log = logging.getLogger("smir")

PANEL_SEP = 4
METHOD_ORDER = ("selective", "random", "scratch")
MISSING = "—"


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS))
    p.add_argument("--config", help="flat JSON object of overrides")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=out_required)


def _flat_config(args) -> dict:
    flat = cfgmod.resolve(args.preset, args.config, cfgmod.parse_overrides(args.set))
    if args.seed is not None:
        flat["seed"] = args.seed
    if getattr(args, "masking", None):
        flat["masking_mode"] = args.masking
    return flat


def _read_manifest(path) -> DatasetManifest:
    try:
        return DatasetManifest.read(path)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from e


def _dataset_name(manifest: DatasetManifest) -> str:
    return manifest.extra.get("name") or manifest.root.name


# -- synth / tile -----------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(count=args.count, size=args.size, num_classes=args.classes,
                     textured=not args.no_texture, seed=args.seed or 0)
    manifest = generate_synthetic(spec, args.out, split=args.split)
    print(f"wrote {len(manifest.entries)} images and {Path(args.out) / 'manifest.txt'}")
    return 0


def cmd_tile(args) -> int:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    big = read_image(args.image)
    tiles = tile_image(big, args.tile)
    label_tiles = None
    if args.label:
        lbl = read_label(args.label)
        if lbl.shape != big.shape[:2]:
            raise ConfigError(f"label {args.label} and image {args.image} differ in size")
        label_tiles = tile_image(lbl, args.tile)
        (out / "labels").mkdir(exist_ok=True)
    entries = []
    for i, t in enumerate(tiles):
        name = f"tile_{i:06d}.png"
        write_image(out / "images" / name, t)
        if label_tiles is not None:
            write_label(out / "labels" / name, label_tiles[i])
        entries.append((f"images/{name}", None if label_tiles is None else f"labels/{name}"))
    DatasetManifest(out, entries, split=args.split, num_classes=args.classes, tile_size=args.tile,
                    extra={"source": Path(args.image).name}).write(out / "manifest.txt")
    print(f"wrote {len(tiles)} tiles of {args.tile}x{args.tile} to {out}")
    return 0


# -- pretrain ---------------------------------------------------------------

def cmd_pretrain(args) -> int:
    flat = _flat_config(args)
    config = cfgmod.pretrain_config(flat)
    manifest = _read_manifest(args.manifest)
    data = load_dataset(manifest)
    out = Path(args.out)
    result = run_pretraining(config, data.ids, data.images, out_dir=out, resume=not args.no_resume)
    log_path = out / "pretrain_log.json"
    doc = json.loads(log_path.read_text())
    doc.update({"dataset": _dataset_name(manifest), "manifest": str(Path(args.manifest).resolve()),
                "preset": args.preset, "flat_config": flat})
    if args.val_manifest:
        held = load_dataset(_read_manifest(args.val_manifest)).images
        final = result.final.model()
        val = {mode: validate_reconstruction(final, held, mode, config) for mode in ("selective", "random")}
        doc["validation"] = {"heldout_images": len(held), "loss_selective_masks": val["selective"],
                             "loss_random_masks": val["random"]}
        print(f"validation loss: selective masks {val['selective']:.4f}, random masks {val['random']:.4f}")
    log_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"{config.masking_mode} pretraining: {config.num_partitions} partitions, final checkpoint "
          f"{result.checkpoint_hashes[-1][:12]} in {out}")
    return 0


# -- downstream -------------------------------------------------------------

def _split_holdout(data, seed: int, frac: float = 0.2):
    order = stream(seed, "holdout").permutation(len(data))
    n_val = max(1, int(round(frac * len(data))))
    val_ids = [data.ids[i] for i in sorted(order[:n_val])]
    train_ids = [data.ids[i] for i in sorted(order[n_val:])]
    return data.subset(train_ids), data.subset(val_ids)


def _check_transfer(source, target, seed: int) -> None:
    """Pre-head activations of source and target must agree bitwise."""
    rng = stream(seed, "transfer-check")
    side = 2 ** source.config.depth * 2
    x = rng.random((2, source.config.in_channels, side, side)).astype(source.dtype)
    with ad.no_grad():
        a, b = source.features(x).data, target.features(x).data
    if not np.array_equal(a, b):
        raise RuntimeError("transfer invariant violated: pre-head activations differ")
    copied = len(target.params) - 2
    log.info("transfer invariant verified: %d tensors copied, head re-initialized, pre-head activations identical", copied)


def cmd_downstream(args) -> int:
    flat = _flat_config(args)
    base = cfgmod.pretrain_config(flat)
    dcfg = cfgmod.downstream_config(flat)
    manifest = _read_manifest(args.manifest)
    if manifest.num_classes < 2:
        raise ConfigError(f"{args.manifest}: num_classes must be >= 2 for segmentation")
    data = load_dataset(manifest)
    if data.labels is None:
        raise ConfigError(f"{args.manifest}: every entry needs a label path")
    if args.val_manifest:
        train, val = data, load_dataset(_read_manifest(args.val_manifest))
        if val.labels is None:
            raise ConfigError(f"{args.val_manifest}: every entry needs a label path")
    else:
        train, val = _split_holdout(data, base.seed)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    num_classes = manifest.num_classes
    names = manifest.extra.get("class_names")
    class_names = names.split(",") if names else [f"class_{i}" for i in range(num_classes)]
    if len(class_names) != num_classes:
        raise ConfigError(f"{len(class_names)} class names for {num_classes} classes")

    source, method, init_digest = None, "scratch", None
    if args.init:
        ckpt = load_checkpoint(args.init)
        if ckpt.head != "reconstruction":
            raise ConfigError(f"--init needs a reconstruction checkpoint; {args.init} has a {ckpt.head} head")
        source, init_digest = ckpt.model(), ckpt.digest()
        method = ckpt.meta.get("masking_mode", "pretrained")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, runs = [], []
    for seed in seeds:
        if source is not None:
            model = transfer_weights(source, source.config.for_segmentation(num_classes, seed=seed))
            _check_transfer(source, model, seed)
        else:
            model = build_unet(base.model.for_segmentation(num_classes, seed=seed))
        best, history = train_downstream(model, train.images, train.labels, val.images, val.labels, dcfg, seed=seed)
        digest = save_checkpoint(best, out / f"segmentation_seed{seed}.smir")
        report = iou_report(best.model(), val.images, val.labels, num_classes, dcfg.ignore_index, class_names, seed)
        report.write(out / f"report_seed{seed}.csv")
        reports.append(report)
        runs.append({"seed": seed, "checkpoint": digest, "best_epoch": history.best_epoch,
                     "train_loss": history.train_loss, "val_miou": history.val_miou, "miou": report.miou})
        print(f"seed {seed}: mIoU {report.miou:.4f} (foreground {report.miou_foreground:.4f})")
    mean = compare_runs(reports)
    mean.write(out / "report_mean.csv")
    doc = {
        "command": "downstream", "dataset": _dataset_name(manifest), "method": method,
        "manifest": str(Path(args.manifest).resolve()), "init_checkpoint": args.init, "init_digest": init_digest,
        "preset": args.preset, "flat_config": flat, "seeds": seeds, "runs": runs,
        "train_images": len(train), "val_images": len(val), "mean_report": "report_mean.csv",
    }
    (out / "downstream_log.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"{method}: mean mIoU over {len(seeds)} seed(s) {mean.miou:.4f}")
    return 0


# -- preview ----------------------------------------------------------------

def preview_panel(model, image: np.ndarray, config, seed: int) -> np.ndarray:
    """original | random-masked | reconstruction | selective-masked | reconstruction."""
    h, w = image.shape[:2]
    grid = make_grid(h, w, config.target_patches)
    rng = stream(seed, "preview")
    rand = apply_mask(image, random_mask(grid, config.mask_ratio, rng), config.fill)
    _, sel = selective_mask_image(model.reconstruct, image, grid, rng, k=config.samples_per_image,
                                  ratio=config.mask_ratio, fill=config.fill, paired=config.paired_samples)
    recon = model.reconstruct(np.stack([rand, sel]))
    cells = [image, rand, recon[0], sel, recon[1]]
    panel = np.ones((h, 5 * w + 4 * PANEL_SEP, 3))
    for i, c in enumerate(cells):
        x0 = i * (w + PANEL_SEP)
        panel[:, x0:x0 + w] = np.clip(c, 0.0, 1.0)
    return panel


def cmd_preview(args) -> int:
    flat = _flat_config(args)
    config = cfgmod.pretrain_config(flat)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.head != "reconstruction":
        raise ConfigError(f"preview requires a reconstruction head; {args.checkpoint} has a {ckpt.head} head")
    image = read_image(args.image)
    panel = preview_panel(ckpt.model(), image, config, config.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, panel)
    print(f"wrote {panel.shape[1]}x{panel.shape[0]} panel to {out}")
    return 0


# -- report -----------------------------------------------------------------

def _method_key(m: str):
    return (METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER), m)


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "| " + " | ".join(c.ljust(wd) for c, wd in zip(r, widths)) + " |"
    sep = "|" + "|".join("-" * (wd + 2) for wd in widths) + "|"
    return "\n".join([fmt(header), sep] + [fmt(r) for r in rows])


def build_report(run_dirs, k: int = 6) -> str:
    seg: dict[tuple[str, str], SegReport | None] = {}
    recon: list[tuple[str, str, dict]] = []
    for d in map(Path, run_dirs):
        if (d / "downstream_log.json").is_file():
            doc = json.loads((d / "downstream_log.json").read_text())
            path = d / doc.get("mean_report", "report_mean.csv")
            seg[(doc["dataset"], doc["method"])] = SegReport.read(path) if path.is_file() else None
        elif (d / "pretrain_log.json").is_file():
            doc = json.loads((d / "pretrain_log.json").read_text())
            recon.append((doc.get("dataset", d.name), doc.get("masking_mode", "?"), doc.get("validation", {})))
        else:
            log.warning("%s holds no run log; skipped", d)
    parts = []
    if seg:
        datasets = sorted({ds for ds, _ in seg})
        methods = sorted({m for _, m in seg}, key=_method_key)
        rows = []
        for ds in datasets:
            cells = [ds]
            for m in methods:
                r = seg.get((ds, m))
                cells.append(MISSING if r is None else f"{r.miou:.3f}")
            rows.append(cells)
        parts.append("Downstream mIoU\n\n" + _table(["dataset"] + methods, rows))
        for ds in datasets:
            avail = [m for m in methods if seg.get((ds, m)) is not None]
            if not avail:
                continue
            ref = seg[(ds, avail[0])]
            kk = min(k, int(np.sum(~np.isnan(ref.iou))))
            rows = []
            for c in lowest_k(ref, kk):
                cells = [ref.class_names[c]]
                for m in methods:
                    r = seg.get((ds, m))
                    cells.append(MISSING if r is None or np.isnan(r.iou[c]) else f"{r.iou[c]:.3f}")
                rows.append(cells)
            parts.append(f"Lowest {kk} classes on {ds} (ranked by {avail[0]})\n\n"
                         + _table(["class"] + methods, rows))
    if recon:
        rows = []
        for ds, mode, val in sorted(recon):
            fmt = lambda key: f"{val[key]:.3f}" if key in val else MISSING
            rows.append([ds, mode, fmt("loss_selective_masks"), fmt("loss_random_masks")])
        parts.append("Validation reconstruction loss, final partition\n\n"
                     + _table(["dataset", "pretraining", "selective masks", "random masks"], rows))
    return "\n\n".join(parts) + "\n" if parts else "no runs found\n"


def cmd_report(args) -> int:
    text = build_report(args.runs, args.k)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# -- entry ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smir", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=160)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="pretrain")
    p.add_argument("--no-texture", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="cut a large image (and label) into square tiles")
    p.add_argument("--image", required=True)
    p.add_argument("--label")
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--classes", type=int, default=0)
    p.add_argument("--split", default="pretrain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("pretrain", help="partitioned masked-reconstruction pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masking", choices=("selective", "random"))
    p.add_argument("--val-manifest", help="held-out images for the reconstruction-loss comparison")
    p.add_argument("--no-resume", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("downstream", help="segmentation training from a checkpoint or from scratch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--init", help="reconstruction checkpoint to transfer from")
    g.add_argument("--scratch", action="store_true")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1234,3741")
    _add_common(p)
    p.set_defaults(func=cmd_downstream)

    p = sub.add_parser("preview", help="random vs selective masking panel for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_preview)

    p = sub.add_parser("report", help="summary tables over run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"smir: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"smir: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
