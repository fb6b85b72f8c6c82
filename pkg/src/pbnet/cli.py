"""Command-line entry point: ``pbnet <command> [--flags]``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure. Errors
are also printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import data as data_mod
from .config import load_config, parse_override, save_config, tiny_preset
from .exceptions import ConfigError, DataError, PBNetError
from .metrics import aggregate, evaluate_image, rows_from_dicts, rows_to_dicts
from .network import count_macs, count_parameters, load_checkpoint
from .trainer import ABLATION_ROWS, build_model, run_ablation, train_fold
from .visualize import export_attention, overlay, save_png, to_u8

log = logging.getLogger("pbnet")


def _prepare_out(path, overwrite) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(f"output directory {out} is not empty; pass --overwrite to replace its contents")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args):
    overrides = dict(parse_override(s) for s in (getattr(args, "set", None) or []))
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "device", None) is not None:
        overrides["train.device"] = args.device
    if getattr(args, "preset", None) == "tiny":
        if args.config:
            raise ConfigError("--preset and --config are mutually exclusive")
        return tiny_preset(**overrides)
    return load_config(getattr(args, "config", None), overrides)


def _records(manifest, cfg):
    return data_mod.records_from_manifest(manifest, exclude_normal=cfg.data.exclude_normal)


def _normalization(manifest):
    norm = manifest.get("normalization")
    if not norm:
        raise DataError("manifest lacks normalization statistics; re-create it with `pbnet split`")
    return norm


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


# ----------------------------------------------------------------------------- commands


def cmd_phantoms(args):
    out = _prepare_out(args.out, args.overwrite)
    phantoms = data_mod.generate_phantoms(args.count, args.size, args.seed or 0, args.contrast)
    records = data_mod.write_phantoms(phantoms, out)
    print(json.dumps({"written": len(records), "root": str(out)}))


def cmd_scan(args):
    out = _prepare_out(args.out, args.overwrite)
    issues = []
    records = data_mod.scan_dataset(args.root, args.layout, issues)
    counts = {}
    for r in records:
        counts[r.category] = counts.get(r.category, 0) + 1
    _dump(
        {
            "root": args.root,
            "layout": args.layout,
            "counts": counts,
            "records": [
                {"id": r.id, "category": r.category, "mask_count": r.mask_count, "image": r.image_path}
                for r in records
            ],
            "issues": issues,
        },
        out / "scan.json",
    )
    print(json.dumps({"records": len(records), "counts": counts, "issues": len(issues)}))


def cmd_split(args):
    out = _prepare_out(args.out, args.overwrite)
    records = data_mod.scan_dataset(args.root, args.layout)
    seed = args.seed or 0
    assignment = data_mod.kfold_split(records, args.k, seed, stratify=not args.no_stratify)
    norm = data_mod.compute_normalization(records, tuple(args.size))
    manifest = data_mod.build_manifest(
        records, assignment, k=args.k, seed=seed, normalization=norm, root=Path(args.root).resolve(), layout=args.layout
    )
    data_mod.write_manifest(manifest, out / "manifest.json")
    sizes = [sum(1 for v in assignment.values() if v == f) for f in range(args.k)]
    print(json.dumps({"manifest": str(out / "manifest.json"), "fold_sizes": sizes}))


def _train_one(config_dict, manifest_path, fold, out_dir):
    from .config import PBNetConfig

    cfg = PBNetConfig.from_dict(config_dict)
    manifest = data_mod.read_manifest(manifest_path)
    records = _records(manifest, cfg)
    result = train_fold(fold, records, cfg, out_dir, normalization=_normalization(manifest))
    rows = rows_to_dicts(result.rows)
    _dump(rows, Path(out_dir) / "val_rows.json")
    return rows


def cmd_train(args):
    cfg = _config(args)
    out = _prepare_out(args.out, args.overwrite)
    save_config(cfg, out / "config.yaml")
    rows = _train_one(cfg.to_dict(), args.manifest, args.fold, out)
    report = aggregate(rows_from_dicts(rows))
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "summary.json")
    print(json.dumps({"fold": args.fold, "val_dice": report.pooled["dice"]["mean"]}))


def cmd_cv(args):
    cfg = _config(args)
    out = _prepare_out(args.out, args.overwrite)
    save_config(cfg, out / "config.yaml")
    manifest = data_mod.read_manifest(args.manifest)
    k = args.k or manifest["k"]
    folds = list(range(k))
    jobs = [(cfg.to_dict(), args.manifest, f, out / f"fold_{f}") for f in folds]
    if args.parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=args.parallel_folds) as pool:
            results = list(pool.map(_train_one, *zip(*jobs)))
    else:
        results = [_train_one(*job) for job in jobs]
    report = aggregate(rows_from_dicts([r for rows in results for r in rows]))
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "summary.json")
    print(json.dumps({"folds": k, "dice": report.across_folds["dice"]}))


def cmd_eval(args):
    out = _prepare_out(args.out, args.overwrite)
    model, cfg, meta = load_checkpoint(args.checkpoint)
    manifest = data_mod.read_manifest(args.manifest)
    records = [r for r in _records(manifest, cfg) if args.fold is None or r.fold == args.fold]
    if not records:
        raise DataError(f"no records for fold {args.fold}")
    norm = (meta.get("extra") or {}).get("normalization") or _normalization(manifest)
    threshold = args.threshold if args.threshold is not None else cfg.data.threshold
    rows = []
    model.eval()
    for r in records:
        x, y = data_mod.preprocess(r, cfg.data.image_size, norm)
        with torch.no_grad():
            p = model(x[None]).p0[0, 0].numpy()
        rows.append(evaluate_image(p, y[0].numpy(), id=r.id, fold=r.fold, threshold=threshold))
    report = aggregate(rows)
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "summary.json")
    print(json.dumps({"images": len(rows), "dice": report.pooled["dice"]}))


def _image_paths(path: Path):
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in data_mod.IMAGE_SUFFIXES)
    if not path.exists():
        raise DataError(f"input not found: {path}")
    return [path]


def _pad_to(x: torch.Tensor, factor=32):
    h, w = x.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if not (ph or pw):
        return x, (0, 0)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x[None], (0, pw, 0, ph), mode=mode)[0], (ph, pw)


def cmd_infer(args):
    out = _prepare_out(args.out, args.overwrite)
    model, cfg, meta = load_checkpoint(args.checkpoint)
    norm = (meta.get("extra") or {}).get("normalization")
    if not norm:
        raise ConfigError("checkpoint carries no normalization statistics")
    threshold = args.threshold if args.threshold is not None else cfg.data.threshold
    mask_dir = Path(args.masks) if args.masks else None
    report = {}
    for path in _image_paths(Path(args.input)):
        image = data_mod.load_image(path)
        x = torch.from_numpy(data_mod.normalize(image, norm["mean"], norm["std"]))
        x, (ph, pw) = _pad_to(x)
        with torch.no_grad():
            prob = model(x[None]).p0[0, 0].numpy()
        prob = prob[: image.shape[0], : image.shape[1]]
        pred = prob >= threshold
        stem = path.stem
        save_png(pred.astype(np.uint8) * 255, out / f"{stem}_pred.png")
        save_png(to_u8(prob), out / f"{stem}_prob.png")
        entry = {"source": str(path), "padded": [ph, pw], "size": list(image.shape[:2])}
        if mask_dir is not None:
            mask_path = mask_dir / path.name
            if mask_path.exists():
                gt = data_mod.load_mask([mask_path]).astype(bool)
                save_png(overlay(image, pred, gt), out / f"{stem}_overlay.png")
                m = evaluate_image(prob, gt.astype(np.float32), id=stem, threshold=threshold)
                entry["dice"] = m.dice
        report[stem] = entry
    _dump(report, out / "inference.json")
    print(json.dumps({"images": len(report)}))


def cmd_visualize(args):
    out = _prepare_out(args.out, args.overwrite)
    model, cfg, meta = load_checkpoint(args.checkpoint)
    norm = (meta.get("extra") or {}).get("normalization")
    if not norm:
        raise ConfigError("checkpoint carries no normalization statistics")
    image = data_mod.load_image(args.image)
    mask = data_mod.load_mask([args.mask]) if args.mask else np.zeros(image.shape[:2], np.uint8)
    image, mask = data_mod.resize_pair(image, mask, cfg.data.image_size)
    x = torch.from_numpy(data_mod.normalize(image, norm["mean"], norm["std"]))
    files = export_attention(model, x, out, Path(args.image).stem, mask if args.mask else None)
    print(json.dumps({str(l): {k: str(v) for k, v in f.items()} for l, f in files.items()}))


def cmd_ablate(args):
    cfg = _config(args)
    out = _prepare_out(args.out, args.overwrite)
    rows = {name: ABLATION_ROWS[name] for name in (args.rows.split(",") if args.rows else ABLATION_ROWS)}
    if args.manifest:
        manifest = data_mod.read_manifest(args.manifest)
        records = _records(manifest, cfg)
        norm = _normalization(manifest)
        train = [r for r in records if r.fold != args.fold]
        val = [r for r in records if r.fold == args.fold]
        size = cfg.data.image_size
        train_ds = data_mod.SegmentationDataset.from_records(train, size, norm, cfg.data.augment, cfg.train.seed)
        val_ds = data_mod.SegmentationDataset.from_records(val, size, norm)
    else:
        phantoms = data_mod.generate_phantoms(args.phantoms, cfg.data.image_size[0], cfg.train.seed)
        train_ds = data_mod.SegmentationDataset.from_phantoms(phantoms)
        val_ds = None
    table = run_ablation(cfg, train_ds, val_ds, rows=rows, out_dir=out)
    cols = ("name", "mgpm", "bgm", "bs", "params", "macs", "dice", "jac", "sen", "spe", "hd", "hd95")
    lines = ["\t".join(cols)] + ["\t".join(str(e[c]) for c in cols) for e in table]
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_info(args):
    cfg = _config(args)
    size = tuple(args.size) if args.size else cfg.data.image_size
    model = build_model(cfg)
    info = {
        "variant": cfg.backbone.variant,
        "flags": cfg.ablation_flags,
        "input_size": list(size),
        "params": count_parameters(model),
        "macs": count_macs(model, size),
    }
    print(json.dumps(info))


# ----------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbnet", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help, out=True, config=False):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=fn)
        if out:
            p.add_argument("--out", required=True)
            p.add_argument("--overwrite", action="store_true")
        if config:
            p.add_argument("--config")
            p.add_argument("--preset", choices=("default", "tiny"), default="default")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
            p.add_argument("--device")
        p.add_argument("--seed", type=int)
        return p

    p = add("phantoms", cmd_phantoms, "write synthetic phantom images and masks")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--contrast", type=float, nargs=2, default=(0.35, 0.7))

    p = add("scan", cmd_scan, "list image/mask pairs and report pairing problems")
    p.add_argument("--root", required=True)
    p.add_argument("--layout", choices=("busi", "generic"), default="busi")

    p = add("split", cmd_split, "assign k folds and write the split manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--layout", choices=("busi", "generic"), default="busi")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--size", type=int, nargs=2, default=(256, 256), metavar=("H", "W"))
    p.add_argument("--no-stratify", action="store_true")

    p = add("train", cmd_train, "train one fold", config=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, default=0)

    p = add("cv", cmd_cv, "k-fold cross-validation", config=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--parallel-folds", type=int, default=1)

    p = add("eval", cmd_eval, "evaluate a checkpoint on a fold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int)
    p.add_argument("--threshold", type=float)

    p = add("infer", cmd_infer, "predict masks for an image or a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--masks", help="directory of ground-truth masks (same file names) for overlays")
    p.add_argument("--threshold", type=float)

    p = add("visualize", cmd_visualize, "export attention and boundary maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask")

    p = add("ablate", cmd_ablate, "train/evaluate the module ablation rows", config=True)
    p.add_argument("--manifest")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--phantoms", type=int, default=8, help="synthetic training set size without --manifest")
    p.add_argument("--rows", help=f"comma-separated subset of {','.join(ABLATION_ROWS)}")

    p = add("info", cmd_info, "print parameter and MAC counts", out=False, config=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except PBNetError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
