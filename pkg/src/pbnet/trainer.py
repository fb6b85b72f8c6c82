"""Training loop, poly schedule, cross-validation and ablation runner."""

from __future__ import annotations

import hashlib
import json
import logging
import random
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import PBNetConfig
from .data import SampleRecord, SegmentationDataset, compute_normalization
from .exceptions import ConfigError, DataError, NumericError
from .losses import total_loss
from .metrics import MetricReport, aggregate, evaluate_image
from .network import PBNet, count_macs, count_parameters, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

ABLATION_ROWS = {
    "baseline": {"mgpm": False, "bgm": False, "bs": False},
    "mgpm": {"mgpm": True, "bgm": False, "bs": False},
    "bgm": {"mgpm": False, "bgm": True, "bs": False},
    "bgm+bs": {"mgpm": False, "bgm": True, "bs": True},
    "full": {"mgpm": True, "bgm": True, "bs": True},
}


def poly_lr(t: float, base_lr: float = 1e-3, power: float = 0.9) -> float:
    """``base_lr * (1 - t) ** power`` for training progress ``t`` in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        warnings.warn(f"schedule progress {t} outside [0, 1]; clamping", stacklevel=2)
        t = min(max(t, 0.0), 1.0)
    return base_lr * (1.0 - t) ** power


def seed_everything(seed: int, deterministic: bool = True):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.deterministic = deterministic
        torch.backends.cudnn.benchmark = not deterministic


def build_model(cfg: PBNetConfig) -> PBNet:
    """Seeded construction so identical configs give identical initial weights."""
    seed_everything(cfg.train.seed, cfg.train.deterministic)
    return PBNet.from_config(cfg).to(cfg.train.device)


def ablation_config(cfg: PBNetConfig, flags: dict) -> PBNetConfig:
    unknown = set(flags) - {"mgpm", "bgm", "bs"}
    if unknown:
        raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
    return cfg.replace(
        **{
            "mgpm.enabled": bool(flags.get("mgpm", True)),
            "bgm.enabled": bool(flags.get("bgm", True)),
            "loss.boundary": bool(flags.get("bs", True)),
        }
    )


@dataclass
class RunLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "meta", **self.meta}, sort_keys=True) + "\n")
            for s in self.steps:
                fh.write(json.dumps({"kind": "step", **s}, sort_keys=True) + "\n")
            for e in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **e}, sort_keys=True) + "\n")

    @property
    def losses(self):
        return [s["total"] for s in self.steps]


class _Indexed(torch.utils.data.Dataset):
    def __init__(self, ds):
        self.ds = ds

    def __len__(self):
        return len(self.ds)

    def __getitem__(self, i):
        x, y = self.ds[i]
        return x, y, i


def _batch_hash(x):
    return hashlib.sha256(x.detach().cpu().numpy().tobytes()).hexdigest()[:16]


def predict_proba(model: PBNet, images: torch.Tensor, batch_size=8, device="cpu") -> np.ndarray:
    """Full-resolution foreground probabilities ``(N, H, W)`` in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(images[i : i + batch_size].to(device)).p0[:, 0].cpu().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,) + tuple(images.shape[-2:]), np.float32)


def evaluate(model: PBNet, dataset: SegmentationDataset, *, fold=0, threshold=0.5, batch_size=8, device="cpu"):
    """Per-image metric rows on un-augmented samples."""
    saved, dataset.policy = dataset.policy, None
    try:
        xs, ys = zip(*(dataset[i] for i in range(len(dataset))))
    finally:
        dataset.policy = saved
    probs = predict_proba(model, torch.stack(xs), batch_size, device)
    return [
        evaluate_image(p, y[0].numpy(), id=dataset.ids[i], fold=fold, threshold=threshold)
        for i, (p, y) in enumerate(zip(probs, ys))
    ]


def _mean_dice(rows):
    return float(np.mean([r.dice for r in rows])) if rows else float("nan")


def fit(
    model: PBNet,
    train_ds,
    cfg: PBNetConfig,
    *,
    val_ds=None,
    out_dir=None,
    fold=None,
    extra_meta=None,
    checkpoint_extra=None,
) -> RunLog:
    """Optimize ``model`` on ``train_ds`` with AdamW and the poly schedule.

    With ``out_dir``, writes ``last.pt`` and (when ``val_ds`` is given)
    ``best.pt`` selected by mean validation Dice, plus ``log.jsonl``.
    """
    tc = cfg.train
    device = tc.device
    if len(train_ds) == 0:
        raise DataError("training set is empty")
    seed_everything(tc.seed, tc.deterministic)
    generator = torch.Generator().manual_seed(tc.seed)
    loader = torch.utils.data.DataLoader(
        _Indexed(train_ds),
        batch_size=tc.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=tc.num_workers,
    )
    steps_per_epoch = len(loader) if tc.steps_per_epoch is None else min(tc.steps_per_epoch, len(loader))
    total_steps = tc.epochs * steps_per_epoch
    params = [p for p in model.parameters() if p.requires_grad]
    if tc.optimizer == "adamw":
        opt = torch.optim.AdamW(params, lr=tc.base_lr, betas=tc.betas, weight_decay=tc.weight_decay)
    elif tc.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=tc.base_lr, betas=tc.betas, weight_decay=tc.weight_decay)
    else:
        opt = torch.optim.SGD(params, lr=tc.base_lr, momentum=tc.betas[0], weight_decay=tc.weight_decay)

    run = RunLog(meta={"fold": fold, "flags": cfg.ablation_flags, "total_steps": total_steps, **(extra_meta or {})})
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    best_dice = -1.0
    step = 0
    started = time.perf_counter()
    for epoch in range(tc.epochs):
        if hasattr(train_ds, "set_epoch"):
            train_ds.set_epoch(epoch)
        if tc.schedule == "epoch":
            _set_lr(opt, poly_lr(epoch / tc.epochs, tc.base_lr, tc.poly_power))
        model.train()
        epoch_losses = []
        for b, (x, y, idx) in enumerate(loader):
            if b >= steps_per_epoch:
                break
            if tc.schedule == "step":
                _set_lr(opt, poly_lr(step / total_steps, tc.base_lr, tc.poly_power))
            x, y = x.to(device), y.to(device)
            outputs = model(x)
            lr = opt.param_groups[0]["lr"]
            bundle = None
            try:
                bundle = total_loss(outputs, y, cfg.loss, deep=model.use_bgm)
                if not torch.isfinite(bundle.total):
                    raise NumericError("non-finite loss")
            except NumericError as exc:
                _dump_nan(out_dir, x, step, lr, bundle)
                raise NumericError(f"{exc} at step {step} (lr={lr}, inputs={_batch_hash(x)})") from exc
            opt.zero_grad(set_to_none=True)
            bundle.total.backward()
            opt.step()
            record = {"step": step, "epoch": epoch, "lr": lr, "batch": idx.tolist()}
            record.update(bundle.as_floats())
            run.steps.append(record)
            epoch_losses.append(record["total"])
            step += 1
        summary = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses))}
        if val_ds is not None:
            rows = evaluate(model, val_ds, fold=fold or 0, threshold=cfg.data.threshold, device=device)
            summary["val_dice"] = _mean_dice(rows)
            if out_dir is not None and summary["val_dice"] > best_dice:
                best_dice = summary["val_dice"]
                save_checkpoint(
                    out_dir / "best.pt",
                    model,
                    cfg,
                    fold=fold,
                    epoch=epoch,
                    metrics={"val_dice": best_dice},
                    extra=checkpoint_extra,
                )
        run.epochs.append(summary)
        log.info("epoch %d: %s", epoch, summary)
    run.wall_clock = time.perf_counter() - started
    if out_dir is not None:
        metrics = {"train_loss": run.epochs[-1]["train_loss"]}
        if "val_dice" in run.epochs[-1]:
            metrics["val_dice"] = run.epochs[-1]["val_dice"]
        save_checkpoint(
            out_dir / "last.pt", model, cfg, fold=fold, epoch=tc.epochs - 1, metrics=metrics, extra=checkpoint_extra
        )
        run.write_jsonl(out_dir / "log.jsonl")
    return run


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _dump_nan(out_dir, x, step, lr, bundle):
    if out_dir is None:
        return
    terms = bundle.as_floats() if bundle is not None else None
    info = {"step": step, "lr": lr, "inputs_sha256": _batch_hash(x), "terms": terms}
    (Path(out_dir) / "nan_dump.json").write_text(json.dumps(info, indent=2, default=str))


# ----------------------------------------------------------------------------- folds


@dataclass
class FoldResult:
    fold: int
    rows: list
    log: RunLog
    best: Path | None = None
    last: Path | None = None


def split_by_fold(records, fold):
    train = [r for r in records if r.fold != fold]
    val = [r for r in records if r.fold == fold]
    if not val:
        raise DataError(f"fold {fold} has no records")
    leaked = {r.id for r in train} & {r.id for r in val}
    if leaked:
        raise DataError(f"validation ids leak into training: {sorted(leaked)[:5]}")
    return train, val


def train_fold(fold: int, records: list[SampleRecord], cfg: PBNetConfig, out_dir, normalization=None) -> FoldResult:
    """Train on all folds but ``fold`` and evaluate the best checkpoint on ``fold``."""
    train_recs, val_recs = split_by_fold(records, fold)
    size = cfg.data.image_size
    norm = normalization or compute_normalization(train_recs, size)
    train_ds = SegmentationDataset.from_records(train_recs, size, norm, cfg.data.augment, cfg.train.seed)
    val_ds = SegmentationDataset.from_records(val_recs, size, norm)
    out_dir = Path(out_dir)
    model = build_model(cfg)
    run = fit(
        model,
        train_ds,
        cfg,
        val_ds=val_ds,
        out_dir=out_dir,
        fold=fold,
        extra_meta={"train_ids": len(train_recs), "val_ids": len(val_recs), "normalization": norm},
        checkpoint_extra={"normalization": norm},
    )
    best = out_dir / "best.pt"
    best_model = load_checkpoint(best)[0].to(cfg.train.device) if best.exists() else model
    rows = evaluate(best_model, val_ds, fold=fold, threshold=cfg.data.threshold, device=cfg.train.device)
    return FoldResult(fold, rows, run, best if best.exists() else None, out_dir / "last.pt")


def run_cross_validation(cfg: PBNetConfig, records: list[SampleRecord], out_dir, k=5, folds=None) -> MetricReport:
    """Train/evaluate one model per fold and aggregate the held-out metrics."""
    present = {r.fold for r in records}
    if None in present:
        raise DataError("every record needs a fold assignment before cross-validation")
    folds = list(range(k)) if folds is None else list(folds)
    missing = [f for f in folds if f not in present]
    if missing:
        raise DataError(f"folds {missing} have no records")
    out_dir = Path(out_dir)
    rows = []
    for f in folds:
        rows.extend(train_fold(f, records, cfg, out_dir / f"fold_{f}").rows)
    report = aggregate(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "metrics.csv")
    report.write_json(out_dir / "summary.json")
    return report


# ----------------------------------------------------------------------------- ablation


def run_ablation(cfg: PBNetConfig, train_ds, val_ds=None, *, rows=None, out_dir=None) -> list[dict]:
    """Train and evaluate each ablation configuration under identical data and seed.

    ``rows`` maps a row name to ``{"mgpm", "bgm", "bs"}`` flags (default:
    the five standard rows). Each result row carries parameter and MAC
    counts plus mean metrics on ``val_ds`` (or the training set).
    """
    rows = ABLATION_ROWS if rows is None else rows
    configs = {name: ablation_config(cfg, flags) for name, flags in rows.items()}
    eval_ds = val_ds if val_ds is not None else train_ds
    table = []
    for name, row_cfg in configs.items():
        model = build_model(row_cfg)
        params = count_parameters(model)
        macs = count_macs(model, row_cfg.data.image_size)
        run = fit(
            model,
            train_ds,
            row_cfg,
            out_dir=None if out_dir is None else Path(out_dir) / name,
        )
        report = aggregate(evaluate(model, eval_ds, threshold=row_cfg.data.threshold, device=row_cfg.train.device))
        entry = {"name": name, **row_cfg.ablation_flags, "params": params, "macs": macs}
        entry.update({m: report.pooled[m]["mean"] for m in report.pooled})
        entry["batches"] = [s["batch"] for s in run.steps]
        table.append(entry)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        slim = [{k: v for k, v in e.items() if k != "batches"} for e in table]
        (Path(out_dir) / "ablation.json").write_text(json.dumps(slim, indent=2))
    return table
