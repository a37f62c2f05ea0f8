"""Segmentation training with early stopping, evaluation and the ablation grid."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import Manifest, augment, read_tensor
from .exceptions import ConfigError, DomainError, ShapeError, TrainingError
from .metrics import MetricsReport, combined_loss, dice_score, one_hot
from .nn import ParamStore, load_checkpoint, save_checkpoint
from .optim import AdamState, adam_update, grads_by_name, poly_lr
from .segnet import DiamantNet, SegNetConfig, SkipSwitches
from .tensor import Tape, backward, no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "train_loss", "val_dice", "lr"]
CHECKPOINT_NAME = "best.dmck"
LOG_NAME = "train_log.csv"
ABLATION_CONFIGS = [
    ("single", "single", "0000"),
    ("dual_0000", "dual", "0000"),
    ("dual_0001", "dual", "0001"),
    ("dual_0111", "dual", "0111"),
    ("dual_1111", "dual", "1111"),
]


@dataclass
class SplitData:
    ids: list
    case_ids: list
    images: np.ndarray      # (n, C, H, W) f32
    attn: np.ndarray        # (n, h, H, W) f32
    labels: np.ndarray      # (n, H, W) i64
    spacing: list

    def __len__(self):
        return len(self.ids)


def load_split(manifest: Manifest, split: str) -> SplitData:
    recs = manifest.split(split)
    if not recs:
        raise ConfigError(f"manifest has no {split!r} records")
    missing = [r.id for r in recs if r.attn is None]
    if missing:
        raise ConfigError(f"{len(missing)} {split} record(s) lack an attention map (first: {missing[0]}); "
                          "run extract-attn or gen-oracle-attn first")
    images = np.stack([read_tensor(manifest.path(r.image)).data for r in recs]).astype(np.float32)
    attn = np.stack([read_tensor(manifest.path(r.attn)).data for r in recs]).astype(np.float32)
    labels = np.stack([read_tensor(manifest.path(r.label)).data for r in recs]).astype(np.int64)
    if images.ndim != 4 or attn.ndim != 4 or labels.ndim != 3:
        raise ShapeError("expected (C,H,W) images, (h,H,W) attention maps and (H,W) labels")
    return SplitData([r.id for r in recs], [r.case_id for r in recs], images, attn, labels,
                     [r.spacing for r in recs])


def net_config(manifest: Manifest, data: SplitData, cfg: TrainConfig) -> SegNetConfig:
    n_classes = int(manifest.meta.get("classes", int(data.labels.max()) + 1))
    heads = data.attn.shape[1]
    if cfg.heads and cfg.heads != heads:
        raise ConfigError(f"config asks for {cfg.heads} heads but the attention maps have {heads}")
    if data.images.shape[-1] != cfg.image_size or data.images.shape[-2] != cfg.image_size:
        raise ConfigError(f"images are {data.images.shape[-2:]} but image_size is {cfg.image_size}")
    return SegNetConfig(data.images.shape[1], heads, n_classes, cfg.base_width, cfg.variant)


def predict_labels(net: DiamantNet, params: ParamStore, images, attn, switches, batch_size: int = 16) -> np.ndarray:
    """Arg-max class maps (n, H, W) in inference mode."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = net.forward(params, images[i:i + batch_size], attn[i:i + batch_size], switches, False)
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out)


def predict_proba(net: DiamantNet, params: ParamStore, images, attn, switches, batch_size: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = net.forward(params, images[i:i + batch_size], attn[i:i + batch_size], switches, False).data
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out)


def mean_foreground_dice(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> float:
    """Mean over images and foreground classes of the per-image dice."""
    scores = [dice_score(p, g, c) for p, g in zip(pred, gt) for c in range(1, n_classes)]
    return float(np.mean(scores))


@dataclass
class TrainResult:
    best_dice: float
    best_epoch: int
    epochs_run: int
    stopped_early: bool
    params: ParamStore
    net_cfg: SegNetConfig
    history: list = field(default_factory=list)
    checkpoint: Path | None = None
    log_path: Path | None = None


def _write_log(path: Path, rows: list[dict]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"epoch": r["epoch"], "train_loss": f"{r['train_loss']:.8f}",
                        "val_dice": "" if r["val_dice"] is None else f"{r['val_dice']:.8f}",
                        "lr": f"{r['lr']:.8e}"})


def train_segmenter(train: SplitData, val: SplitData, net_cfg: SegNetConfig, cfg: TrainConfig,
                    out_dir=None, evaluator=None, header_extra: dict | None = None) -> TrainResult:
    """Core epoch loop.

    Each epoch shuffles with ``rng(seed, epoch)``, augments item i with
    ``rng(seed, epoch, i)``, and takes one Adam step per batch with the
    polynomial learning rate.  Every ``eval_every`` epochs ``evaluator(params)``
    (default: mean foreground val dice) is called; the best parameters are
    kept (and checkpointed before the stopping decision) and training stops
    after ``early_stop_patience`` evaluations without improvement.
    """
    net = DiamantNet(net_cfg)
    params = net.build(cfg.seed)
    switches = SkipSwitches.parse(cfg.switches)
    if evaluator is None:
        def evaluator(p):
            pred = predict_labels(net, p, val.images, val.attn, switches)
            return mean_foreground_dice(pred, val.labels, net_cfg.classes)

    n = len(train)
    per_epoch = n // cfg.batch_size + (1 if n % cfg.batch_size >= 2 else 0)
    if per_epoch == 0:
        raise ConfigError(f"training split has {n} items, fewer than one batch of {cfg.batch_size}")
    total_iters = cfg.max_epochs * per_epoch
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    header = {"kind": "segnet", "architecture": net.describe(), "switches": str(switches),
              "train": cfg.to_dict(), **(header_extra or {})}

    state = AdamState()
    history = []
    best, best_epoch, best_params, stale = -math.inf, -1, params.copy(), 0
    stopped = False
    it = 0
    epoch = 0
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        batches = [b for b in batches if len(b) >= 2]
        epoch_lr = poly_lr(it, total_iters, cfg.lr0, cfg.lr_power)
        losses = []
        for step, idx in enumerate(batches):
            xs, ys, az = [], [], []
            for i in idx:
                x, y, a = train.images[i], train.labels[i], train.attn[i]
                if cfg.augment:
                    x, y, a = augment(x, y, a, [cfg.seed, epoch, int(i)])
                xs.append(x)
                ys.append(y)
                az.append(a)
            lr = poly_lr(it, total_iters, cfg.lr0, cfg.lr_power)
            try:
                with Tape() as tape:
                    logits = net.forward(params, np.stack(xs), np.stack(az), switches, True)
                    loss = combined_loss(logits, one_hot(np.stack(ys), net_cfg.classes))
            except DomainError as e:
                raise TrainingError(f"non-finite values at epoch {epoch}, step {step}: {e}") from e
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = backward(loss, tape)
            adam_update(params, grads_by_name(params, grads), state, lr, cfg.weight_decay)
            losses.append(value)
            it += 1
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": None, "lr": epoch_lr}
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.max_epochs - 1:
            score = float(evaluator(params))
            row["val_dice"] = score
            if score > best:
                best, best_epoch, best_params, stale = score, epoch, params.copy(), 0
                if out_dir is not None:
                    save_checkpoint(out_dir / CHECKPOINT_NAME, best_params,
                                    dict(header, epoch=epoch, val_dice=score))
            else:
                stale += 1
        history.append(row)
        log.info("epoch %d loss %.4f val_dice %s", epoch, row["train_loss"], row["val_dice"])
        if out_dir is not None:
            _write_log(out_dir / LOG_NAME, history)
        if stale >= cfg.early_stop_patience:
            stopped = True
            break

    return TrainResult(best, best_epoch, epoch + 1, stopped, best_params, net_cfg, history,
                       out_dir / CHECKPOINT_NAME if out_dir is not None else None,
                       out_dir / LOG_NAME if out_dir is not None else None)


def seg_train(manifest: Manifest, cfg: TrainConfig, out_dir, evaluator=None) -> TrainResult:
    """Train on the manifest's ``train`` split, select on ``val``; writes
    ``best.dmck`` and ``train_log.csv`` into ``out_dir``."""
    train = load_split(manifest, "train")
    val = load_split(manifest, "val")
    net_cfg = net_config(manifest, train, cfg)
    return train_segmenter(train, val, net_cfg, cfg, out_dir, evaluator,
                           {"classes": net_cfg.classes, "net": net_cfg.to_dict()})


def load_model(path):
    """Returns ``(net, params, switches, header)`` from a segmentation checkpoint."""
    params, header = load_checkpoint(path)
    if header.get("kind") != "segnet":
        raise ConfigError(f"{path} is not a segmentation checkpoint")
    net_cfg = SegNetConfig(**header["architecture"]["config"])
    return DiamantNet(net_cfg), params, SkipSwitches.parse(header["switches"]), header


def evaluate(net: DiamantNet, params: ParamStore, switches, data: SplitData) -> MetricsReport:
    """Per-case report over foreground classes; records sharing a case_id are
    scored as one volume."""
    cfg = net.cfg
    if data.images.shape[1] != cfg.in_channels or data.attn.shape[1] != cfg.heads:
        raise ConfigError(f"checkpoint expects {cfg.in_channels} image and {cfg.heads} attention channels, "
                          f"data has {data.images.shape[1]} and {data.attn.shape[1]}")
    if data.images.shape[-1] % 16 or data.images.shape[-2] % 16:
        raise ConfigError(f"image size {data.images.shape[-2:]} is not divisible by 16")
    if int(data.labels.max()) >= cfg.classes:
        raise ConfigError(f"labels contain class {int(data.labels.max())} but the model has {cfg.classes}")
    pred = predict_labels(net, params, data.images, data.attn, switches)
    report = MetricsReport(classes=list(range(1, cfg.classes)))
    cases: dict = {}
    for i, cid in enumerate(data.case_ids):
        cases.setdefault(cid, []).append(i)
    for cid, idx in cases.items():
        report.add_case(cid, pred[idx], data.labels[idx], data.spacing[idx[0]])
    return report


def seg_eval(manifest: Manifest, split: str, checkpoint, out_csv=None) -> MetricsReport:
    net, params, switches, _ = load_model(checkpoint)
    report = evaluate(net, params, switches, load_split(manifest, split))
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(out_csv)
    return report


def ablation_run(manifest: Manifest, base: TrainConfig, out_csv, work_dir=None, split: str = "test",
                 configs=ABLATION_CONFIGS) -> list[dict]:
    """Train and evaluate every ablation configuration with the same seed and
    budget; write one CSV row per configuration."""
    train = load_split(manifest, "train")
    val = load_split(manifest, "val")
    test = load_split(manifest, split)
    out_csv = Path(out_csv)
    work_dir = Path(work_dir) if work_dir is not None else out_csv.parent / "ablation"
    rows = []
    for name, variant, switches in configs:
        cfg = base.replace(variant=variant, switches=switches)
        net_cfg = net_config(manifest, train, cfg)
        res = train_segmenter(train, val, net_cfg, cfg, work_dir / name,
                              header_extra={"classes": net_cfg.classes, "net": net_cfg.to_dict()})
        report = evaluate(DiamantNet(net_cfg), res.params, switches, test)
        row = {"config": name, "variant": variant, "switches": switches if variant == "dual" else "",
               "seed": cfg.seed, "epochs": res.epochs_run, "best_val_dice": res.best_dice}
        for c, d in zip(report.classes, report.per_class_dice):
            row[f"dice_c{c}"] = d
        row["mean_dice"] = report.mean_dice
        row["mean_hd95"] = report.mean_hd95
        rows.append(row)
        log.info("ablation %s: mean dice %.4f", name, report.mean_dice)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})
    return rows
