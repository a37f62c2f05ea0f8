"""Command-line entry point: ``diamant <command> [options]``.

Every command accepts ``--config FILE`` of ``key = value`` lines; explicit
flags override file values.  Exit status: 0 success, 1 configuration error,
2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import TrainConfig, build_dataclass, read_config
from .data import gen_synthetic_dataset, load_manifest, read_tensor, write_oracle_attention
from .dino import DistillConfig, dino_train
from .exceptions import ConfigError, DataIOError, DiamantError
from .metrics import count_macs
from .nn import load_checkpoint, save_checkpoint
from .segnet import DiamantNet, SegNetConfig
from .tensor import Tensor, ops
from .training import ablation_run, seg_eval, seg_train
from .vit import ViTConfig, batch_extract

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("diamant")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def _merge(args, keys, file_values: dict | None = None) -> dict:
    """Config-file values overlaid with any flag the user actually gave."""
    values = dict(file_values or {})
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    return values


def _file_values(args) -> dict:
    return read_config(args.config) if getattr(args, "config", None) else {}


def _manifest(args, flag: str = "--manifest"):
    path = getattr(args, _dest(flag))
    if path is None:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise ConfigError(f"{flag}: manifest not found: {path}")
    return load_manifest(p)


def _add_dataclass_flags(p, cls, skip=()):
    for f in fields(cls):
        if f.name in skip:
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                       help=f"overrides '{f.name}' (default {f.default})")


# ------------------------------------------------------------------ commands

GEN_KEYS = {"seed": int, "n": int, "size": int, "classes": int, "noise": float, "fractions": str}


def cmd_gen_data(args):
    values = _merge(args, GEN_KEYS, _file_values(args))
    unknown = set(values) - set(GEN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(sorted(unknown))}; "
                          f"valid keys: {', '.join(sorted(GEN_KEYS))}")
    try:
        v = {k: GEN_KEYS[k](x) for k, x in values.items()}
        fractions = tuple(float(s) for s in v.get("fractions", "0.7,0.1,0.2").split(","))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError("fractions must be three numbers summing to 1")
    if args.out is None:
        raise ConfigError("--out is required")
    m = gen_synthetic_dataset(v.get("seed", 0), v.get("n", 100), v.get("size", 64), v.get("classes", 4),
                              args.out, fractions=fractions, **({"noise": v["noise"]} if "noise" in v else {}))
    print(f"wrote {len(m.records)} samples to {args.out}")


ORACLE_KEYS = {"heads": int, "sigma": float, "seed": int}


def cmd_gen_oracle_attn(args):
    values = _merge(args, ORACLE_KEYS, _file_values(args))
    unknown = set(values) - set(ORACLE_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(sorted(unknown))}; "
                          f"valid keys: {', '.join(sorted(ORACLE_KEYS))}")
    m = _manifest(args)
    try:
        v = {k: ORACLE_KEYS[k](x) for k, x in values.items()}
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if args.out is None:
        raise ConfigError("--out is required")
    heads = v.get("heads", max(int(m.meta.get("classes", 2)) - 1, 1))
    out = write_oracle_attention(m, heads, v.get("sigma", 0.2), args.out, v.get("seed", 0))
    print(f"wrote {heads}-channel oracle attention for {len(out.records)} samples to {args.out}")


def _dino_configs(values: dict, channels: int):
    vit_keys = {f.name for f in fields(ViTConfig)}
    dist_keys = {f.name for f in fields(DistillConfig)}
    unknown = set(values) - vit_keys - dist_keys
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(sorted(unknown))}; "
                          f"valid keys: {', '.join(sorted(vit_keys | dist_keys))}")
    vit_vals = {k: v for k, v in values.items() if k in vit_keys}
    vit_vals.setdefault("channels", channels)
    vit_cfg = build_dataclass(ViTConfig, vit_vals)
    dist_cfg = build_dataclass(DistillConfig, {k: v for k, v in values.items() if k in dist_keys})
    return vit_cfg, dist_cfg


def cmd_dino_train(args):
    keys = [f.name for f in fields(ViTConfig)] + [f.name for f in fields(DistillConfig)]
    values = _merge(args, keys, _file_values(args))
    m = _manifest(args)
    if args.out is None:
        raise ConfigError("--out is required")
    images = np.stack([read_tensor(m.path(r.image)).data for r in m.split("train")])
    vit_cfg, cfg = _dino_configs(values, images.shape[1])
    if images.shape[-1] != vit_cfg.image_size:
        images = ops.resize_bilinear(Tensor(images.astype(np.float32)), vit_cfg.image_size,
                                     vit_cfg.image_size).data
    state = dino_train(images, vit_cfg, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = state.header()
    save_checkpoint(out / "teacher.dmck", state.teacher, header)
    save_checkpoint(out / "student.dmck", state.student, header)
    save_checkpoint(out / "teacher_head.dmck", state.teacher_head, dict(header, kind="projection_head"))
    save_checkpoint(out / "student_head.dmck", state.student_head, dict(header, kind="projection_head"))
    with open(out / "dino_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(state.losses):
            w.writerow([i, f"{loss:.8f}"])
    print(f"distillation loss {state.losses[0]:.4f} -> {state.losses[-1]:.4f}; teacher saved to {out / 'teacher.dmck'}")


def cmd_extract_attn(args):
    m = _manifest(args)
    if args.vit_checkpoint is None:
        raise ConfigError("--vit-checkpoint is required")
    if not Path(args.vit_checkpoint).exists():
        raise ConfigError(f"--vit-checkpoint: file not found: {args.vit_checkpoint}")
    if args.out is None:
        raise ConfigError("--out is required")
    params, header = load_checkpoint(args.vit_checkpoint)
    if header.get("kind") != "vit":
        raise ConfigError(f"{args.vit_checkpoint} is not a ViT checkpoint")
    out = batch_extract(m, ViTConfig(**header["vit"]), params, args.out)
    print(f"wrote attention maps for {len(out.records)} samples to {args.out}")


def _train_config(args) -> TrainConfig:
    keys = [f.name for f in fields(TrainConfig)]
    return TrainConfig.from_mapping(_merge(args, keys, _file_values(args)))


def cmd_seg_train(args):
    cfg = _train_config(args)
    m = _manifest(args)
    if args.out is None:
        raise ConfigError("--out is required")
    res = seg_train(m, cfg, args.out)
    print(f"best val dice {res.best_dice:.4f} at epoch {res.best_epoch} "
          f"({res.epochs_run} epochs{', stopped early' if res.stopped_early else ''}); "
          f"checkpoint {res.checkpoint}")


def cmd_seg_eval(args):
    m = _manifest(args)
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"--checkpoint: file not found: {args.checkpoint}")
    if args.out is None:
        raise ConfigError("--out is required")
    report = seg_eval(m, args.split, args.checkpoint, args.out)
    print(f"{args.split}: mean dice {report.mean_dice:.4f}, mean hd95 {report.mean_hd95:.3f}; wrote {args.out}")


def cmd_ablate(args):
    cfg = _train_config(args)
    m = _manifest(args)
    if args.out is None:
        raise ConfigError("--out is required")
    rows = ablation_run(m, cfg, args.out, split=args.split)
    for r in rows:
        print(f"{r['config']:<10} mean dice {r['mean_dice']:.4f}")


COUNT_KEYS = {"in_channels", "heads", "classes", "base_width", "variant", "image_size", "batch"}


def _group(name: str) -> str:
    return name.split(".", 1)[0] if not name.startswith("dec.") else "dec"


def count_table(store, layers, input_shape) -> list[tuple[str, int, int]]:
    groups: dict = {}
    for name, t in store.trainable().items():
        groups.setdefault(_group(name), [0, 0])[0] += t.size
    for layer in layers:
        groups.setdefault(_group(layer["name"]), [0, 0])[1] += count_macs([layer], input_shape)
    rows = [(g, p, mac) for g, (p, mac) in groups.items()]
    rows.append(("total", sum(r[1] for r in rows), sum(r[2] for r in rows)))
    return rows


def cmd_count(args):
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise ConfigError(f"--checkpoint: file not found: {args.checkpoint}")
        store, header = load_checkpoint(args.checkpoint)
        if header.get("kind") != "segnet":
            raise ConfigError("count needs a segmentation checkpoint")
        net_cfg = SegNetConfig(**header["architecture"]["config"])
        size = header.get("train", {}).get("image_size", 224)
        size = args.image_size or size
        batch = 1
    else:
        values = _merge(args, COUNT_KEYS, _file_values(args))
        unknown = set(values) - COUNT_KEYS
        if unknown:
            raise ConfigError(f"unknown config key(s) {', '.join(sorted(unknown))}; "
                              f"valid keys: {', '.join(sorted(COUNT_KEYS))}")
        try:
            size = int(values.pop("image_size", 224))
            batch = int(values.pop("batch", 1))
        except ValueError as e:
            raise ConfigError(str(e)) from e
        net_cfg = build_dataclass(SegNetConfig, values)
        store = DiamantNet(net_cfg).build(0)
    net = DiamantNet(net_cfg)
    rows = count_table(store, net.describe()["layers"], (batch, net_cfg.in_channels, size, size))
    print(f"{'component':<12}{'params':>14}{'MACs':>18}")
    for name, p, mac in rows:
        print(f"{name:<12}{p:>14,}{mac:>18,}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diamant", description="Attention-guided dual-encoder segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic shapes dataset")
    p.add_argument("--config")
    p.add_argument("--seed")
    p.add_argument("--n")
    p.add_argument("--size")
    p.add_argument("--classes")
    p.add_argument("--noise")
    p.add_argument("--fractions", help="train,val,test fractions (default 0.7,0.1,0.2)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract-attn", help="cache ViT attention maps for every sample")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--vit-checkpoint", dest="vit_checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract_attn)

    p = sub.add_parser("gen-oracle-attn", help="write label-derived stand-in attention maps")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--heads")
    p.add_argument("--sigma")
    p.add_argument("--seed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_oracle_attn)

    p = sub.add_parser("dino-train", help="self-distil a ViT on the training images")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out")
    _add_dataclass_flags(p, ViTConfig)
    _add_dataclass_flags(p, DistillConfig)
    p.set_defaults(func=cmd_dino_train)

    p = sub.add_parser("seg-train", help="train a segmentation network")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out")
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_seg_train)

    p = sub.add_parser("seg-eval", help="score a checkpoint on one split")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_seg_eval)

    p = sub.add_parser("ablate", help="train and score the single/dual switch grid")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("count", help="parameter and MAC table")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    for k in sorted(COUNT_KEYS - {"image_size"}):
        p.add_argument("--" + k.replace("_", "-"), dest=k)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.set_defaults(func=cmd_count)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DiamantError, DataIOError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
