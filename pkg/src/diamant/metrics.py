"""Segmentation objective, evaluation metrics and model accounting."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import ShapeError
from .nn import ParamStore
from .tensor import Tensor, ops
from .tensor.ops import LOG_CLAMP

DICE_EPS = 1.0
_FOUR_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)


# ---------------------------------------------------------------- losses

def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    """(B, H, W) integer labels -> (B, N, H, W)."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1, axis=1)
    return out


def _as_target(y, like: Tensor) -> Tensor:
    return y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=like.data.dtype))


def ce_from_probs(probs: Tensor, y_onehot) -> Tensor:
    y = _as_target(y_onehot, probs)
    if y.shape != probs.shape:
        raise ShapeError(f"target shape {y.shape} != prediction shape {probs.shape}")
    n_classes = probs.shape[1]
    per_elem = ops.mul(y, ops.log(probs, clamp=LOG_CLAMP))
    n_pix = probs.size // n_classes
    return ops.scale(ops.sum(per_elem), -1.0 / (n_classes * n_pix))


def ce_loss(logits: Tensor, y_onehot) -> Tensor:
    """-(1/N) sum_c y_c log softmax(logits)_c, averaged over pixels and batch."""
    y = _as_target(y_onehot, logits)
    if y.shape != logits.shape:
        raise ShapeError(f"target has {y.shape} but logits have {logits.shape}")
    return ce_from_probs(ops.softmax(logits, axis=1), y)


def dice_loss(probs: Tensor, y_onehot, eps: float = DICE_EPS) -> Tensor:
    """Soft dice, per class over all pixels of the batch, averaged over classes."""
    y = _as_target(y_onehot, probs)
    if y.shape != probs.shape:
        raise ShapeError(f"target shape {y.shape} != prediction shape {probs.shape}")
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = ops.sum(ops.mul(probs, y), axis=axes)
    denom = ops.add(ops.sum(probs, axis=axes), Tensor(y.data.sum(axis=axes) + eps))
    ratio = ops.div(ops.add(ops.scale(inter, 2.0), eps), denom)
    return ops.add(ops.scale(ops.mean(ratio), -1.0), 1.0)


def combined_loss(logits: Tensor, y_onehot, eps: float = DICE_EPS) -> Tensor:
    """Equal-weight sum of cross-entropy and soft dice."""
    y = _as_target(y_onehot, logits)
    if y.shape != logits.shape:
        raise ShapeError(f"target has {y.shape} but logits have {logits.shape}")
    probs = ops.softmax(logits, axis=1)
    return ops.scale(ops.add(ce_from_probs(probs, y), dice_loss(probs, y, eps)), 0.5)


# ---------------------------------------------------------------- hard metrics

def dice_score(pred_labels, gt_labels, c: int) -> float:
    p = np.asarray(pred_labels) == c
    g = np.asarray(gt_labels) == c
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask or off-image."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_FOUR_NEIGHBOURS, border_value=0)
    return mask & ~inner


def surface_distances(pred_mask, gt_mask) -> np.ndarray | None:
    """Pooled directed boundary-to-boundary distances (both directions), in
    pixels; ``None`` if either mask is empty."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if not pred_mask.any() or not gt_mask.any():
        return None
    bp, bg = boundary(pred_mask), boundary(gt_mask)
    to_gt = ndimage.distance_transform_edt(~bg)
    to_pred = ndimage.distance_transform_edt(~bp)
    return np.concatenate([to_gt[bp], to_pred[bg]])


def hd95(pred_mask, gt_mask, spacing: float = 1.0) -> float | None:
    """95th percentile (linear interpolation) of pooled surface distances,
    scaled by ``spacing``.  ``None`` marks the undefined case of an empty mask."""
    d = surface_distances(pred_mask, gt_mask)
    if d is None:
        return None
    return float(np.percentile(d, 95, method="linear")) * spacing


@dataclass
class MetricsReport:
    """Per-case, per-class results plus their means."""

    case_ids: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    per_case_dice: list = field(default_factory=list)   # [case][class]
    per_case_hd95: list = field(default_factory=list)
    per_case_flags: list = field(default_factory=list)
    spacing: float = 1.0

    @property
    def per_class_dice(self) -> list[float]:
        return [float(v) for v in np.mean(self.per_case_dice, axis=0)] if self.case_ids else []

    @property
    def per_class_hd95(self) -> list[float]:
        return [float(v) for v in np.mean(self.per_case_hd95, axis=0)] if self.case_ids else []

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.per_case_dice)) if self.case_ids else float("nan")

    @property
    def mean_hd95(self) -> float:
        return float(np.mean(self.per_case_hd95)) if self.case_ids else float("nan")

    def add_case(self, case_id, pred_labels, gt_labels, spacing: float = 1.0):
        """Score one case.  2-D inputs are one image; 3-D inputs are a stack of
        slices (dice over the whole stack, surface distances pooled across
        slices)."""
        pred = np.asarray(pred_labels)
        gt = np.asarray(gt_labels)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        if pred.ndim == 2:
            pred, gt = pred[None], gt[None]
        diag = float(np.hypot(*gt.shape[-2:])) * spacing
        dices, hds, flags = [], [], []
        for c in self.classes:
            dices.append(dice_score(pred, gt, c))
            p, g = pred == c, gt == c
            if not p.any() and not g.any():
                hds.append(0.0)
                flags.append("both_empty")
                continue
            parts = [surface_distances(p[s], g[s]) for s in range(len(p))]
            parts = [d for d in parts if d is not None]
            if not parts:
                hds.append(diag)
                flags.append("undefined")
                continue
            d = np.concatenate(parts)
            hds.append(float(np.percentile(d, 95, method="linear")) * spacing)
            flags.append("")
        self.case_ids.append(case_id)
        self.per_case_dice.append(dices)
        self.per_case_hd95.append(hds)
        self.per_case_flags.append(flags)

    def rows(self) -> list[dict]:
        out = []
        for cid, ds, hs, fs in zip(self.case_ids, self.per_case_dice, self.per_case_hd95, self.per_case_flags):
            for c, d, h, f in zip(self.classes, ds, hs, fs):
                out.append({"case_id": cid, "class": c, "dice": d, "hd95": h, "flags": f})
        for c, d, h in zip(self.classes, self.per_class_dice, self.per_class_hd95):
            out.append({"case_id": "mean", "class": c, "dice": d, "hd95": h, "flags": "summary"})
        out.append({"case_id": "mean", "class": "all", "dice": self.mean_dice, "hd95": self.mean_hd95,
                    "flags": "summary"})
        return out

    def to_csv(self, path):
        fields = ["case_id", "class", "dice", "hd95", "flags"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for r in self.rows():
                r = dict(r)
                r["dice"] = f"{r['dice']:.6f}"
                r["hd95"] = f"{r['hd95']:.6f}"
                w.writerow(r)


# ---------------------------------------------------------------- accounting

def count_params(store: ParamStore) -> int:
    return store.total_params()


def count_macs(layers: list[dict], input_shape) -> int:
    """Multiply-accumulates of the listed layers for one forward pass.

    ``input_shape`` is (B, C, H, W) or (H, W).  Each layer record carries
    its resolution divisor ``scale`` (output scale for convs, input scale for
    transposed convs).  Normalisation and activations are not counted.
    """
    if len(input_shape) == 2:
        B, (H, W) = 1, input_shape
    else:
        B, _, H, W = input_shape
    total = 0
    for layer in layers:
        kind = layer["kind"]
        if kind == "conv":
            s = layer["scale"]
            stride = layer.get("stride", 1)
            out_elems = B * layer["out"] * (H // (s * stride)) * (W // (s * stride))
            total += out_elems * layer["in"] * layer["k"] ** 2
        elif kind == "conv_transpose":
            s = layer["scale"]
            in_elems = B * layer["in"] * (H // s) * (W // s)
            total += in_elems * layer["out"] * layer["k"] ** 2
        elif kind == "linear":
            total += B * layer.get("rows", 1) * layer["in"] * layer["out"]
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return int(total)
