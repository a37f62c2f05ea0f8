"""Synthetic shapes dataset, oracle attention maps and flip/rotate augmentation."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from ..exceptions import ContractError
from .manifest import Manifest, Record, rebase_record, save_manifest
from .tensorfile import read_tensor, write_tensor

SHAPE_KINDS = ("disk", "rect", "ring")
MAX_TRIES = 100
NOISE_SIGMA = 0.1
# target total foreground coverage per image, split across its shapes
COVERAGE = 0.45


def class_intensity(c: int, n_classes: int) -> float:
    return c / (n_classes - 1)


def _shape_mask(kind: str, area: float, hw: int, rng) -> np.ndarray:
    """Boolean mask of one shape with roughly ``area`` pixels at a random spot."""
    yy, xx = np.mgrid[0:hw, 0:hw]
    if kind == "rect":
        aspect = rng.uniform(0.6, 1.6)
        h = int(np.clip(round(np.sqrt(area * aspect)), 3, hw - 2))
        w = int(np.clip(round(area / h), 3, hw - 2))
        y0 = rng.integers(0, hw - h + 1)
        x0 = rng.integers(0, hw - w + 1)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    if kind == "disk":
        r = max(2.0, np.sqrt(area / np.pi))
        inner = 0.0
    else:
        ratio = rng.uniform(0.4, 0.6)
        r = max(3.0, np.sqrt(area / (np.pi * (1 - ratio ** 2))))
        inner = r * ratio
    r = min(r, hw / 2 - 1)
    lo, hi = r, hw - 1 - r
    cy = rng.uniform(lo, hi)
    cx = rng.uniform(lo, hi)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r * r) & (d2 >= inner * inner)


def _try_render(rng, hw: int, n_classes: int):
    k = int(rng.integers(1, n_classes))
    classes = rng.choice(np.arange(1, n_classes), size=k, replace=False)
    label = np.zeros((hw, hw), dtype=np.uint8)
    for c in classes:
        kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
        area = COVERAGE / k * rng.uniform(0.7, 1.3) * hw * hw
        for _ in range(MAX_TRIES):
            mask = _shape_mask(kind, area, hw, rng)
            if mask.any() and not np.any(mask & (label > 0)):
                label[mask] = c
                break
        else:
            return None
    return label


def render_sample(seed: int, index: int, hw: int, n_classes: int, noise: float = NOISE_SIGMA):
    """Deterministic (image, label) for item ``index``; image is (1, hw, hw) f32."""
    attempt = 0
    while True:
        rng = np.random.default_rng([seed, index, attempt])
        label = _try_render(rng, hw, n_classes)
        if label is not None:
            break
        attempt += 1
    lut = np.array([class_intensity(c, n_classes) for c in range(n_classes)])
    image = lut[label] + rng.normal(0.0, noise, size=label.shape)
    return image[None].astype(np.float32), label


def split_counts(n: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return n_train, n_val, n - n_train - n_val


def gen_synthetic_dataset(seed: int, n: int, hw: int, classes: int, out_dir,
                          fractions=(0.7, 0.1, 0.2), noise: float = NOISE_SIGMA) -> Manifest:
    """Render ``n`` images into ``out_dir`` and write ``manifest.json``.

    Items are split by id order: the first ``fractions[0]`` train, the next
    ``fractions[1]`` val, the rest test.  Output depends only on the arguments.
    """
    if classes < 2:
        raise ContractError("need at least 2 classes (background + one shape class)")
    if hw < 16:
        raise ContractError("image side must be at least 16 px")
    out_dir = Path(out_dir)
    n_train, n_val, _ = split_counts(n, fractions)
    records = []
    for i in range(n):
        image, label = render_sample(seed, i, hw, classes, noise)
        sid = f"{i:05d}"
        write_tensor(out_dir / "images" / f"{sid}.dtns", image)
        write_tensor(out_dir / "labels" / f"{sid}.dtns", label)
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        records.append(Record(id=sid, case_id=sid, image=f"images/{sid}.dtns",
                              label=f"labels/{sid}.dtns", split=split))
    manifest = Manifest(records, out_dir, {"classes": classes, "channels": 1, "image_size": hw,
                                           "seed": seed})
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def minmax(x: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant array maps to zeros."""
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def gen_oracle_attention(label: np.ndarray, h: int, sigma: float, seed: int, n_classes: int) -> np.ndarray:
    """Stand-in attention stack (h, H, W) f32 built from the label map.

    Channel i shows class ``(i mod (N-1)) + 1``: its indicator blurred by a
    3x3 box filter twice, plus N(0, sigma) noise, min-max normalised.
    """
    if h < 1:
        raise ContractError("need at least one attention channel")
    rng = np.random.default_rng(seed)
    out = np.empty((h,) + label.shape, dtype=np.float32)
    for i in range(h):
        c = (i % (n_classes - 1)) + 1
        m = (label == c).astype(np.float64)
        m = ndimage.uniform_filter(ndimage.uniform_filter(m, 3, mode="nearest"), 3, mode="nearest")
        if sigma > 0:
            m = m + rng.normal(0.0, sigma, size=m.shape)
        out[i] = minmax(m)
    return out


def write_oracle_attention(manifest: Manifest, heads: int, sigma: float, out_dir, seed: int = 0) -> Manifest:
    """Write an oracle attention stack per record under ``out_dir/attn`` plus a
    manifest pointing at them.  Item i's noise is seeded by ``(seed, i)``."""
    out_dir = Path(out_dir).resolve()
    n_classes = int(manifest.meta.get("classes", 0))
    if n_classes < 2:
        raise ContractError("manifest meta must give the number of classes (>= 2)")
    records = []
    for i, r in enumerate(manifest.records):
        label = read_tensor(manifest.path(r.label)).data
        stack = gen_oracle_attention(label, heads, sigma, [seed, i], n_classes)
        rel = f"attn/{r.id}.dtns"
        write_tensor(out_dir / rel, stack)
        records.append(rebase_record(r, manifest.root, out_dir, rel))
    meta = dict(manifest.meta, heads=heads, attn_source="oracle", attn_sigma=sigma)
    out = Manifest(records, out_dir, meta)
    save_manifest(out, out_dir / "manifest.json")
    return out


def augment(image: np.ndarray, label: np.ndarray, attn: np.ndarray | None, seed) -> tuple:
    """Random horizontal flip, vertical flip (p=0.5 each), then a k*90 degree
    rotation; the same transform is applied to every array."""
    rng = np.random.default_rng(seed)
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    k = int(rng.integers(4))

    def tf(a):
        if a is None:
            return None
        if hflip:
            a = a[..., :, ::-1]
        if vflip:
            a = a[..., ::-1, :]
        return np.ascontiguousarray(np.rot90(a, k, axes=(-2, -1)))

    return tf(image), tf(label), tf(attn)
