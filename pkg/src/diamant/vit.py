"""Small ViT encoder and per-head CLS attention-map extraction."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Manifest, read_tensor, save_manifest, write_tensor
from .data.manifest import rebase_record
from .data.synthetic import minmax
from .exceptions import ConfigError, ShapeError
from .nn import ParamStore, add_attention_block, add_embedding, add_layernorm, add_linear, init_params
from .nn.layers import attention_block, ln, patch_embed
from .tensor import Tensor, no_grad, ops


@dataclass
class ViTConfig:
    image_size: int = 32
    patch: int = 8
    width: int = 32
    depth: int = 2
    heads: int = 2
    channels: int = 1

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid ** 2 + 1

    @classmethod
    def vit_s16(cls, channels: int = 3) -> "ViTConfig":
        return cls(image_size=224, patch=16, width=384, depth=12, heads=6, channels=channels)

    def to_dict(self) -> dict:
        return asdict(self)


def build_vit(cfg: ViTConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    store = ParamStore(dtype)
    add_linear(store, "patch", cfg.channels * cfg.patch ** 2, cfg.width)
    add_embedding(store, "cls", (1, 1, cfg.width))
    add_embedding(store, "pos", (1, cfg.tokens, cfg.width))
    for i in range(cfg.depth):
        add_attention_block(store, f"blocks.{i}", cfg.width)
    add_layernorm(store, "norm", cfg.width)
    return init_params(store, seed)


def vit_forward(images: Tensor, cfg: ViTConfig, params: ParamStore):
    """Returns ``(cls_embedding (B, d), [attn (B, h, T+1, T+1) per block])``."""
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"expected images (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), "
                         f"got {images.shape}")
    B = images.shape[0]
    tokens = patch_embed(images, cfg.patch, params["patch.w"], params["patch.b"])
    cls = ops.add(Tensor(np.zeros((B, 1, cfg.width), dtype=tokens.data.dtype)), params["cls"])
    x = ops.add(ops.concat([cls, tokens], axis=1), params["pos"])
    attns = []
    for i in range(cfg.depth):
        x, attn = attention_block(params, f"blocks.{i}", x, cfg.heads)
        attns.append(attn)
    x = ln(params, "norm", x)
    return x[:, 0], attns


def extract_attention_maps(last_layer_attn, grid_side: int) -> np.ndarray:
    """CLS-query row of each head, minus the CLS column, as (B, h, g, g)."""
    a = last_layer_attn.data if isinstance(last_layer_attn, Tensor) else np.asarray(last_layer_attn)
    B, h, T, T2 = a.shape
    if T != T2 or T != grid_side ** 2 + 1:
        raise ShapeError(f"attention with {T} tokens does not match a {grid_side}x{grid_side} grid + CLS")
    return np.ascontiguousarray(a[:, :, 0, 1:]).reshape(B, h, grid_side, grid_side)


def postprocess_maps(raw: np.ndarray, out_hw) -> np.ndarray:
    """Bilinear resize to ``out_hw`` then min-max each (image, head) map to [0, 1]."""
    raw = np.asarray(raw)
    oh, ow = out_hw
    resized = ops.resize_bilinear(Tensor(raw), oh, ow).data
    out = np.empty(resized.shape, dtype=np.float32)
    for b in range(out.shape[0]):
        for i in range(out.shape[1]):
            out[b, i] = minmax(resized[b, i])
    return out


def attention_stack(images: np.ndarray, cfg: ViTConfig, params: ParamStore, out_hw=None) -> np.ndarray:
    """(B, C, H, W) images -> (B, h, H, W) normalised final-block attention maps."""
    images = np.asarray(images)
    B, C, H, W = images.shape
    x = images.astype(params.dtype)
    if (H, W) != (cfg.image_size, cfg.image_size):
        x = ops.resize_bilinear(Tensor(x), cfg.image_size, cfg.image_size).data
    with no_grad():
        _, attns = vit_forward(Tensor(x), cfg, params)
    raw = extract_attention_maps(attns[-1], cfg.grid)
    return postprocess_maps(raw, out_hw or (H, W))


def batch_extract(manifest: Manifest, cfg: ViTConfig, params: ParamStore, out_dir) -> Manifest:
    """Write one attention stack per image under ``out_dir/attn`` and a manifest
    ``out_dir/manifest.json`` pointing at them.  Re-running overwrites with
    identical bytes."""
    out_dir = Path(out_dir).resolve()
    records = []
    for r in manifest.records:
        image = read_tensor(manifest.path(r.image)).data
        stack = attention_stack(image[None], cfg, params)[0]
        rel = f"attn/{r.id}.dtns"
        write_tensor(out_dir / rel, stack)
        records.append(rebase_record(r, manifest.root, out_dir, rel))
    meta = dict(manifest.meta, heads=cfg.heads, attn_source="vit")
    out = Manifest(records, out_dir, meta)
    save_manifest(out, out_dir / "manifest.json")
    return out
