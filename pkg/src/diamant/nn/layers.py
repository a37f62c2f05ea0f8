"""Parameterised building blocks.

Each block registers its parameters in a :class:`ParamStore` under a
dotted prefix and reads them back by name at call time, so the same store
can be copied (EMA teacher), cast to f64 (gradient checks) or checkpointed
without touching the blocks.
"""
from __future__ import annotations

import math

from ..exceptions import ConfigError, ContractError, ShapeError
from ..tensor import Tensor, ops
from .params import EMBED, HE, ONES, ZEROS, ParamStore

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------- functional forms

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_stats, mode: str = "train",
                eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Returns ``(out, (running_mean, running_var))``.  In eval mode the
    running stats are returned unchanged."""
    mean, var = running_stats
    if mode == "train":
        if x.shape[0] < 2:
            raise ContractError("batchnorm in train mode needs a batch of at least 2")
        out, m, v = ops.batch_norm(x, gamma, beta, mean, var, True, momentum, eps)
        return out, (m, v)
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out, _, _ = ops.batch_norm(x, gamma, beta, mean, var, False, momentum, eps)
    return out, (mean, var)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return ops.layer_norm(x, gamma, beta, eps)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    out = ops.matmul(x, W) if x.ndim >= 2 else ops.reshape(ops.matmul(ops.reshape(x, (1, -1)), W), (-1,))
    return out if b is None else out + b


def patchify(image: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, (H/p)(W/p), C*p*p); patches in row-major grid order,
    each flattened channel-major."""
    B, C, H, W = image.shape
    if H % patch or W % patch:
        raise ShapeError(f"image {(H, W)} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = ops.reshape(image, (B, C, gh, patch, gw, patch))
    x = ops.transpose(x, (0, 2, 4, 1, 3, 5))
    return ops.reshape(x, (B, gh * gw, C * patch * patch))


def patch_embed(image: Tensor, patch: int, W: Tensor, b: Tensor | None = None) -> Tensor:
    return linear(patchify(image, patch), W, b)


def multi_head_self_attention(tokens: Tensor, h: int, w_qkv: Tensor, b_qkv: Tensor,
                              w_out: Tensor, b_out: Tensor):
    """Scaled dot-product attention over ``h`` heads.

    Returns ``(out, attn)`` with ``attn`` of shape (B, h, T, T).
    """
    B, T, d = tokens.shape
    if d % h:
        raise ConfigError(f"width {d} is not divisible by {h} heads")
    dh = d // h
    qkv = linear(tokens, w_qkv, b_qkv)
    qkv = ops.transpose(ops.reshape(qkv, (B, T, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ops.softmax(scores, axis=-1)
    out = ops.matmul(attn, v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, T, d))
    return linear(out, w_out, b_out), attn


# ---------------------------------------------------------------- registration helpers

def add_conv(store: ParamStore, name: str, cin: int, cout: int, k: int, bias: bool = True):
    store.add(f"{name}.w", (cout, cin, k, k), init=HE, fan_in=cin * k * k)
    if bias:
        store.add(f"{name}.b", (cout,), init=ZEROS)


def add_conv_transpose(store: ParamStore, name: str, cin: int, cout: int, k: int):
    store.add(f"{name}.w", (cin, cout, k, k), init=HE, fan_in=cin * k * k)
    store.add(f"{name}.b", (cout,), init=ZEROS)


def add_batchnorm(store: ParamStore, name: str, c: int):
    store.add(f"{name}.gamma", (c,), init=ONES)
    store.add(f"{name}.beta", (c,), init=ZEROS)
    store.add(f"{name}.running_mean", (c,), trainable=False, init=ZEROS)
    store.add(f"{name}.running_var", (c,), trainable=False, init=ONES)


def add_linear(store: ParamStore, name: str, d_in: int, d_out: int):
    store.add(f"{name}.w", (d_in, d_out), init=HE, fan_in=d_in)
    store.add(f"{name}.b", (d_out,), init=ZEROS)


def add_layernorm(store: ParamStore, name: str, d: int):
    store.add(f"{name}.gamma", (d,), init=ONES)
    store.add(f"{name}.beta", (d,), init=ZEROS)


def add_embedding(store: ParamStore, name: str, shape):
    store.add(name, shape, init=EMBED)


# ---------------------------------------------------------------- store-backed calls

def conv(store: ParamStore, name: str, x: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    w = store[f"{name}.w"]
    b = store[f"{name}.b"] if f"{name}.b" in store else None
    k = w.shape[-1]
    return ops.conv2d(x, w, b, stride, k // 2 if pad is None else pad)


def conv_transpose(store: ParamStore, name: str, x: Tensor, stride: int = 2) -> Tensor:
    return ops.conv_transpose2d(x, store[f"{name}.w"], store[f"{name}.b"], stride, 0)


def bn(store: ParamStore, name: str, x: Tensor, train: bool) -> Tensor:
    stats = (store[f"{name}.running_mean"].data, store[f"{name}.running_var"].data)
    out, (m, v) = batchnorm2d(x, store[f"{name}.gamma"], store[f"{name}.beta"], stats,
                              "train" if train else "eval")
    if train:
        store.set(f"{name}.running_mean", m)
        store.set(f"{name}.running_var", v)
    return out


def ln(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return layernorm(x, store[f"{name}.gamma"], store[f"{name}.beta"])


def dense(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return linear(x, store[f"{name}.w"], store[f"{name}.b"])


class ConvBlock:
    """Two (3x3 conv -> batch norm -> ReLU) stages; spatially shape-preserving."""

    def __init__(self, name: str, in_channels: int, out_channels: int):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels

    def register(self, store: ParamStore):
        # no conv bias: the following batch norm removes any per-channel offset
        add_conv(store, f"{self.name}.conv1", self.in_channels, self.out_channels, 3, bias=False)
        add_batchnorm(store, f"{self.name}.bn1", self.out_channels)
        add_conv(store, f"{self.name}.conv2", self.out_channels, self.out_channels, 3, bias=False)
        add_batchnorm(store, f"{self.name}.bn2", self.out_channels)
        return self

    def __call__(self, store: ParamStore, x: Tensor, train: bool) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} channels, got {x.shape[1]}")
        x = ops.relu(bn(store, f"{self.name}.bn1", conv(store, f"{self.name}.conv1", x), train))
        return ops.relu(bn(store, f"{self.name}.bn2", conv(store, f"{self.name}.conv2", x), train))

    def describe(self, scale: int) -> list[dict]:
        """Layer records for MAC accounting; ``scale`` is the resolution divisor."""
        return [
            {"kind": "conv", "name": f"{self.name}.conv1", "in": self.in_channels,
             "out": self.out_channels, "k": 3, "scale": scale},
            {"kind": "conv", "name": f"{self.name}.conv2", "in": self.out_channels,
             "out": self.out_channels, "k": 3, "scale": scale},
        ]


def mlp(store: ParamStore, name: str, x: Tensor, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = dense(store, f"{name}.fc{i + 1}", x)
        if i < n_layers - 1:
            x = ops.gelu(x)
    return x


def attention_block(store: ParamStore, name: str, x: Tensor, heads: int):
    """Pre-norm transformer block; returns ``(x, attn)``."""
    y, attn = multi_head_self_attention(
        ln(store, f"{name}.ln1", x), heads,
        store[f"{name}.attn.qkv.w"], store[f"{name}.attn.qkv.b"],
        store[f"{name}.attn.proj.w"], store[f"{name}.attn.proj.b"])
    x = x + y
    x = x + mlp(store, f"{name}.mlp", ln(store, f"{name}.ln2", x), 2)
    return x, attn


def add_attention_block(store: ParamStore, name: str, d: int, mlp_ratio: int = 4):
    add_layernorm(store, f"{name}.ln1", d)
    add_linear(store, f"{name}.attn.qkv", d, 3 * d)
    add_linear(store, f"{name}.attn.proj", d, d)
    add_layernorm(store, f"{name}.ln2", d)
    add_linear(store, f"{name}.mlp.fc1", d, mlp_ratio * d)
    add_linear(store, f"{name}.mlp.fc2", mlp_ratio * d, d)
