"""Single- and dual-encoder U-Net style segmentation networks.

The dual variant runs an image encoder and an attention-map encoder,
concatenates their bottlenecks, fuses them with a ConvBlock and decodes with
one shared decoder.  At decoder level k the attention encoder's skip is
concatenated only when switch k is on; otherwise a zero tensor of the same
shape takes its place, so the parameter count never depends on the switches.
Switch 1 is the outermost (full-resolution) level, switch 4 the innermost.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError, ShapeError
from .nn import ConvBlock, ParamStore, add_conv, add_conv_transpose, init_params
from .nn.layers import conv, conv_transpose
from .tensor import Tensor, ops

LEVELS = 4
VARIANTS = ("single", "dual")


@dataclass(frozen=True)
class SkipSwitches:
    s1: bool = True
    s2: bool = True
    s3: bool = True
    s4: bool = True

    def __iter__(self):
        return iter((self.s1, self.s2, self.s3, self.s4))

    def __getitem__(self, level: int) -> bool:
        """1-based level lookup."""
        return (self.s1, self.s2, self.s3, self.s4)[level - 1]

    @classmethod
    def parse(cls, value) -> "SkipSwitches":
        if isinstance(value, SkipSwitches):
            return value
        if isinstance(value, str):
            bits = value.replace(",", "").replace(" ", "")
            if len(bits) != 4 or set(bits) - {"0", "1"}:
                raise ConfigError(f"switches must be four 0/1 digits, got {value!r}")
            return cls(*(b == "1" for b in bits))
        vals = tuple(bool(v) for v in value)
        if len(vals) != 4:
            raise ConfigError(f"exactly four switches are required, got {len(vals)}")
        return cls(*vals)

    def __str__(self):
        return "".join("1" if s else "0" for s in self)


ALL_SWITCHES = [SkipSwitches(*(bool(i >> (3 - b) & 1) for b in range(4))) for i in range(16)]


@dataclass
class SegNetConfig:
    in_channels: int = 1
    heads: int = 6
    classes: int = 9
    base_width: int = 64
    variant: str = "dual"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for key in ("in_channels", "heads", "classes", "base_width"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** k for k in range(LEVELS)]

    @property
    def bottleneck_width(self) -> int:
        return self.base_width * 16

    def to_dict(self) -> dict:
        return asdict(self)


class Encoder:
    """Four (ConvBlock -> 2x2 max-pool) levels and a bottleneck ConvBlock."""

    def __init__(self, name: str, in_channels: int, cfg: SegNetConfig):
        self.name = name
        ws = cfg.widths()
        ins = [in_channels] + ws[:-1]
        self.blocks = [ConvBlock(f"{name}.down{k + 1}", ins[k], ws[k]) for k in range(LEVELS)]
        self.bottleneck = ConvBlock(f"{name}.bottleneck", ws[-1], cfg.bottleneck_width)

    def register(self, store: ParamStore):
        for b in self.blocks:
            b.register(store)
        self.bottleneck.register(store)

    def describe(self) -> list[dict]:
        out = []
        for k, b in enumerate(self.blocks):
            out += b.describe(2 ** k)
        return out + self.bottleneck.describe(2 ** LEVELS)

    def __call__(self, store: ParamStore, x: Tensor, train: bool):
        """Returns ``(bottleneck, [skip_1, ..., skip_4])``; skip_k is the
        pre-pool activation at level k (k=1 outermost)."""
        H, W = x.shape[-2:]
        if H % 2 ** LEVELS or W % 2 ** LEVELS:
            raise ShapeError(f"spatial dims {(H, W)} must be divisible by {2 ** LEVELS}")
        skips = []
        for b in self.blocks:
            x = b(store, x, train)
            skips.append(x)
            x = ops.maxpool2d(x)
        return self.bottleneck(store, x, train), skips


class DiamantNet:
    """Parameter layout and forward pass for one :class:`SegNetConfig`."""

    def __init__(self, cfg: SegNetConfig):
        self.cfg = cfg
        ws = cfg.widths()
        if cfg.variant == "single":
            self.encoders = [Encoder("enc", cfg.in_channels + cfg.heads, cfg)]
            self.fusion = None
        else:
            self.encoders = [Encoder("enc_x", cfg.in_channels, cfg), Encoder("enc_a", cfg.heads, cfg)]
            self.fusion = ConvBlock("fusion", 2 * cfg.bottleneck_width, cfg.bottleneck_width)
        n_skips = 2 if cfg.variant == "single" else 3
        self.up_in = [ws[k + 1] if k + 1 < LEVELS else cfg.bottleneck_width for k in range(LEVELS)]
        self.dec_blocks = [ConvBlock(f"dec.block{k + 1}", n_skips * ws[k], ws[k]) for k in range(LEVELS)]

    def build(self, seed: int = 0, dtype=np.float32) -> ParamStore:
        store = ParamStore(dtype)
        for e in self.encoders:
            e.register(store)
        if self.fusion is not None:
            self.fusion.register(store)
        ws = self.cfg.widths()
        for k in reversed(range(LEVELS)):
            add_conv_transpose(store, f"dec.up{k + 1}", self.up_in[k], ws[k], 2)
            self.dec_blocks[k].register(store)
        add_conv(store, "head", ws[0], self.cfg.classes, 1)
        return init_params(store, seed)

    def describe(self) -> dict:
        layers = []
        for e in self.encoders:
            layers += e.describe()
        if self.fusion is not None:
            layers += self.fusion.describe(2 ** LEVELS)
        ws = self.cfg.widths()
        for k in reversed(range(LEVELS)):
            layers.append({"kind": "conv_transpose", "name": f"dec.up{k + 1}", "in": self.up_in[k],
                           "out": ws[k], "k": 2, "scale": 2 ** (k + 1)})
            layers += self.dec_blocks[k].describe(2 ** k)
        layers.append({"kind": "conv", "name": "head", "in": ws[0], "out": self.cfg.classes, "k": 1, "scale": 1})
        return {"config": self.cfg.to_dict(), "layers": layers}

    # ------------------------------------------------------------ forward pieces

    def encode(self, store: ParamStore, x: Tensor, train: bool, which: int = 0):
        return self.encoders[which](store, x, train)

    def bottleneck(self, store: ParamStore, feats: list[Tensor], train: bool) -> Tensor:
        if self.fusion is None:
            return feats[0]
        return self.fusion(store, ops.concat(feats, axis=1), train)

    def decode(self, store: ParamStore, bottleneck: Tensor, img_skips, attn_skips, switches, train: bool) -> Tensor:
        switches = SkipSwitches.parse(switches)
        x = bottleneck
        for k in reversed(range(LEVELS)):
            x = conv_transpose(store, f"dec.up{k + 1}", x)
            parts = [x, img_skips[k]]
            if attn_skips is not None:
                a = attn_skips[k]
                if a.shape != img_skips[k].shape:
                    raise ShapeError(f"attention skip {a.shape} does not match image skip {img_skips[k].shape}")
                parts.append(a if switches[k + 1] else Tensor(np.zeros_like(a.data)))
            if parts[0].shape[-2:] != img_skips[k].shape[-2:]:
                raise ShapeError("decoder level resolution mismatch")
            x = self.dec_blocks[k](store, ops.concat(parts, axis=1), train)
        return conv(store, "head", x)

    def forward(self, store: ParamStore, x, attn, switches=SkipSwitches(), train: bool = False) -> Tensor:
        """Per-pixel class logits (B, N, H, W) for images ``x`` and attention stacks ``attn``."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=store.dtype))
        attn = attn if isinstance(attn, Tensor) else Tensor(np.asarray(attn, dtype=store.dtype))
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected images (B, {cfg.in_channels}, H, W), got {x.shape}")
        if attn.ndim != 4 or attn.shape[1] != cfg.heads:
            raise ShapeError(f"expected {cfg.heads} attention channels, got {attn.shape}")
        if attn.shape[0] != x.shape[0] or attn.shape[2:] != x.shape[2:]:
            raise ShapeError(f"images {x.shape} and attention {attn.shape} disagree")
        if cfg.variant == "single":
            b, skips = self.encode(store, ops.concat([x, attn], axis=1), train)
            return self.decode(store, b, skips, None, switches, train)
        bx, sx = self.encode(store, x, train, 0)
        ba, sa = self.encode(store, attn, train, 1)
        return self.decode(store, self.bottleneck(store, [bx, ba], train), sx, sa, switches, train)


def build_network(cfg: SegNetConfig, seed: int = 0, dtype=np.float32):
    """Returns ``(net, store, architecture description)``."""
    net = DiamantNet(cfg)
    store = net.build(seed, dtype)
    return net, store, net.describe()


def model_forward(x, attn, cfg: SegNetConfig, params: ParamStore, switches=SkipSwitches(),
                  train: bool = False) -> Tensor:
    return DiamantNet(cfg).forward(params, x, attn, switches, train)


@dataclass
class SegModel:
    """A configured network together with its parameters and switch setting."""

    cfg: SegNetConfig
    params: ParamStore
    switches: SkipSwitches = field(default_factory=SkipSwitches)

    def __post_init__(self):
        self.net = DiamantNet(self.cfg)

    def forward(self, x, attn, train: bool = False) -> Tensor:
        return self.net.forward(self.params, x, attn, self.switches, train)

    def header(self) -> dict:
        return {"kind": "segnet", "architecture": self.net.describe(), "switches": str(self.switches)}
