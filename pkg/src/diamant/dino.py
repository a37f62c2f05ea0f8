"""Self-distillation of the ViT: sharpened student/teacher distributions,
symmetric cross-view cross-entropy and an EMA teacher."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError, ContractError, TrainingError
from .nn import ParamStore, add_linear, init_params
from .nn.layers import mlp
from .optim import AdamState, adam_update, grads_by_name
from .tensor import Tape, Tensor, backward, no_grad, ops
from .tensor.ops import LOG_CLAMP
from .vit import ViTConfig, build_vit, vit_forward


@dataclass
class DistillConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    K: int = 16
    lambda_start: float = 0.996
    lambda_end: float = 1.0
    total_steps: int = 200
    lr: float = 1e-4
    batch_size: int = 8
    head_layers: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau_t <= self.tau_s:
            raise ConfigError("temperatures must satisfy 0 < tau_t <= tau_s")
        if self.K < 2:
            raise ConfigError("projection dimension K must be at least 2")
        if not 0 < self.lambda_start <= self.lambda_end <= 1:
            raise ConfigError("EMA bounds must satisfy 0 < start <= end <= 1")


@dataclass
class ViewPair:
    x1: np.ndarray
    x2: np.ndarray
    params: list = field(default_factory=list)


def sharpen(logits: Tensor, tau: float) -> Tensor:
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return ops.softmax(ops.scale(logits, 1.0 / tau), axis=-1)


def _check_stochastic(p: Tensor, what: str):
    s = p.data.sum(axis=-1)
    if np.any(np.abs(s - 1) > 1e-4):
        raise ContractError(f"{what} rows are not probability distributions")


def dino_loss(ps_x1: Tensor, ps_x2: Tensor, pt_x1: Tensor, pt_x2: Tensor) -> Tensor:
    """Half the teacher(x1)->student(x2) cross-entropy plus half the reverse,
    each averaged over the batch.  Teacher inputs are used as constants."""
    for p, name in ((ps_x1, "Ps(x1)"), (ps_x2, "Ps(x2)"), (pt_x1, "Pt(x1)"), (pt_x2, "Pt(x2)")):
        _check_stochastic(p, name)
    B = ps_x1.shape[0]

    def term(pt, ps):
        return ops.sum(ops.mul(Tensor(pt.data), ops.log(ps, clamp=LOG_CLAMP)))

    total = ops.add(term(pt_x1, ps_x2), term(pt_x2, ps_x1))
    return ops.scale(total, -0.5 / B)


def ema_update(teacher: ParamStore, student: ParamStore, lam: float):
    """teacher <- lam * teacher + (1 - lam) * student, entry by entry."""
    if not 0 <= lam <= 1:
        raise ContractError(f"EMA coefficient must lie in [0, 1], got {lam}")
    if not teacher.matches(student):
        raise ContractError("teacher and student parameter sets differ")
    for name in teacher.names():
        t = teacher[name].data
        s = student[name].data
        a = t.dtype.type(lam)
        b = t.dtype.type(1.0 - lam)
        teacher.set(name, a * t + b * s)


def cosine_lambda(step: int, total: int, lambda_start: float = 0.996, lambda_end: float = 1.0) -> float:
    if total <= 0:
        return lambda_end
    step = min(max(step, 0), total)
    return lambda_end - (lambda_end - lambda_start) * (1 + math.cos(math.pi * step / total)) / 2


def _nearest_crop(image: np.ndarray, top: int, left: int, side: int, out: int) -> np.ndarray:
    idx = ((np.arange(out) + 0.5) * side / out).astype(int)
    return image[:, top + idx][:, :, left + idx]


def make_views(image: np.ndarray, seed, out_size: int) -> ViewPair:
    """Two random square crops (0.5-1.0 of the area), nearest-neighbour resized
    to ``out_size`` and each flipped horizontally with p=0.5."""
    image = np.asarray(image)
    C, H, W = image.shape
    rng = np.random.default_rng(seed)
    views, record = [], []
    for _ in range(2):
        scale = rng.uniform(0.5, 1.0)
        side = int(np.clip(round(math.sqrt(scale * H * W)), 1, min(H, W)))
        top = int(rng.integers(0, H - side + 1))
        left = int(rng.integers(0, W - side + 1))
        flip = bool(rng.random() < 0.5)
        v = _nearest_crop(image, top, left, side, out_size)
        if flip:
            v = v[:, :, ::-1]
        views.append(np.ascontiguousarray(v))
        record.append({"top": top, "left": left, "side": side, "flip": flip})
    return ViewPair(views[0], views[1], record)


def build_head(d: int, cfg: DistillConfig, seed: int, dtype=np.float32) -> ParamStore:
    store = ParamStore(dtype)
    hidden = 4 * d
    dims = [d] + [hidden] * (cfg.head_layers - 1) + [cfg.K]
    for i in range(cfg.head_layers):
        add_linear(store, f"head.fc{i + 1}", dims[i], dims[i + 1])
    return init_params(store, seed)


def project(images: Tensor, vit_cfg: ViTConfig, vit: ParamStore, head: ParamStore, n_layers: int) -> Tensor:
    cls, _ = vit_forward(images, vit_cfg, vit)
    return mlp(head, "head", cls, n_layers)


@dataclass
class DinoState:
    vit_cfg: ViTConfig
    cfg: DistillConfig
    student: ParamStore
    student_head: ParamStore
    teacher: ParamStore
    teacher_head: ParamStore
    opt: AdamState = field(default_factory=AdamState)
    head_opt: AdamState = field(default_factory=AdamState)
    losses: list = field(default_factory=list)

    @classmethod
    def init(cls, vit_cfg: ViTConfig, cfg: DistillConfig, dtype=np.float32) -> "DinoState":
        student = build_vit(vit_cfg, cfg.seed, dtype)
        head = build_head(vit_cfg.width, cfg, cfg.seed + 1, dtype)
        return cls(vit_cfg, cfg, student, head, student.copy(), head.copy())

    def header(self) -> dict:
        return {"kind": "vit", "vit": self.vit_cfg.to_dict(), "distill": asdict(self.cfg)}


def dino_train_step(state: DinoState, views: list[ViewPair], step: int) -> float:
    """Forward both views through student and teacher, back-propagate the
    distillation loss into the student and its head, then move the teacher
    toward the student with the scheduled EMA coefficient."""
    cfg = state.cfg
    dt = state.student.dtype
    x1 = np.stack([v.x1 for v in views]).astype(dt)
    x2 = np.stack([v.x2 for v in views]).astype(dt)
    both = Tensor(np.concatenate([x1, x2]))
    B = len(views)
    with no_grad():
        zt = project(both, state.vit_cfg, state.teacher, state.teacher_head, cfg.head_layers)
        pt = sharpen(zt, cfg.tau_t)
    pt1, pt2 = Tensor(pt.data[:B]), Tensor(pt.data[B:])
    with Tape() as tape:
        zs = project(both, state.vit_cfg, state.student, state.student_head, cfg.head_layers)
        ps = sharpen(zs, cfg.tau_s)
        loss = dino_loss(ps[:B], ps[B:], pt1, pt2)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite distillation loss at step {step}")
    grads = backward(loss, tape)
    adam_update(state.student, grads_by_name(state.student, grads), state.opt, cfg.lr)
    adam_update(state.student_head, grads_by_name(state.student_head, grads), state.head_opt, cfg.lr)
    lam = cosine_lambda(step, cfg.total_steps, cfg.lambda_start, cfg.lambda_end)
    ema_update(state.teacher, state.student, lam)
    ema_update(state.teacher_head, state.student_head, lam)
    state.losses.append(value)
    return value


def dino_train(images: np.ndarray, vit_cfg: ViTConfig, cfg: DistillConfig, state: DinoState | None = None,
               callback=None) -> DinoState:
    """Run ``cfg.total_steps`` distillation steps over ``images`` (n, C, H, W).

    Batch composition and crops derive from ``(seed, step, slot)`` so runs
    are reproducible.
    """
    images = np.asarray(images)
    if state is None:
        state = DinoState.init(vit_cfg, cfg)
    n = len(images)
    for step in range(len(state.losses), cfg.total_steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=n < cfg.batch_size)
        views = [make_views(images[i], [cfg.seed, step, j], vit_cfg.image_size) for j, i in enumerate(idx)]
        loss = dino_train_step(state, views, step)
        if callback is not None:
            callback(step, loss)
    return state
