"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tape, Tensor, backward


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(1e-12, np.abs(a) + np.abs(n)), initial=0.0))


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6, coords=None) -> np.ndarray:
    """(f(x+eps) - f(x-eps)) / (2 eps) at each coordinate (all, or ``coords``)."""
    x = np.array(x, copy=True)
    flat = x.reshape(-1)
    out = np.zeros_like(flat, dtype=np.float64)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


def grad_check(f, x, eps: float = 1e-6) -> float:
    """Max relative error between the tape gradient of scalar ``f`` at ``x``
    and central differences, over every coordinate of ``x``."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    analytic = backward(y, tape).get(xt)
    if analytic is None:
        analytic = np.zeros_like(x)
    numeric = numeric_grad(lambda v: f(Tensor(v)).item(), x, eps)
    return rel_error(analytic, numeric)


def grad_check_params(loss_fn, params: dict, eps: float = 1e-6, max_coords: int | None = None,
                      seed: int = 0) -> dict:
    """Check the gradient of ``loss_fn()`` w.r.t. each tensor in ``params``.

    ``params`` maps names to leaf tensors with ``requires_grad``; the loss
    function reads them by reference, so the checker perturbs their data in
    place between evaluations.  When ``max_coords`` is given, that many
    coordinates per tensor are sampled.  Returns ``{name: rel_error}``.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in params.items():
        g = grads.get(t, np.zeros_like(t.data))
        flat = t.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(len(coords))
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            num[j] = (hi - lo) / (2 * eps)
        errors[name] = rel_error(g.reshape(-1)[coords], num)
    return errors


@dataclass
class PiecewiseCheck:
    """Analytic-vs-numeric comparison produced by :meth:`NumericProbe.compare`."""

    coord_errors: dict = field(default_factory=dict)   # name -> max per-coordinate relative error
    norm_errors: dict = field(default_factory=dict)    # name -> ||a - n|| / (||a|| + ||n||)
    checked: int = 0
    skipped: int = 0

    @property
    def max_coord_error(self) -> float:
        return max(self.coord_errors.values(), default=0.0)

    @property
    def max_norm_error(self) -> float:
        return max(self.norm_errors.values(), default=0.0)


@dataclass
class NumericProbe:
    """Central differences at sampled coordinates; ``kept`` is False where the
    loss has a kink inside the probe interval."""

    coords: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    kept: dict = field(default_factory=dict)

    @property
    def checked(self) -> int:
        return int(sum(len(k) for k in self.kept.values()))

    @property
    def skipped(self) -> int:
        return int(sum((~k).sum() for k in self.kept.values()))

    def compare(self, analytic: dict) -> PiecewiseCheck:
        out = PiecewiseCheck(checked=self.checked, skipped=self.skipped)
        for name, coords in self.coords.items():
            keep = self.kept[name]
            if not keep.any():
                continue
            a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[coords[keep]]
            n = self.values[name][keep]
            out.coord_errors[name] = rel_error(a, n)
            denom = np.linalg.norm(a) + np.linalg.norm(n)
            out.norm_errors[name] = float(np.linalg.norm(a - n) / max(denom, 1e-12))
        return out


def probe_piecewise(loss_fn, params: dict, eps: float = 3e-5, max_coords: int | None = None,
                    seed: int = 0, agree_tol: float = 1e-4) -> NumericProbe:
    """Numeric gradients for piecewise-smooth losses (ReLU, max-pool).

    Each sampled coordinate gets central differences at ``eps`` and
    ``eps/2``.  If the two disagree by more than ``agree_tol`` (relative) a
    kink lies inside the probe interval and the coordinate is marked
    unusable.  The decision never looks at an analytic gradient.  Kept
    values are the Richardson combination ``(4 c(eps/2) - c(eps)) / 3``,
    which cancels the eps^2 truncation term.
    """
    rng = np.random.default_rng(seed)
    probe = NumericProbe()
    for name, t in params.items():
        flat = t.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        vals = np.empty(len(coords))
        keep = np.ones(len(coords), dtype=bool)
        for j, i in enumerate(coords):
            orig = flat[i]

            def central(e):
                flat[i] = orig + e
                hi = loss_fn().item()
                flat[i] = orig - e
                lo = loss_fn().item()
                flat[i] = orig
                return (hi - lo) / (2 * e)

            c1, c2 = central(eps), central(eps / 2)
            keep[j] = abs(c1 - c2) <= agree_tol * max(abs(c1), abs(c2)) + 1e-12
            vals[j] = (4 * c2 - c1) / 3
        probe.coords[name], probe.values[name], probe.kept[name] = coords, vals, keep
    return probe


def grad_check_piecewise(loss_fn, params: dict, eps: float = 3e-5, max_coords: int | None = None,
                         seed: int = 0, agree_tol: float = 1e-4) -> PiecewiseCheck:
    """Tape gradient of ``loss_fn`` vs :func:`probe_piecewise` at the same point."""
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape)
    analytic = {n: grads.get(t, np.zeros_like(t.data)) for n, t in params.items()}
    return probe_piecewise(loss_fn, params, eps, max_coords, seed, agree_tol).compare(analytic)
