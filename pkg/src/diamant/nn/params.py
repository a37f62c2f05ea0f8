"""Named, ordered parameter registry."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..exceptions import ContractError
from ..tensor import Tensor

# init kinds understood by init_params
HE = "he"
ZEROS = "zeros"
ONES = "ones"
EMBED = "embed"


class ParamStore:
    """Ordered mapping ``name -> Tensor`` with trainable/frozen flags.

    Trainable entries are leaf tensors with ``requires_grad`` set; frozen
    entries (batch-norm running statistics) never receive gradients.
    Values are replaced, never mutated, so tensors captured by a tape stay
    valid after an update.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self._trainable: dict[str, bool] = {}
        self._init: dict[str, tuple] = {}

    def add(self, name: str, shape, trainable: bool = True, init: str = HE, fan_in: int | None = None):
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        self._entries[name] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=trainable)
        self._trainable[name] = trainable
        self._init[name] = (init, fan_in)
        return self._entries[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self._entries.items() if self._trainable[k])

    def set(self, name: str, value):
        """Replace the value of ``name`` keeping its shape, dtype and flag."""
        old = self._entries[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=self.dtype)
        if arr.shape != old.shape:
            raise ContractError(f"{name}: shape {arr.shape} != {old.shape}")
        self._entries[name] = Tensor(arr, requires_grad=self._trainable[name])

    def total_params(self) -> int:
        return int(sum(t.size for k, t in self._entries.items() if self._trainable[k]))

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self._entries.items())

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore(self.dtype if dtype is None else dtype)
        for k, v in self._entries.items():
            out._entries[k] = Tensor(v.data.astype(out.dtype, copy=True), requires_grad=self._trainable[k])
            out._trainable[k] = self._trainable[k]
            out._init[k] = self._init[k]
        return out

    def astype(self, dtype) -> "ParamStore":
        return self.copy(dtype)

    def load_state(self, state: dict, strict: bool = True):
        if strict and list(state) != list(self._entries):
            missing = set(self._entries) ^ set(state)
            raise ContractError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, v in state.items():
            self.set(k, v)

    def matches(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            self[k].shape == other[k].shape for k in self._entries)


def init_params(store: ParamStore, seed: int):
    """Deterministic initialisation in registration order.

    Weights ~ N(0, sqrt(2 / fan_in)); biases and shifts 0; norm scales 1;
    token/position embeddings ~ N(0, 0.02).
    """
    rng = np.random.default_rng(seed)
    for name in store.names():
        t = store[name]
        kind, fan_in = store._init[name]
        if kind == HE:
            fan = fan_in if fan_in else int(np.prod(t.shape[:-1]))
            val = rng.normal(0.0, np.sqrt(2.0 / fan), size=t.shape)
        elif kind == EMBED:
            val = rng.normal(0.0, 0.02, size=t.shape)
        elif kind == ONES:
            val = np.ones(t.shape)
        else:
            val = np.zeros(t.shape)
        store.set(name, val)
    return store
