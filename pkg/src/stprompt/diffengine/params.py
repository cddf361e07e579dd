"""Named parameter storage with a one-way freeze."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .tensor import Tensor


class FrozenParameterError(RuntimeError):
    """Raised on any attempt to make a frozen entry trainable again."""


class ParamStore:
    def __init__(self, seed: int | None = None, dtype=np.float32):
        self.rng_seed = seed
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        data = np.array(value, dtype=self.dtype, copy=True)
        t = Tensor(data, requires_grad=not frozen, name=name)
        self._entries[name] = t
        self._frozen[name] = bool(frozen)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._entries.items() if not self._frozen[n]]

    def freeze(self, names=None) -> None:
        for n in self._entries if names is None else names:
            self._frozen[n] = True
            self._entries[n].requires_grad = False
            self._entries[n].grad = None

    def unfreeze(self, names=None) -> None:
        raise FrozenParameterError("frozen parameters cannot be unfrozen; copy the store instead")

    @property
    def all_frozen(self) -> bool:
        return all(self._frozen.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._entries.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._entries):
            missing = sorted(set(self._entries) - set(state))
            extra = sorted(set(state) - set(self._entries))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for n, t in self._entries.items():
            arr = np.asarray(state[n])
            if arr.shape != t.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)

    def copy(self, dtype=None, keep_frozen: bool = True) -> "ParamStore":
        """Deep copy; with ``keep_frozen=False`` every entry of the copy is trainable."""
        out = ParamStore(self.rng_seed, self.dtype if dtype is None else dtype)
        for n, t in self._entries.items():
            out.add(n, t.data, frozen=self._frozen[n] and keep_frozen)
        return out

    def digest(self) -> str:
        """sha256 over names, shapes and little-endian float32 bytes, in insertion order."""
        h = hashlib.sha256()
        for n, t in self._entries.items():
            h.update(n.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} entries, {count_params(self)} scalars)"


def count_params(store: ParamStore, trainable_only: bool = False) -> int:
    total = 0
    for name, t in store.items():
        if trainable_only and store.is_frozen(name):
            continue
        total += int(np.prod(t.shape, dtype=np.int64))
    return total
