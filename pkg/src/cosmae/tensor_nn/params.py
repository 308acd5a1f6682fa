"""Ordered, named collections of parameter tensors."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np

from ..errors import ConfigError, UsageError
from .autograd import Tensor


class ParamSet(Mapping[str, Tensor]):
    """Insertion-ordered map from dotted parameter name to :class:`Tensor`.

    The trainable flag of an entry is the tensor's ``requires_grad``.
    """

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in (entries or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        tensor.name = name
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise ConfigError(f"missing parameter {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self):
        return f"ParamSet({len(self)} tensors, {self.n_elements()} elements)"

    def n_elements(self) -> int:
        return int(sum(t.data.size for t in self._entries.values()))

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._entries.items() if t.requires_grad]

    def subset(self, prefix: str) -> "ParamSet":
        """Entries whose name starts with ``prefix`` (tensors are shared, not copied)."""
        out = ParamSet()
        for name, t in self._entries.items():
            if name.startswith(prefix):
                out._entries[name] = t
        return out

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: t.shape for n, t in self._entries.items()}

    def is_compatible(self, other: "ParamSet") -> bool:
        return self.shapes() == other.shapes()

    def require_compatible(self, other: "ParamSet", what: str = "parameter sets") -> None:
        if list(self._entries) != list(other._entries) or not self.is_compatible(other):
            mine, theirs = self.shapes(), other.shapes()
            diff = sorted(set(mine.items()) ^ set(theirs.items()))
            raise UsageError(f"{what} are not shape-compatible; differing entries: {diff[:4]}")

    def copy(self, frozen: bool = False) -> "ParamSet":
        """Deep copy. ``frozen=True`` drops the trainable flag on every entry."""
        out = ParamSet()
        for name, t in self._entries.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=(t.requires_grad and not frozen)))
        return out

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._entries.items()}

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, t in self._entries.items():
            out.add(name, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad))
        return out

    def bitwise_equal(self, other: "ParamSet") -> bool:
        if list(self._entries) != list(other._entries):
            return False
        for name, t in self._entries.items():
            o = other._entries[name].data
            if t.data.dtype != o.dtype or t.data.shape != o.shape:
                return False
            if t.data.tobytes() != o.tobytes():
                return False
        return True
