"""Flat parameter vector with named segments."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["ParamSet"]


class ParamSet:
    """Named, contiguous segments of one flat float64 vector.

    ``segments`` is a sequence of ``(name, size, is_nn)``; ``is_nn`` marks
    network weights (subject to weight decay) as opposed to physical unknowns.
    """

    def __init__(self, segments: Iterable[tuple[str, int, bool]], values=None):
        self.segments: dict[str, tuple[int, int, bool]] = {}
        off = 0
        for name, size, is_nn in segments:
            if name in self.segments:
                raise ValueError(f"duplicate parameter segment {name!r}")
            if size < 0:
                raise ValueError(f"segment {name!r} has negative size")
            self.segments[name] = (off, int(size), bool(is_nn))
            off += int(size)
        self.size = off
        if values is None:
            self.flat = np.zeros(off)
        else:
            self.flat = np.array(values, dtype=np.float64).reshape(-1)
            if self.flat.size != off:
                raise ValueError(f"expected {off} values, got {self.flat.size}")

    def slice(self, name: str) -> slice:
        off, size, _ = self.segments[name]
        return slice(off, off + size)

    def get(self, name: str) -> np.ndarray:
        return self.flat[self.slice(name)]

    def set(self, name: str, values) -> None:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        sl = self.slice(name)
        if values.size != sl.stop - sl.start:
            raise ValueError(f"segment {name!r} has size {sl.stop - sl.start}, got {values.size}")
        self.flat[sl] = values

    def view(self, flat: Tensor, name: str) -> Tensor:
        """Differentiable slice of a flat parameter tensor."""
        return T.getitem(flat, self.slice(name))

    def viewer(self, flat: Tensor):
        return lambda name: self.view(flat, name)

    @property
    def nn_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for name, (off, size, is_nn) in self.segments.items():
            mask[off:off + size] = is_nn
        return mask

    def names(self) -> list[str]:
        return list(self.segments)

    def copy(self) -> "ParamSet":
        return ParamSet(self.layout(), self.flat.copy())

    def layout(self) -> list[tuple[str, int, bool]]:
        return [(n, s, nn) for n, (_, s, nn) in self.segments.items()]

    def __len__(self) -> int:
        return self.size
