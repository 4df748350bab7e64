"""Per-phase flop accounting.

Kernels call :func:`add_flops`; counts go to whichever counter is active in the
current context (none by default, so library calls outside a solve are free).
"""
from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar

import numpy as np

_active: ContextVar["FlopCounter | None"] = ContextVar("bfmf_flop_counter", default=None)


class FlopCounter:
    """Integer flop totals keyed by phase name."""

    def __init__(self):
        self.phases: dict[str, int] = {}

    def add(self, phase: str, flops) -> None:
        self.phases[phase] = self.phases.get(phase, 0) + int(flops)

    @property
    def total(self) -> int:
        return sum(self.phases.values())

    @contextmanager
    def active(self):
        token = _active.set(self)
        try:
            yield self
        finally:
            _active.reset(token)

    def as_dict(self) -> dict:
        return dict(sorted(self.phases.items()))


def scalar_factor(dtype) -> int:
    """Real flops per scalar multiply-add relative to real arithmetic."""
    return 4 if np.dtype(dtype).kind == "c" else 1


def add_flops(phase: str, flops, dtype=np.float64) -> None:
    counter = _active.get()
    if counter is not None:
        counter.add(phase, int(flops) * scalar_factor(dtype))


def gemm_flops(m, k, n) -> int:
    return 2 * int(m) * int(k) * int(n)
