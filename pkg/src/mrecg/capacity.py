"""Capacity metrics: data-free parameter/bit capacity and loss-based capacity."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .graph import ModuleSpec

DEFAULT_STRIDE2_ALPHA = 1.6
METRICS = ("modcap", "loss")


@dataclass(frozen=True)
class CapacityVector:
    values: tuple[float, ...]
    metric: str

    def __len__(self):
        return len(self.values)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "values": list(self.values)}


def mod_cap_exact(module: ModuleSpec, alpha_stride2: float = DEFAULT_STRIDE2_ALPHA) -> Fraction:
    """Capacity as an exact rational: sum of weight count * bits * stride factor."""
    # str() round-trip gives the decimal the caller wrote (1.6 -> 8/5).
    alpha = Fraction(str(alpha_stride2))
    total = Fraction(0)
    for spec in module.layers:
        factor = alpha if spec.stride == 2 else Fraction(1)
        total += spec.num_params * spec.bits * factor
    return total


def mod_cap(module: ModuleSpec, alpha_stride2: float = DEFAULT_STRIDE2_ALPHA) -> float:
    return float(mod_cap_exact(module, alpha_stride2))


def capacity_vector(
    modules: Sequence[ModuleSpec],
    metric: str = "modcap",
    losses: Sequence[float] | None = None,
    alpha_stride2: float = DEFAULT_STRIDE2_ALPHA,
) -> CapacityVector:
    """Per-module capacity. The ``loss`` metric passes through the final losses
    of a baseline reconstruction over the same modules."""
    if metric == "modcap":
        return CapacityVector(tuple(mod_cap(m, alpha_stride2) for m in modules), metric)
    if metric == "loss":
        if losses is None:
            raise ValueError("loss metric needs per-module final losses from a baseline reconstruction report")
        if len(losses) != len(modules):
            raise ValueError(f"baseline report has {len(losses)} module losses, expected {len(modules)}")
        return CapacityVector(tuple(float(v) for v in losses), metric)
    raise ValueError(f"unknown capacity metric {metric!r}; expected one of {METRICS}")
