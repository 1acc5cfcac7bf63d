"""Module sequences at layer/block granularity, homogeneity, and scheme merging."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .graph import ModelGraph, ModuleSpec

GRANULARITIES = ("layer", "block")


@dataclass
class GranularityScheme:
    """Binary mask over the ``L - 1`` adjacent module pairs; 1 joins pair ``l, l+1``."""

    mask: list[int]
    k_requested: int = 0
    k_achieved: int | None = None
    metric: str = "modcap"
    mode: str = "data_free"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mask = [int(bool(m)) for m in self.mask]
        if self.k_achieved is None:
            self.k_achieved = sum(self.mask)
        if sum(self.mask) != self.k_achieved:
            raise ValueError(f"mask has {sum(self.mask)} ones but k_achieved={self.k_achieved}")

    @classmethod
    def zeros(cls, num_modules: int) -> "GranularityScheme":
        return cls([0] * max(num_modules - 1, 0), 0)

    @property
    def shortfall(self) -> bool:
        return self.k_achieved < self.k_requested

    def to_dict(self) -> dict:
        d = {
            "mask": list(self.mask),
            "k": self.k_requested,
            "k_achieved": self.k_achieved,
            "metric": self.metric,
            "mode": self.mode,
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GranularityScheme":
        known = {"mask", "k", "k_achieved", "metric", "mode"}
        return cls(
            list(d["mask"]),
            int(d.get("k", sum(d["mask"]))),
            d.get("k_achieved"),
            d.get("metric", "modcap"),
            d.get("mode", "data_free"),
            {k: v for k, v in d.items() if k not in known},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GranularityScheme":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _module_for(g: ModelGraph, start: int, stop: int) -> ModuleSpec:
    opens = [False] * len(g.layers)
    closes = [False] * len(g.layers)
    for blk in g.blocks:
        if blk.residual:
            opens[blk.start] = True
            closes[blk.stop - 1] = True
    return ModuleSpec(start, stop, tuple(g.layers[start:stop]), tuple(opens[start:stop]), tuple(closes[start:stop]))


def build_modules(g: ModelGraph, granularity: str = "block") -> list[ModuleSpec]:
    if granularity == "layer":
        return [_module_for(g, i, i + 1) for i in range(len(g.layers))]
    if granularity == "block":
        return [_module_for(g, b.start, b.stop) for b in g.blocks]
    raise ValueError(f"unknown granularity {granularity!r}; expected one of {GRANULARITIES}")


def _layer_signature(spec) -> tuple:
    same_padding = spec.padding == spec.kernel_h // 2
    return (spec.stride, spec.groups_pattern, same_padding, spec.has_relu, spec.relu6)


def is_topologically_homogeneous(a: ModuleSpec, b: ModuleSpec) -> bool:
    """Same layer count and matching per-layer hyper-parameters apart from
    kernel size and channel counts. Groups compare by pattern (dense/depthwise/grouped)."""
    if a.n_layers != b.n_layers:
        return False
    if a.opens != b.opens or a.closes != b.closes:
        return False
    return all(_layer_signature(x) == _layer_signature(y) for x, y in zip(a.layers, b.layers))


def apply_scheme(modules: Sequence[ModuleSpec], scheme: GranularityScheme | Sequence[int]) -> list[ModuleSpec]:
    mask = scheme.mask if isinstance(scheme, GranularityScheme) else [int(bool(m)) for m in scheme]
    if len(mask) != len(modules) - 1:
        raise ValueError(f"mask length {len(mask)} != number of modules - 1 = {len(modules) - 1}")
    out: list[ModuleSpec] = []
    run = [modules[0]]
    for m, nxt in zip(mask, modules[1:]):
        if m:
            run.append(nxt)
        else:
            out.append(run[0] if len(run) == 1 else ModuleSpec.merge(run))
            run = [nxt]
    out.append(run[0] if len(run) == 1 else ModuleSpec.merge(run))
    return out
