"""Structural records shared by every stage: layers, blocks, models and modules."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor or layer shapes do not compose."""


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_relu: bool = False
    relu6: bool = False
    bits: int = 4

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    @property
    def num_params(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def groups_pattern(self) -> str:
        if self.groups == 1:
            return "dense"
        if self.groups == self.out_channels:
            return "depthwise"
        return "grouped"

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {self.kernel_h}x{self.kernel_w}")
        return oh, ow

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_h": self.kernel_h,
            "kernel_w": self.kernel_w,
            "stride": self.stride,
            "padding": self.padding,
            "groups": self.groups,
            "has_relu": self.has_relu,
            "relu6": self.relu6,
            "bits": self.bits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**{k: d[k] for k in (
            "in_channels", "out_channels", "kernel_h", "kernel_w", "stride",
            "padding", "groups", "has_relu", "relu6", "bits",
        )})


@dataclass(frozen=True)
class Block:
    """Half-open layer range ``[start, stop)``; ``residual`` adds the block input
    to the last conv output before that layer's activation."""

    start: int
    stop: int
    residual: bool = False


@dataclass
class ModelGraph:
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    blocks: list[Block]

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.validate()

    def __len__(self):
        return len(self.layers)

    def validate(self) -> None:
        """Compose-check: shapes chain, blocks partition the layers, residuals fit."""
        if not self.layers:
            raise ShapeError("model has no layers")
        if not (len(self.layers) == len(self.weights) == len(self.biases)):
            raise ShapeError(
                f"{len(self.layers)} layers but {len(self.weights)} weights and {len(self.biases)} biases"
            )
        c, h, w = self.input_shape
        shapes = []
        for i, (spec, wt, b) in enumerate(zip(self.layers, self.weights, self.biases)):
            if spec.in_channels != c:
                raise ShapeError(f"layer {i}: in_channels={spec.in_channels} but incoming channels={c}")
            if tuple(wt.shape) != spec.weight_shape:
                raise ShapeError(f"layer {i}: weight shape {tuple(wt.shape)} != {spec.weight_shape}")
            if b.shape != (spec.out_channels,):
                raise ShapeError(f"layer {i}: bias length {b.shape} != ({spec.out_channels},)")
            shapes.append((c, h, w))
            h, w = spec.output_hw(h, w)
            c = spec.out_channels
        pos = 0
        for k, blk in enumerate(self.blocks):
            if blk.start != pos or blk.stop <= blk.start:
                raise ShapeError(f"block {k} range [{blk.start}, {blk.stop}) does not continue at {pos}")
            pos = blk.stop
            if blk.residual:
                last = self.layers[blk.stop - 1]
                oh, ow = last.output_hw(*shapes[blk.stop - 1][1:])
                if shapes[blk.start] != (last.out_channels, oh, ow):
                    raise ShapeError(f"block {k}: residual input {shapes[blk.start]} "
                                     f"!= output {(last.out_channels, oh, ow)}")
        if pos != len(self.layers):
            raise ShapeError(f"blocks cover {pos} of {len(self.layers)} layers")

    def with_bits(self, bits: dict[int, int] | int) -> "ModelGraph":
        """Copy with per-layer weight bit-widths replaced (shares weight arrays)."""
        if isinstance(bits, int):
            bits = {i: bits for i in range(len(self.layers))}
        layers = [replace(s, bits=bits.get(i, s.bits)) for i, s in enumerate(self.layers)]
        return ModelGraph(self.input_shape, layers, list(self.weights), list(self.biases), list(self.blocks))


@dataclass(frozen=True)
class ModuleSpec:
    """A contiguous run of layers reconstructed as one unit.

    ``opens[j]`` marks a layer that starts a residual block (its input is kept as
    the skip tensor); ``closes[j]`` marks the layer whose output receives it.
    """

    start: int
    stop: int
    layers: tuple[LayerSpec, ...]
    opens: tuple[bool, ...] = field(default=())
    closes: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        n = self.stop - self.start
        if n < 1 or len(self.layers) != n:
            raise ShapeError(f"module [{self.start}, {self.stop}) holds {len(self.layers)} layers")
        if not self.opens:
            object.__setattr__(self, "opens", (False,) * n)
        if not self.closes:
            object.__setattr__(self, "closes", (False,) * n)
        if len(self.opens) != n or len(self.closes) != n:
            raise ShapeError("opens/closes flags must have one entry per layer")

    @property
    def n_layers(self) -> int:
        return self.stop - self.start

    @property
    def layer_indices(self) -> range:
        return range(self.start, self.stop)

    @property
    def has_residual(self) -> bool:
        return any(self.closes)

    @property
    def needs_skip(self) -> bool:
        """True when a residual add inside the module was opened before it."""
        depth = 0
        for o, c in zip(self.opens, self.closes):
            depth += o
            if c:
                if depth == 0:
                    return True
                depth -= 1
        return False

    @classmethod
    def merge(cls, parts: Sequence["ModuleSpec"]) -> "ModuleSpec":
        for a, b in zip(parts, parts[1:]):
            if a.stop != b.start:
                raise ShapeError(f"cannot merge non-adjacent modules [{a.start},{a.stop}) and [{b.start},{b.stop})")
        return cls(
            parts[0].start,
            parts[-1].stop,
            tuple(s for p in parts for s in p.layers),
            tuple(o for p in parts for o in p.opens),
            tuple(c for p in parts for c in p.closes),
        )
