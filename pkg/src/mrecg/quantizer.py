"""Uniform affine fake quantization, MSE range calibration and soft rounding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import ShapeError

# Rectified-sigmoid stretch constants of the learnable rounding scheme.
ZETA = 1.1
GAMMA = -0.1

NUM_CANDIDATES = 100
SHRINK_MIN = 0.2


@dataclass(frozen=True)
class QuantParams:
    """Quantizer grid. ``scale``/``zero_point`` are scalars (per-tensor) or
    vectors along ``axis`` (per-channel)."""

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    symmetric: bool = True
    axis: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        object.__setattr__(self, "zero_point", np.asarray(self.zero_point, dtype=np.float64))
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if not np.all(self.scale > 0) or not np.all(np.isfinite(self.scale)):
            raise ValueError("scale must be positive and finite")
        if self.symmetric and np.any(self.zero_point != 0):
            raise ValueError("symmetric quantizer requires zero_point == 0")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2**self.bits - 1

    def broadcast(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        if self.axis is None or self.scale.ndim == 0:
            return self.scale, self.zero_point
        shape = [1] * ndim
        shape[self.axis] = -1
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale.tolist(),
            "zero_point": self.zero_point.tolist(),
            "bits": self.bits,
            "symmetric": self.symmetric,
            "axis": self.axis,
        }


def _exact_step(span, levels):
    """``span / levels``, nudged by a few ulps when that makes ``step * levels == span``."""
    base = span / levels
    step = base
    down, up = base, base
    for _ in range(4):
        down, up = np.nextafter(down, 0.0), np.nextafter(up, np.inf)
        for cand in (down, up):
            step = np.where((step * levels != span) & (cand * levels == span), cand, step)
    return step


def _grid_for(lo, hi, bits, symmetric):
    """Scale and zero point covering ``[lo, hi]`` (``lo <= 0 <= hi``)."""
    if symmetric:
        scale = _exact_step(np.maximum(-lo, hi), 2 ** (bits - 1) - 1)
        return scale, np.zeros_like(scale)
    scale = _exact_step(hi - lo, 2**bits - 1)
    return scale, np.round(-lo / scale)


def _qdq(t, scale, zp, qmin, qmax):
    return (np.clip(np.rint(t / scale) + zp, qmin, qmax) - zp) * scale


def candidate_factors() -> np.ndarray:
    return np.linspace(SHRINK_MIN, 1.0, NUM_CANDIDATES)


def _calibrate_flat(t: np.ndarray, bits: int, symmetric: bool):
    """Per-row MSE search; ``t`` is (rows, elements). Rows that are all zero get scale 1."""
    lo = np.minimum(t.min(axis=1), 0.0)
    hi = np.maximum(t.max(axis=1), 0.0)
    dead = (hi - lo) == 0
    lo = np.where(dead, -1.0, lo)
    hi = np.where(dead, 1.0, hi)
    qmin = -(2 ** (bits - 1)) if symmetric else 0
    qmax = 2 ** (bits - 1) - 1 if symmetric else 2**bits - 1
    best_err = np.full(t.shape[0], np.inf)
    best_scale = np.zeros(t.shape[0])
    best_zp = np.zeros(t.shape[0])
    # Ascending factors with "<=" keeps the larger scale on ties.
    for f in candidate_factors():
        scale, zp = _grid_for(lo * f, hi * f, bits, symmetric)
        err = np.mean((_qdq(t, scale[:, None], zp[:, None], qmin, qmax) - t) ** 2, axis=1)
        better = err <= best_err
        best_err = np.where(better, err, best_err)
        best_scale = np.where(better, scale, best_scale)
        best_zp = np.where(better, zp, best_zp)
    return best_scale, best_zp, best_err


def calibrate_scale(t: np.ndarray, bits: int, symmetric: bool = True, per_channel: bool = False) -> QuantParams:
    """Pick the quantizer grid with lowest mean squared error.

    Candidates shrink the observed range by factors ``linspace(0.2, 1.0, 100)``.
    Per-channel mode calibrates each slice along axis 0 independently.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    if not np.any(t):
        raise ValueError("degenerate range: tensor is all zeros")
    if per_channel:
        scale, zp, _ = _calibrate_flat(t.reshape(t.shape[0], -1), bits, symmetric)
        return QuantParams(scale, zp, bits, symmetric, axis=0)
    scale, zp, _ = _calibrate_flat(t.reshape(1, -1), bits, symmetric)
    return QuantParams(scale[0], zp[0], bits, symmetric)


def quantization_mse(t: np.ndarray, q: QuantParams) -> float:
    return float(np.mean((fake_quantize(t, q) - t) ** 2))


def fake_quantize(t: np.ndarray, q: QuantParams) -> np.ndarray:
    scale, zp = q.broadcast(np.ndim(t))
    return _qdq(np.asarray(t, dtype=np.float64), scale, zp, q.qmin, q.qmax)


def quantize_ste_mask(t: np.ndarray, q: QuantParams) -> np.ndarray:
    """Straight-through gradient mask: 1 where ``t`` lies inside the clamp range."""
    scale, zp = q.broadcast(np.ndim(t))
    v = np.rint(t / scale) + zp
    return (v >= q.qmin) & (v <= q.qmax)


# -- learnable rounding ------------------------------------------------------


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


@dataclass
class SoftRoundState:
    """Continuous rounding variables ``V`` for one weight tensor."""

    V: np.ndarray
    zeta: float = ZETA
    gamma: float = GAMMA
    beta: float = 20.0

    @classmethod
    def init_from(cls, w: np.ndarray, q: QuantParams, zeta: float = ZETA, gamma: float = GAMMA,
                  beta: float = 20.0) -> "SoftRoundState":
        """Initialise so that ``h(V)`` reproduces the fractional part of ``w / scale``."""
        scale, _ = q.broadcast(w.ndim)
        ratio = w / scale
        rest = ratio - np.floor(ratio)
        # Keep the logit finite at the boundaries; h is clipped there anyway.
        p = np.clip((rest - gamma) / (zeta - gamma), 1e-12, 1 - 1e-12)
        return cls(np.log(p) - np.log1p(-p), zeta, gamma, beta)

    def h(self) -> np.ndarray:
        return np.clip(_sigmoid(self.V) * (self.zeta - self.gamma) + self.gamma, 0.0, 1.0)

    def h_grad(self) -> np.ndarray:
        """dh/dV, zero where the rectifier saturates."""
        s = _sigmoid(self.V)
        raw = s * (self.zeta - self.gamma) + self.gamma
        return np.where((raw > 0) & (raw < 1), s * (1 - s) * (self.zeta - self.gamma), 0.0)

    def saturation_fraction(self, tol: float = 1e-3) -> float:
        h = self.h()
        return float(np.mean((h <= tol) | (h >= 1 - tol)))

    def hard_mask(self) -> np.ndarray:
        return (self.h() >= 0.5).astype(np.float64)


def soft_quantize_weights(w: np.ndarray, q: QuantParams, s: SoftRoundState, h: np.ndarray | None = None):
    """``(floor(w/scale) + h(V))`` clamped to the grid, back in real units.

    Pass ``h`` explicitly (e.g. a hard 0/1 mask) to override ``s.h()``.
    """
    if w.shape != s.V.shape:
        raise ShapeError(f"weights {w.shape} and rounding variables {s.V.shape} differ")
    scale, zp = q.broadcast(w.ndim)
    base = np.floor(w / scale)
    if h is None:
        h = s.h()
    return (np.clip(base + h + zp, q.qmin, q.qmax) - zp) * scale


def soft_quantize_grad(w: np.ndarray, q: QuantParams, s: SoftRoundState, grad_out: np.ndarray) -> np.ndarray:
    """Chain ``dL/d(soft weights)`` back to ``dL/dV``."""
    scale, zp = q.broadcast(w.ndim)
    v = np.floor(w / scale) + s.h() + zp
    inside = (v > q.qmin) & (v < q.qmax)
    return grad_out * scale * s.h_grad() * inside


def rounding_regularizer(s: SoftRoundState) -> tuple[float, np.ndarray]:
    """``sum(1 - |2h - 1|**beta)`` and its gradient w.r.t. ``V``."""
    if s.beta <= 0:
        raise ValueError("beta must be positive")
    d = 2 * s.h() - 1
    a = np.abs(d)
    value = float(np.sum(1 - a**s.beta))
    grad_h = -s.beta * a ** (s.beta - 1) * np.sign(d) * 2
    return value, grad_h * s.h_grad()


def anneal_temperature(it: int, total_iters: int, b_start: float = 20.0, b_end: float = 2.0) -> float:
    if total_iters <= 0:
        return float(b_end)
    if not 0 <= it <= total_iters:
        raise ValueError(f"iteration {it} outside [0, {total_iters}]")
    return b_start + (b_end - b_start) * it / total_iters
