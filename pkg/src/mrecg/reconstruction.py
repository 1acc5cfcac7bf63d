"""Module-by-module rounding reconstruction.

Each module learns rounding variables for its weights so that its quantized
output, fed with the quantized predecessor chain, matches the full-precision
output. Modules are processed strictly in order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import ModelGraph, ModuleSpec, ShapeError
from .model_io import CalibrationSet
from .nn import backward_module, run_module
from .partition import GranularityScheme, apply_scheme, build_modules
from .quantizer import (
    QuantParams,
    SoftRoundState,
    anneal_temperature,
    calibrate_scale,
    fake_quantize,
    quantize_ste_mask,
    rounding_regularizer,
    soft_quantize_grad,
    soft_quantize_weights,
)

log = logging.getLogger(__name__)

# Rounding-regularizer weight per model family.
FAMILY_ROUND_WEIGHT = {"resnet": 0.01, "mobilenet": 0.1}
METHOD_GRANULARITY = {"adaround": "layer", "brecq": "block"}
CHUNK = 512
ACT_CALIB_SAMPLES = 1024


class ReconstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    iterations: int = 20000
    round_loss_weight: float = 0.01
    learning_rate: float = 1e-3
    batch_size: int = 32
    num_batches: int = 16
    qdrop_prob: float = 0.0
    seed: int = 0
    wbits: int | None = 4
    abits: int | None = 4
    granularity: str = "block"
    warmup: float = 0.2
    b_start: float = 20.0
    b_end: float = 2.0
    trajectory_every: int = 100
    relax_first_layer: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be positive, got {self.iterations}")
        if not 0.0 <= self.qdrop_prob <= 1.0:
            raise ValueError(f"qdrop_prob must lie in [0, 1], got {self.qdrop_prob}")
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError(f"warmup must lie in [0, 1), got {self.warmup}")
        if self.batch_size < 1 or self.num_batches < 1:
            raise ValueError("batch_size and num_batches must be positive")
        if self.granularity not in ("layer", "block"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @classmethod
    def for_family(cls, family: str, **kw) -> "ReconConfig":
        return cls(round_loss_weight=FAMILY_ROUND_WEIGHT[family], **kw)

    def with_budget(self, iterations: int) -> "ReconConfig":
        """Shorter (or longer) schedule with the step size scaled so that
        ``learning_rate * iterations`` stays what it was."""
        return replace(self, iterations=iterations, learning_rate=self.learning_rate * self.iterations / iterations)

    def to_dict(self) -> dict:
        return asdict(self)


def method_config(method: str, cfg: ReconConfig) -> ReconConfig:
    """Config of a single-granularity baseline: ``adaround`` (per layer) or ``brecq`` (per block)."""
    if method not in METHOD_GRANULARITY:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(METHOD_GRANULARITY)}")
    return replace(cfg, granularity=METHOD_GRANULARITY[method])


# -- reports -----------------------------------------------------------------


@dataclass
class ModuleReport:
    index: int
    start: int
    stop: int
    n_layers: int
    initial_loss: float
    final_loss: float
    h_saturation_fraction: float
    loss_trajectory: list[tuple[int, float]] = field(default_factory=list)
    eval_loss: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_trajectory"] = [[int(i), float(v)] for i, v in self.loss_trajectory]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModuleReport":
        d = dict(d)
        d["loss_trajectory"] = [(int(i), float(v)) for i, v in d.get("loss_trajectory", [])]
        return cls(**d)


@dataclass
class ReconstructionReport:
    modules: list[ModuleReport]
    granularity: str
    mask: list[int]
    config: dict
    wall_time: float = 0.0
    quantized_weights: list | None = field(default=None, repr=False)

    @property
    def final_losses(self) -> list[float]:
        return [m.final_loss for m in self.modules]

    @property
    def eval_losses(self) -> list[float | None]:
        return [m.eval_loss for m in self.modules]

    @property
    def final_loss(self) -> float:
        return self.modules[-1].final_loss

    def to_dict(self) -> dict:
        # wall time is deliberately left out so reports are byte-reproducible
        return {
            "granularity": self.granularity,
            "mask": list(self.mask),
            "config": self.config,
            "module_order": [m.index for m in self.modules],
            "final_losses": self.final_losses,
            "modules": [m.to_dict() for m in self.modules],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionReport":
        return cls([ModuleReport.from_dict(m) for m in d["modules"]], d["granularity"], list(d["mask"]), d["config"])

    @classmethod
    def load(cls, path) -> "ReconstructionReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def trajectories_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["module_index", "iter", "loss"])
        for m in self.modules:
            for it, loss in m.loss_trajectory:
                w.writerow([m.index, it, repr(float(loss))])
        return buf.getvalue()


# -- helpers -----------------------------------------------------------------


def _module_params(model: ModelGraph, module: ModuleSpec):
    idx = module.layer_indices
    return [model.weights[i] for i in idx], [model.biases[i] for i in idx]


def _take(state, idx):
    x, skip = state
    return x[idx], (None if skip is None else skip[idx])


def _act_transform(aq: Sequence[QuantParams | None], rng: np.random.Generator | None = None, keep_prob: float = 0.0):
    """Activation fake-quant at each conv input (straight-through gradient).

    With ``keep_prob > 0`` each element independently skips quantization with
    that probability (QDROP); masks are redrawn on every call.
    """

    def transform(j, x):
        q = aq[j]
        if q is None:
            return x, None
        xq = fake_quantize(x, q)
        ste = quantize_ste_mask(x, q)
        if keep_prob > 0:
            keep = np.ones(x.shape, dtype=bool) if keep_prob >= 1 else rng.random(x.shape) < keep_prob
            xq = np.where(keep, x, xq)
            ste = ste | keep
        return xq, ste

    return transform


def _forward_chunked(module, weights, biases, state, transform=None):
    x, skip = state
    outs, skips = [], []
    for s in range(0, x.shape[0], CHUNK):
        sl = slice(s, s + CHUNK)
        o, sk = run_module(module, weights, biases, x[sl], None if skip is None else skip[sl], transform)
        outs.append(o)
        skips.append(sk)
    skip_out = None if skips[0] is None else np.concatenate(skips)
    return np.concatenate(outs), skip_out


def module_loss(out: np.ndarray, target: np.ndarray) -> float:
    """Batch mean of the per-sample squared Frobenius norm."""
    if out.shape != target.shape:
        raise ShapeError(f"output {out.shape} vs target {target.shape}")
    return float(np.sum((out - target) ** 2) / out.shape[0])


def reconstruction_loss(
    module: ModuleSpec,
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    states: Sequence[SoftRoundState],
    weight_quant: Sequence[QuantParams],
    fp_input,
    q_input,
    act_quant: Sequence[QuantParams | None] | None = None,
    fp_target: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    qdrop_prob: float = 0.0,
):
    """Loss between the full-precision module on ``fp_input`` and the
    soft-rounded module on ``q_input``, plus gradients w.r.t. every ``V``.

    Inputs are ``(x, skip)`` pairs or bare arrays. Returns ``(loss, grads_V)``.
    """
    fp_input = fp_input if isinstance(fp_input, tuple) else (fp_input, None)
    q_input = q_input if isinstance(q_input, tuple) else (q_input, None)
    if fp_target is None:
        fp_target, _ = run_module(module, weights, biases, *fp_input)
    soft = [soft_quantize_weights(w, q, s) for w, q, s in zip(weights, weight_quant, states)]
    transform = None if act_quant is None else _act_transform(act_quant, rng, qdrop_prob)
    tape: list = []
    out, _ = run_module(module, soft, biases, q_input[0], q_input[1], transform, tape)
    if out.shape != fp_target.shape:
        raise ShapeError(f"quantized output {out.shape} vs full-precision output {fp_target.shape}")
    n = out.shape[0]
    diff = out - fp_target
    loss = float(np.sum(diff**2) / n)
    gw, _ = backward_module(module, soft, tape, 2.0 * diff / n)
    grads = [soft_quantize_grad(w, q, s, g) for w, q, s, g in zip(weights, weight_quant, states, gw)]
    return loss, grads


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _stream(seed: int, module_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, module_index])))


def reconstruct_module(
    module: ModuleSpec,
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    weight_quant: Sequence[QuantParams],
    act_quant: Sequence[QuantParams | None],
    q_input: tuple,
    fp_target: np.ndarray,
    cfg: ReconConfig,
    index: int = 0,
    return_output: bool = False,
):
    """Optimise rounding for one module; returns ``(hard_weights, ModuleReport)``.

    ``q_input`` is the quantized predecessor output ``(x, skip)`` for every
    calibration sample and ``fp_target`` the full-precision module output.
    With ``return_output`` the quantized module output ``(x, skip)`` is
    appended, saving the caller a forward pass.
    """
    rng = _stream(cfg.seed, index)
    states = [SoftRoundState.init_from(w, q) for w, q in zip(weights, weight_quant)]
    opt = _Adam([s.V for s in states], cfg.learning_rate)
    n = q_input[0].shape[0]
    bs = min(cfg.batch_size, n)
    total = cfg.iterations
    warm = int(cfg.warmup * total)
    # reconstruction term per output position, rounding term per weight
    positions = fp_target.shape[2] * fp_target.shape[3]
    trajectory = []

    for it in range(total):
        idx = np.sort(rng.choice(n, bs, replace=False)) if bs < n else np.arange(n)
        xb = _take(q_input, idx)
        loss, grads = reconstruction_loss(
            module, weights, biases, states, weight_quant, None, xb, act_quant, fp_target[idx], rng, cfg.qdrop_prob
        )
        if not np.isfinite(loss):
            raise ReconstructionError(f"module {index} (layers {module.start}-{module.stop - 1}) diverged at iteration {it}")
        if it % cfg.trajectory_every == 0:
            trajectory.append((it, loss))
        grads = [g / positions for g in grads]
        if it >= warm:
            beta = anneal_temperature(it - warm, max(total - warm - 1, 1), cfg.b_start, cfg.b_end)
            for s, g in zip(states, grads):
                s.beta = beta
                _, rg = rounding_regularizer(s)
                g += cfg.round_loss_weight * rg
        opt.step(grads)

    hard = [soft_quantize_weights(w, q, s, h=s.hard_mask()) for w, q, s in zip(weights, weight_quant, states)]
    nearest = [fake_quantize(w, q) for w, q in zip(weights, weight_quant)]
    transform = _act_transform(act_quant)
    out_init, _ = _forward_chunked(module, nearest, biases, q_input, transform)
    out_final, skip_final = _forward_chunked(module, hard, biases, q_input, transform)
    sat = float(np.mean(np.concatenate([[s.saturation_fraction()] * s.V.size for s in states])))
    report = ModuleReport(
        index=index,
        start=module.start,
        stop=module.stop,
        n_layers=module.n_layers,
        initial_loss=module_loss(out_init, fp_target),
        final_loss=module_loss(out_final, fp_target),
        h_saturation_fraction=sat,
        loss_trajectory=trajectory,
    )
    if return_output:
        return hard, report, (out_final, skip_final)
    return hard, report


# -- pipeline ----------------------------------------------------------------


def calibrate_quantizers(model: ModelGraph, samples: np.ndarray, cfg: ReconConfig):
    """Per-layer weight and activation quantizers.

    Weights: symmetric, per output channel, ``cfg.wbits`` or the layer's own
    bits when that is ``None``. Activations: asymmetric per tensor on each
    conv input, fitted to full-precision activations of the first samples.
    """
    wq = [
        calibrate_scale(w, cfg.wbits or spec.bits, symmetric=True, per_channel=True)
        for spec, w in zip(model.layers, model.weights)
    ]
    if cfg.abits is None:
        return wq, [None] * len(model.layers)
    aq: list[QuantParams | None] = []
    state = (samples[:ACT_CALIB_SAMPLES], None)
    for m in build_modules(model, "layer"):
        j = m.start
        bits = 8 if cfg.relax_first_layer and j == 0 else cfg.abits
        x = state[0]
        aq.append(calibrate_scale(x, bits, symmetric=False) if np.any(x) else None)
        state = run_module(m, [model.weights[j]], [model.biases[j]], *state)
    return wq, aq


def run_pipeline(
    model: ModelGraph,
    scheme: GranularityScheme | Sequence[int] | None,
    calib: CalibrationSet,
    cfg: ReconConfig,
    eval_inputs: np.ndarray | None = None,
) -> ReconstructionReport:
    """Reconstruct every module of ``model`` under ``scheme`` in order.

    ``scheme`` masks pairs of the modules at ``cfg.granularity``; ``None``
    keeps them all separate. With ``eval_inputs`` each module also gets a
    loss on that held-out set, measured through the quantized chain.
    """
    t0 = time.perf_counter()
    base = build_modules(model, cfg.granularity)
    if scheme is None:
        scheme = GranularityScheme.zeros(len(base))
    mask = scheme.mask if isinstance(scheme, GranularityScheme) else [int(bool(m)) for m in scheme]
    modules = apply_scheme(base, mask)
    cfg = replace(cfg, batch_size=calib.batch_size, num_batches=calib.num_batches)
    wq, aq = calibrate_quantizers(model, calib.samples, cfg)

    fp_state = q_state = (calib.samples, None)
    ev_fp = ev_q = None if eval_inputs is None else (eval_inputs, None)
    reports, hard_all = [], []
    for i, m in enumerate(modules):
        w, b = _module_params(model, m)
        mwq = [wq[j] for j in m.layer_indices]
        maq = [aq[j] for j in m.layer_indices]
        fp_state = _forward_chunked(m, w, b, fp_state)
        hard, rep, q_state = reconstruct_module(m, w, b, mwq, maq, q_state, fp_state[0], cfg, i, return_output=True)
        if ev_fp is not None:
            ev_fp = _forward_chunked(m, w, b, ev_fp)
            ev_q = _forward_chunked(m, hard, b, ev_q, _act_transform(maq))
            rep.eval_loss = module_loss(ev_q[0], ev_fp[0])
        log.info("module %d layers %d-%d: %.6g -> %.6g", i, m.start, m.stop - 1, rep.initial_loss, rep.final_loss)
        reports.append(rep)
        hard_all.extend(hard)
    return ReconstructionReport(
        reports, cfg.granularity, list(mask), cfg.to_dict(), time.perf_counter() - t0, hard_all
    )


def run_method(
    model: ModelGraph, calib: CalibrationSet, cfg: ReconConfig, method: str, eval_inputs=None
) -> ReconstructionReport:
    """Single-granularity baseline: ``adaround`` or ``brecq`` with an all-zero mask."""
    return run_pipeline(model, None, calib, method_config(method, cfg), eval_inputs)
