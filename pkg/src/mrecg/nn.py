"""Dense-tensor convolution math with hand-written gradients.

Activations are NCHW float64 arrays, weights OIHW. Convolution is plain
cross-correlation (no kernel flip) lowered to a grouped matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .graph import LayerSpec, ModuleSpec, ShapeError
from .quantizer import fake_quantize

# (layer position, tensor) -> (tensor actually fed to the conv, straight-through mask or None)
InputTransform = Callable[[int, np.ndarray], tuple[np.ndarray, "np.ndarray | None"]]


def _check_input(x: np.ndarray, spec: LayerSpec) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be NCHW, got ndim={x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input channels (dim 1) = {x.shape[1]}, expected in_channels={spec.in_channels}")


def _check_weights(w: np.ndarray, spec: LayerSpec) -> None:
    if tuple(w.shape) != spec.weight_shape:
        for dim, (got, want) in enumerate(zip(w.shape, spec.weight_shape)):
            if got != want:
                raise ShapeError(f"weights dim {dim} = {got}, expected {want} (OIHW {spec.weight_shape})")
        raise ShapeError(f"weights shape {tuple(w.shape)} != {spec.weight_shape}")


def _im2col(x: np.ndarray, spec: LayerSpec) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Return columns shaped (groups, N*OH*OW, Cg*kh*kw) and (N, OH, OW)."""
    n, c, h, w = x.shape
    p, s, kh, kw, g = spec.padding, spec.stride, spec.kernel_h, spec.kernel_w, spec.groups
    oh, ow = spec.output_hw(h, w)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cg = c // g
    xv = x.reshape(n, g, cg, h + 2 * p, w + 2 * p).transpose(1, 0, 3, 4, 2)
    cols = np.empty((g, n, oh, ow, cg, kh, kw))
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xv[:, :, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s]
    return cols.reshape(g, n * oh * ow, cg * kh * kw), (n, oh, ow)


def _grouped_weights(w: np.ndarray, spec: LayerSpec) -> np.ndarray:
    g = spec.groups
    return w.reshape(g, spec.out_channels // g, -1).transpose(0, 2, 1)


def _conv_from_cols(cols, dims, w, bias, spec):
    n, oh, ow = dims
    g = spec.groups
    out = np.matmul(cols, _grouped_weights(w, spec))  # (g, n*oh*ow, og)
    out = out.reshape(g, n, oh, ow, -1).transpose(1, 0, 4, 2, 3).reshape(n, spec.out_channels, oh, ow)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def conv2d_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None, spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec)
    _check_weights(w, spec)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias length {bias.shape[0]} != out_channels={spec.out_channels}")
    cols, dims = _im2col(np.asarray(x, dtype=np.float64), spec)
    return _conv_from_cols(cols, dims, w, bias, spec)


def _conv_backward_cols(cols, in_shape, w, grad_out, spec, need_input=True):
    n, c, h, wd = in_shape
    g = spec.groups
    og = spec.out_channels // g
    _, _, oh, ow = grad_out.shape
    go = grad_out.reshape(n, g, og, oh, ow).transpose(1, 0, 3, 4, 2).reshape(g, n * oh * ow, og)
    grad_w = np.matmul(cols.transpose(0, 2, 1), go).transpose(0, 2, 1).reshape(w.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if not need_input:
        return grad_w, None, grad_b
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    cg = c // g
    gcols = np.matmul(go, _grouped_weights(w, spec).transpose(0, 2, 1)).reshape(g, n, oh, ow, cg, kh, kw)
    gx = np.zeros((g, n, h + 2 * p, wd + 2 * p, cg))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s] += gcols[..., i, j]
    gx = gx.transpose(1, 0, 4, 2, 3).reshape(n, c, h + 2 * p, wd + 2 * p)
    if p:
        gx = gx[:, :, p : h + p, p : wd + p]
    return grad_w, gx, grad_b


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, spec: LayerSpec):
    """Gradients of ``conv2d_forward`` as ``(grad_weights, grad_input, grad_bias)``."""
    _check_input(x, spec)
    _check_weights(w, spec)
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    expected = (x.shape[0], spec.out_channels, oh, ow)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_output shape {grad_out.shape} != forward output shape {expected}")
    cols, _ = _im2col(np.asarray(x, dtype=np.float64), spec)
    return _conv_backward_cols(cols, x.shape, w, grad_out, spec)


def fold_batchnorm(w, bias, gamma, beta, mean, var, eps=1e-5):
    """Fold an inference-mode batchnorm into the preceding conv."""
    var = np.asarray(var, dtype=np.float64)
    out_ch = w.shape[0]
    for name, v in (("bias", bias), ("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if np.shape(v) != (out_ch,):
            raise ShapeError(f"{name} length {np.shape(v)} != out_channels={out_ch}")
    if np.any(var < 0):
        raise ValueError("batchnorm variance must be non-negative")
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(var + eps)
    return w * scale.reshape(-1, 1, 1, 1), (np.asarray(bias) - mean) * scale + beta


def relu(x, relu6=False):
    return np.clip(x, 0.0, 6.0) if relu6 else np.maximum(x, 0.0)


def _activate(z, spec: LayerSpec):
    if not spec.has_relu:
        return z
    return relu(z, spec.relu6)


def _activation_grad(z, spec: LayerSpec):
    if not spec.has_relu:
        return None
    mask = z > 0
    if spec.relu6:
        mask &= z < 6
    return mask


@dataclass
class _TapeEntry:
    cols: np.ndarray
    in_shape: tuple
    dims: tuple
    act_mask: np.ndarray | None
    ste_mask: np.ndarray | None


def run_module(
    module: ModuleSpec,
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    x: np.ndarray,
    skip: np.ndarray | None = None,
    input_transform: InputTransform | None = None,
    tape: list | None = None,
):
    """Execute a module; returns ``(output, skip_out)``.

    ``skip`` must be given when the module closes a residual opened upstream;
    ``skip_out`` is the pending residual tensor when the module ends mid-block.
    Pass a list as ``tape`` to record what ``backward_module`` needs.
    """
    if len(weights) != module.n_layers or len(biases) != module.n_layers:
        raise ShapeError(f"module has {module.n_layers} layers but got {len(weights)} weight tensors")
    if module.needs_skip and skip is None:
        raise ShapeError(f"module [{module.start}, {module.stop}) needs a residual skip input")
    for j, spec in enumerate(module.layers):
        _check_input(x, spec)
        _check_weights(weights[j], spec)
        ste = None
        if input_transform is not None:
            x, ste = input_transform(j, x)
        if module.opens[j]:
            skip = x
        cols, dims = _im2col(x, spec)
        z = _conv_from_cols(cols, dims, weights[j], biases[j], spec)
        if module.closes[j]:
            if skip is None or skip.shape != z.shape:
                raise ShapeError(f"residual shape {None if skip is None else skip.shape} != {z.shape}")
            z = z + skip
            skip = None
        if tape is not None:
            tape.append(_TapeEntry(cols, x.shape, dims, _activation_grad(z, spec), ste))
        x = _activate(z, spec)
    return x, skip


def backward_module(module: ModuleSpec, weights, tape, grad_out):
    """Weight and bias gradients of a taped ``run_module`` call."""
    grads_w: list = [None] * module.n_layers
    grads_b: list = [None] * module.n_layers
    g = grad_out
    g_skip = None
    for j in range(module.n_layers - 1, -1, -1):
        spec = module.layers[j]
        entry = tape[j]
        if entry.act_mask is not None:
            g = g * entry.act_mask
        if module.closes[j]:
            g_skip = g
        gw, gx, gb = _conv_backward_cols(entry.cols, entry.in_shape, weights[j], g, spec, need_input=j > 0)
        grads_w[j], grads_b[j] = gw, gb
        if j == 0:
            break
        if module.opens[j] and g_skip is not None:
            gx = gx + g_skip
            g_skip = None
        if entry.ste_mask is not None:
            gx = gx * entry.ste_mask
        g = gx
    return grads_w, grads_b


def module_forward(module: ModuleSpec, weights, biases, x, skip=None, weight_quant=None, act_quant=None):
    """Plain or fake-quantized forward pass of one module.

    ``weight_quant`` / ``act_quant`` are optional per-layer ``QuantParams``;
    activations are quantized at each conv input.
    """
    if weight_quant is not None:
        weights = [fake_quantize(w, q) for w, q in zip(weights, weight_quant)]
    def quantize_input(j, t):
        q = act_quant[j]
        return (t if q is None else fake_quantize(t, q)), None

    out, _ = run_module(module, weights, biases, x, skip, None if act_quant is None else quantize_input)
    return out
