"""On-disk model/calibration formats and synthetic generators.

Model: ``model.json`` manifest + ``model.bin`` blob of little-endian float32
weights and biases, laid out at the byte offsets the manifest lists.

Calibration: 16-byte header ``<4sHIHHH`` (magic ``b"MRCD"``, dtype code 1 for
float32, N, C, H, W) followed by N*C*H*W little-endian float32 values.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Block, LayerSpec, ModelGraph
from .nn import conv2d_forward, fold_batchnorm, relu

SCHEMA_VERSION = 1
CALIB_MAGIC = b"MRCD"
CALIB_HEADER = struct.Struct("<4sHIHHH")
DTYPE_F32 = 1


class ModelFormatError(ValueError):
    pass


class SchemaVersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class ByteCountError(ModelFormatError):
    pass


class ConsistencyError(ModelFormatError):
    pass


class CalibrationError(ValueError):
    pass


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype="<f4").astype(np.float64)


# -- model -------------------------------------------------------------------


def save_model(g: ModelGraph, path, weights_name: str | None = None) -> tuple[Path, Path]:
    """Write ``path`` (manifest JSON) and its weight blob next to it."""
    path = Path(path)
    blob_path = path.with_name(weights_name or path.with_suffix(".bin").name)
    chunks, layers, offset = [], [], 0
    for spec, w, b in zip(g.layers, g.weights, g.biases):
        wb = np.ascontiguousarray(w, dtype="<f4").tobytes()
        bb = np.ascontiguousarray(b, dtype="<f4").tobytes()
        entry = spec.to_dict()
        entry.update(weight_offset=offset, weight_shape=list(w.shape), bias_offset=offset + len(wb))
        layers.append(entry)
        chunks += [wb, bb]
        offset += len(wb) + len(bb)
    blob = b"".join(chunks)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "weights_file": blob_path.name,
        "byte_count": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "dtype": "float32-le",
        "input_shape": list(g.input_shape),
        "layers": layers,
        "blocks": [{"start": b.start, "stop": b.stop, "residual": b.residual} for b in g.blocks],
    }
    blob_path.write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path, blob_path


def load_model(path) -> ModelGraph:
    path = Path(path)
    manifest = json.loads(path.read_text())
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"unknown schema_version {version!r}; this reader understands {SCHEMA_VERSION}")
    blob = (path.parent / manifest["weights_file"]).read_bytes()
    expected = int(manifest["byte_count"])
    if len(blob) != expected:
        raise ByteCountError(f"weights blob holds {len(blob)} bytes, manifest expects {expected}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ChecksumError("weights blob sha256 does not match manifest")
    layers, weights, biases = [], [], []
    for i, entry in enumerate(manifest["layers"]):
        spec = LayerSpec.from_dict(entry)
        if list(entry["weight_shape"]) != list(spec.weight_shape):
            raise ConsistencyError(f"layer {i}: weight_shape {entry['weight_shape']} != {list(spec.weight_shape)}")
        nw, nb = spec.num_params * 4, spec.out_channels * 4
        wo, bo = int(entry["weight_offset"]), int(entry["bias_offset"])
        if wo + nw > expected or bo + nb > expected:
            raise ConsistencyError(
                f"layer {i} needs bytes up to {max(wo + nw, bo + nb)} but the blob has {expected}"
            )
        weights.append(_f32(np.frombuffer(blob, "<f4", spec.num_params, wo).reshape(spec.weight_shape)))
        biases.append(_f32(np.frombuffer(blob, "<f4", spec.out_channels, bo)))
        layers.append(spec)
    blocks = [Block(b["start"], b["stop"], bool(b["residual"])) for b in manifest["blocks"]]
    try:
        return ModelGraph(tuple(manifest["input_shape"]), layers, weights, biases, blocks)
    except ValueError as exc:
        raise ConsistencyError(str(exc)) from exc


# -- synthetic models ---------------------------------------------------------


def _block_layers(c_in, c_mid, c_out, groups1, groups2, bits):
    return [
        LayerSpec(c_in, c_mid, 3, 3, 1, 1, groups1, has_relu=True, bits=bits),
        LayerSpec(c_mid, c_out, 3, 3, 1, 1, groups2, has_relu=True, bits=bits),
    ]


def generate_synthetic_model(
    num_blocks: int,
    base_channels: int,
    bottleneck_at: int | None = None,
    seed: int = 0,
    spatial: int = 8,
    bits: int = 4,
    probe_samples: int = 64,
) -> ModelGraph:
    """Chain of two-conv 3x3 blocks with batchnorm folded at generation time.

    Regular blocks are residual. The optional bottleneck block halves the
    channels with depthwise convs (groups == its channels, no residual); the
    block after it widens back and is also non-residual.
    """
    if num_blocks < 2:
        raise ValueError(f"num_blocks must be >= 2, got {num_blocks}")
    if bottleneck_at is not None and not 0 <= bottleneck_at < num_blocks:
        raise ValueError(f"bottleneck_at={bottleneck_at} outside [0, {num_blocks})")
    c = base_channels
    cr = max(c // 2, 1)
    if bottleneck_at is not None and c % cr:
        raise ValueError(f"base_channels={c} must be even for a bottleneck")
    rng = np.random.default_rng(np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF))
    probe = rng.standard_normal((probe_samples, c, spatial, spatial))

    layers, blocks = [], []
    for i in range(num_blocks):
        start = len(layers)
        if i == bottleneck_at:
            layers += _block_layers(c, cr, cr, cr, cr, bits)
            residual = False
        elif bottleneck_at is not None and i == bottleneck_at + 1:
            layers += _block_layers(cr, c, c, 1, 1, bits)
            residual = False
        else:
            layers += _block_layers(c, c, c, 1, 1, bits)
            residual = True
        blocks.append(Block(start, len(layers), residual))

    weights, biases = [], []
    x = probe
    for blk in blocks:
        skip = x
        for li in range(blk.start, blk.stop):
            spec = layers[li]
            fan_in = spec.in_channels // spec.groups * spec.kernel_h * spec.kernel_w
            w = rng.standard_normal(spec.weight_shape) * np.sqrt(2.0 / fan_in)
            b = np.zeros(spec.out_channels)
            z = conv2d_forward(x, w, b, spec)
            mean, var = z.mean(axis=(0, 2, 3)), z.var(axis=(0, 2, 3))
            ones = np.ones(spec.out_channels)
            w, b = fold_batchnorm(w, b, ones, np.zeros(spec.out_channels), mean, var)
            w, b = _f32(w), _f32(b)
            weights.append(w)
            biases.append(b)
            z = conv2d_forward(x, w, b, spec)
            if li == blk.stop - 1 and blk.residual:
                z = z + skip
            x = relu(z)
    return ModelGraph((c, spatial, spatial), layers, weights, biases, blocks)


def equivalent_chain(num_blocks: int, channels: int, seed: int = 0, spatial: int = 6, bits: int = 4) -> ModelGraph:
    """Residual blocks with identical hyper-parameters (no bottleneck)."""
    return generate_synthetic_model(num_blocks, channels, None, seed, spatial, bits)


# -- calibration data --------------------------------------------------------


@dataclass
class CalibrationSet:
    samples: np.ndarray
    batch_size: int
    num_batches: int

    def __post_init__(self):
        if self.batch_size < 1 or self.num_batches < 1:
            raise CalibrationError("batch_size and num_batches must be positive")
        if self.samples.shape[0] != self.batch_size * self.num_batches:
            raise CalibrationError(
                f"{self.samples.shape[0]} samples != batch_size*num_batches = {self.batch_size * self.num_batches}"
            )

    @property
    def n(self) -> int:
        return self.samples.shape[0]


def generate_calibration(
    sample_shape, batch_size: int, num_batches: int, distribution: str = "gaussian", seed: int = 0
) -> CalibrationSet:
    n = batch_size * num_batches
    rng = np.random.default_rng(np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF))
    shape = (n, *sample_shape)
    if distribution == "gaussian":
        x = rng.standard_normal(shape)
    elif distribution == "uniform":
        x = rng.uniform(-1.0, 1.0, shape)
    else:
        raise CalibrationError(f"unknown distribution {distribution!r}; expected gaussian or uniform")
    return CalibrationSet(_f32(x), batch_size, num_batches)


def save_calibration(samples: np.ndarray, path) -> Path:
    n, c, h, w = samples.shape
    path = Path(path)
    header = CALIB_HEADER.pack(CALIB_MAGIC, DTYPE_F32, n, c, h, w)
    path.write_bytes(header + np.ascontiguousarray(samples, dtype="<f4").tobytes())
    return path


def read_calibration(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < CALIB_HEADER.size:
        raise CalibrationError(f"calibration file has {len(data)} bytes, shorter than the 16-byte header")
    magic, dtype, n, c, h, w = CALIB_HEADER.unpack_from(data)
    if magic != CALIB_MAGIC:
        raise CalibrationError(f"bad calibration magic {magic!r}")
    if dtype != DTYPE_F32:
        raise CalibrationError(f"unsupported calibration dtype code {dtype}")
    expected = CALIB_HEADER.size + 4 * n * c * h * w
    if len(data) != expected:
        raise CalibrationError(f"calibration file holds {len(data)} bytes, header implies {expected}")
    return _f32(np.frombuffer(data, "<f4", n * c * h * w, CALIB_HEADER.size).reshape(n, c, h, w))


def load_calibration(path, batch_size: int, num_batches: int) -> CalibrationSet:
    samples = read_calibration(path)
    need = batch_size * num_batches
    if need > samples.shape[0]:
        raise CalibrationError(
            f"requested {batch_size}x{num_batches}={need} samples but only {samples.shape[0]} available"
        )
    return CalibrationSet(samples[:need], batch_size, num_batches)
