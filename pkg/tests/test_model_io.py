import json

import numpy as np
import pytest

from mrecg.capacity import mod_cap
from mrecg.graph import Block, LayerSpec, ModelGraph
from mrecg.model_io import (
    ByteCountError,
    CalibrationError,
    CalibrationSet,
    ChecksumError,
    ConsistencyError,
    SchemaVersionError,
    equivalent_chain,
    generate_calibration,
    generate_synthetic_model,
    load_calibration,
    load_model,
    read_calibration,
    save_calibration,
    save_model,
)
from mrecg.partition import build_modules


def _random_model(rng, n_layers=4, c=3):
    layers = [LayerSpec(c, c, 3, 3, padding=1, has_relu=True) for _ in range(n_layers)]
    ws = [rng.standard_normal(s.weight_shape).astype(np.float32).astype(np.float64) for s in layers]
    bs = [rng.standard_normal(c).astype(np.float32).astype(np.float64) for _ in layers]
    blocks = [Block(i, i + 2, True) for i in range(0, n_layers, 2)]
    return ModelGraph((c, 5, 5), layers, ws, bs, blocks)


class TestModelFormat:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        g = _random_model(rng)
        save_model(g, tmp_path / "model.json")
        back = load_model(tmp_path / "model.json")
        assert back.layers == g.layers and back.blocks == g.blocks
        for a, b in zip(g.weights + g.biases, back.weights + back.biases):
            assert a.tobytes() == b.tobytes()

    def test_truncated_blob_names_both_counts(self, tmp_path, rng):
        save_model(_random_model(rng), tmp_path / "model.json")
        blob = tmp_path / "model.bin"
        full = blob.read_bytes()
        blob.write_bytes(full[:-8])
        with pytest.raises(ByteCountError, match=f"{len(full) - 8}.*{len(full)}"):
            load_model(tmp_path / "model.json")

    def test_manifest_larger_than_blob(self, tmp_path, rng):
        """Manifest lists three layers, blob only holds two."""
        small = _random_model(rng, 2)
        save_model(small, tmp_path / "model.json")
        big = _random_model(rng, 4)
        save_model(big, tmp_path / "big.json")
        manifest = json.loads((tmp_path / "big.json").read_text())
        manifest["layers"] = manifest["layers"][:3]
        manifest["blocks"] = [{"start": 0, "stop": 2, "residual": True}, {"start": 2, "stop": 3, "residual": False}]
        small_manifest = json.loads((tmp_path / "model.json").read_text())
        for key in ("weights_file", "byte_count", "sha256"):
            manifest[key] = small_manifest[key]
        (tmp_path / "three.json").write_text(json.dumps(manifest))
        with pytest.raises(ConsistencyError, match="layer 2"):
            load_model(tmp_path / "three.json")

    def test_checksum_mismatch(self, tmp_path, rng):
        save_model(_random_model(rng), tmp_path / "model.json")
        blob = bytearray((tmp_path / "model.bin").read_bytes())
        blob[0] ^= 0xFF
        (tmp_path / "model.bin").write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_model(tmp_path / "model.json")

    def test_unknown_schema_version(self, tmp_path, rng):
        save_model(_random_model(rng), tmp_path / "model.json")
        m = json.loads((tmp_path / "model.json").read_text())
        m["schema_version"] = 99
        (tmp_path / "model.json").write_text(json.dumps(m))
        with pytest.raises(SchemaVersionError, match="99"):
            load_model(tmp_path / "model.json")


class TestSynthetic:
    def test_same_seed_same_model(self):
        a = generate_synthetic_model(4, 8, bottleneck_at=2, seed=11, spatial=5)
        b = generate_synthetic_model(4, 8, bottleneck_at=2, seed=11, spatial=5)
        for x, y in zip(a.weights + a.biases, b.weights + b.biases):
            assert x.tobytes() == y.tobytes()
        c = generate_synthetic_model(4, 8, bottleneck_at=2, seed=12, spatial=5)
        assert not np.array_equal(a.weights[0], c.weights[0])

    def test_bottleneck_block_is_depthwise(self):
        g = generate_synthetic_model(8, 8, bottleneck_at=5, seed=0, spatial=4)
        blk = g.blocks[5]
        second = g.layers[blk.stop - 1]
        assert second.groups == second.in_channels == second.out_channels
        assert all(g.layers[i].groups_pattern == "depthwise" for i in range(blk.start, blk.stop))
        assert second.out_channels < g.layers[0].out_channels

    def test_bottleneck_capacity_below_neighbours(self):
        g = generate_synthetic_model(8, 8, bottleneck_at=5, seed=0, spatial=4)
        caps = [mod_cap(m) for m in build_modules(g, "block")]
        assert caps[5] < caps[4] and caps[5] < caps[6]

    def test_passes_compose_check(self):
        g = generate_synthetic_model(3, 4, bottleneck_at=1, seed=5, spatial=4)
        g.validate()
        assert len(g.layers) == 6

    def test_unit_variance_on_probe(self):
        from mrecg.nn import conv2d_forward

        g = equivalent_chain(2, 6, seed=3, spatial=6)
        probe = np.random.default_rng(np.random.SeedSequence(3)).standard_normal((64, 6, 6, 6))
        z = conv2d_forward(probe, g.weights[0], g.biases[0], g.layers[0])
        np.testing.assert_allclose(z.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    @pytest.mark.parametrize("kw", [dict(num_blocks=1), dict(num_blocks=4, bottleneck_at=4), dict(num_blocks=4, bottleneck_at=-1)])
    def test_invalid_arguments(self, kw):
        kw = {"base_channels": 4, **kw}
        with pytest.raises(ValueError):
            generate_synthetic_model(**kw)


class TestCalibration:
    def test_first_samples_in_order(self, tmp_path, rng):
        x = rng.standard_normal((4096, 1, 2, 2)).astype(np.float32).astype(np.float64)
        save_calibration(x, tmp_path / "c.bin")
        cs = load_calibration(tmp_path / "c.bin", 16, 256)
        assert cs.samples.tobytes() == x.tobytes()
        small = load_calibration(tmp_path / "c.bin", 4, 8)
        np.testing.assert_array_equal(small.samples, x[:32])

    def test_insufficient_samples_reports_available(self, tmp_path, rng):
        save_calibration(rng.standard_normal((4096, 1, 1, 1)), tmp_path / "c.bin")
        with pytest.raises(CalibrationError, match="4096"):
            load_calibration(tmp_path / "c.bin", 17, 256)

    def test_header_layout(self, tmp_path):
        path = save_calibration(np.zeros((3, 2, 4, 5)), tmp_path / "c.bin")
        raw = path.read_bytes()
        assert raw[:4] == b"MRCD" and len(raw) == 16 + 3 * 2 * 4 * 5 * 4
        assert read_calibration(path).shape == (3, 2, 4, 5)

    def test_corrupt_header(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(CalibrationError, match="magic"):
            read_calibration(tmp_path / "c.bin")

    def test_gaussian_mean_within_bound(self):
        cs = generate_calibration((2, 4, 4), 32, 4, "gaussian", seed=9)
        n = cs.samples.size
        assert abs(cs.samples.mean()) < 4 / np.sqrt(n)

    def test_uniform_and_unknown(self):
        cs = generate_calibration((1, 2, 2), 8, 2, "uniform", seed=1)
        assert cs.samples.min() >= -1 and cs.samples.max() <= 1
        with pytest.raises(CalibrationError):
            generate_calibration((1, 2, 2), 8, 2, "cauchy")

    def test_set_size_invariant(self):
        with pytest.raises(CalibrationError):
            CalibrationSet(np.zeros((10, 1, 1, 1)), 3, 3)
