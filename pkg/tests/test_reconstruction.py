import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from conftest import central_diff, rel_err
from mrecg.graph import LayerSpec, ModuleSpec, ShapeError
from mrecg.model_io import equivalent_chain, generate_calibration, generate_synthetic_model
from mrecg.nn import run_module
from mrecg.partition import GranularityScheme, build_modules
from mrecg.quantizer import QuantParams, SoftRoundState, calibrate_scale, fake_quantize
from mrecg.reconstruction import (
    ReconConfig,
    ReconstructionError,
    ReconstructionReport,
    _act_transform,
    _forward_chunked,
    _module_params,
    calibrate_quantizers,
    method_config,
    module_loss,
    reconstruct_module,
    reconstruction_loss,
    run_method,
    run_pipeline,
)


def _two_layer(c=3, residual=True):
    layers = (LayerSpec(c, c, 3, 3, padding=1, has_relu=True), LayerSpec(c, c, 3, 3, padding=1, has_relu=True))
    if residual:
        return ModuleSpec(0, 2, layers, (True, False), (False, True))
    return ModuleSpec(0, 2, layers)


def _setup(seed, c=3, n=8, hw=5):
    r = np.random.default_rng(seed)
    m = _two_layer(c)
    ws = [r.standard_normal((c, c, 3, 3)) * 0.4 for _ in range(2)]
    bs = [r.standard_normal(c) * 0.1 for _ in range(2)]
    x = r.standard_normal((n, c, hw, hw))
    wq = [calibrate_scale(w, 4, per_channel=True) for w in ws]
    return m, ws, bs, x, wq, r


class TestLoss:
    def test_zero_when_on_grid(self, rng):
        m = _two_layer(2)
        q = QuantParams(0.25, 0, 4)
        ws = [rng.integers(-8, 8, (2, 2, 3, 3)) * 0.25 for _ in range(2)]
        bs = [np.zeros(2)] * 2
        states = [SoftRoundState.init_from(w, q) for w in ws]
        x = rng.standard_normal((3, 2, 4, 4))
        loss, _ = reconstruction_loss(m, ws, bs, states, [q, q], x, x)
        assert loss == 0.0

    def test_identity_module_closed_form(self, rng):
        m = ModuleSpec(0, 1, (LayerSpec(2, 2, 1, 1),))
        w = np.eye(2).reshape(2, 2, 1, 1)
        q = QuantParams(0.5, 0, 4)
        s = SoftRoundState.init_from(w, q)
        x = rng.standard_normal((5, 2, 3, 3))
        d = rng.standard_normal(x.shape) * 0.1
        loss, _ = reconstruction_loss(m, [w], [np.zeros(2)], [s], [q], x, x + d)
        assert loss == pytest.approx(np.sum(d**2) / 5, rel=1e-12)

    def test_shape_mismatch(self, rng):
        m, ws, bs, x, wq, _ = _setup(0)
        states = [SoftRoundState.init_from(w, q) for w, q in zip(ws, wq)]
        with pytest.raises(ShapeError):
            reconstruction_loss(m, ws, bs, states, wq, x, x, fp_target=np.zeros((1, 1, 1, 1)))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        m, ws, bs, x, wq, r = _setup(seed)
        states = [SoftRoundState(r.uniform(-2, 2, w.shape)) for w in ws]
        xq = x + r.standard_normal(x.shape) * 0.05

        def f():
            return reconstruction_loss(m, ws, bs, states, wq, x, xq)[0]

        _, grads = reconstruction_loss(m, ws, bs, states, wq, x, xq)
        for s, g in zip(states, grads):
            idx = [tuple(r.integers(0, d) for d in s.V.shape) for _ in range(8)]
            fd = [central_diff(f, s.V, i) for i in idx]
            assert rel_err([g[i] for i in idx], fd) < 1e-5

    def test_qdrop_one_disables_activation_quant(self, rng):
        m, ws, bs, x, wq, r = _setup(3)
        aq = [calibrate_scale(x, 4, symmetric=False)] * 2
        states = [SoftRoundState(r.uniform(-1, 1, w.shape)) for w in ws]
        plain = reconstruction_loss(m, ws, bs, states, wq, x, x)
        dropped = reconstruction_loss(m, ws, bs, states, wq, x, x, aq, rng=rng, qdrop_prob=1.0)
        quant = reconstruction_loss(m, ws, bs, states, wq, x, x, aq)
        assert dropped[0] == plain[0] and quant[0] != plain[0]
        for a, b in zip(dropped[1], plain[1]):
            np.testing.assert_array_equal(a, b)

    def test_qdrop_half_mixes_elements(self):
        q = QuantParams(0.5, 0, 4, symmetric=False)
        x = np.linspace(0.1, 3.0, 4000).reshape(1, 1, 40, 100) + 0.13
        xq, ste = _act_transform([q], np.random.default_rng(0), 0.5)(0, x)
        kept = xq == x
        assert 0.45 < kept.mean() < 0.55
        np.testing.assert_array_equal(xq[~kept], fake_quantize(x, q)[~kept])
        assert ste.all()


class TestReconstructModule:
    def test_on_grid_weights_are_a_fixed_point(self, rng):
        m = _two_layer(2, residual=False)
        q = QuantParams(0.25, 0, 4)
        ws = [rng.integers(-7, 7, (2, 2, 3, 3)) * 0.25 for _ in range(2)]
        bs = [np.zeros(2)] * 2
        x = rng.standard_normal((16, 2, 4, 4))
        aq = [calibrate_scale(x, 4, symmetric=False), QuantParams(0.2, 0, 4, symmetric=False)]
        target = run_module(m, ws, bs, x)[0]
        cfg = ReconConfig(iterations=200, batch_size=8, num_batches=2)
        hard, rep = reconstruct_module(m, ws, bs, [q, q], aq, (x, None), target, cfg)
        for h, w in zip(hard, ws):
            np.testing.assert_allclose(h, w, atol=1e-9)
        act_only = _forward_chunked(m, ws, bs, (x, None), _act_transform(aq))[0]
        assert rep.final_loss == pytest.approx(module_loss(act_only, target), abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_improves_on_nearest_rounding(self, seed):
        m, ws, bs, x, wq, _ = _setup(seed, c=4, n=32)
        aq = [calibrate_scale(x, 4, symmetric=False), calibrate_scale(run_module(ModuleSpec(0, 1, m.layers[:1]), ws[:1], bs[:1], x)[0], 4, symmetric=False)]
        target = run_module(m, ws, bs, x)[0]
        cfg = ReconConfig(iterations=600, learning_rate=1e-2, batch_size=16, num_batches=2, seed=seed)
        _, rep = reconstruct_module(m, ws, bs, wq, aq, (x, None), target, cfg)
        assert rep.final_loss <= rep.initial_loss

    def test_divergence_names_module(self):
        m, ws, bs, x, wq, _ = _setup(0)
        bad = x.copy()
        bad[0, 0, 0, 0] = np.nan
        cfg = ReconConfig(iterations=3, batch_size=8, num_batches=1)
        with pytest.raises(ReconstructionError, match="module 4"):
            reconstruct_module(m, ws, bs, wq, [None, None], (bad, None), run_module(m, ws, bs, x)[0], cfg, index=4)

    def test_converged_rounding_is_saturated(self):
        """Paper schedule (20k iterations, lr 1e-3): under 1% of h left undecided."""
        g = equivalent_chain(2, 8, seed=0, spatial=5)
        calib = generate_calibration(g.input_shape, 16, 4, seed=1)
        cfg = ReconConfig(iterations=20000)
        wq, aq = calibrate_quantizers(g, calib.samples, cfg)
        mod = build_modules(g, "block")[0]
        w, b = _module_params(g, mod)
        target = _forward_chunked(mod, w, b, (calib.samples, None))[0]
        _, rep = reconstruct_module(mod, w, b, wq[:2], aq[:2], (calib.samples, None), target, cfg)
        assert rep.h_saturation_fraction > 0.99


@pytest.fixture(scope="module")
def small():
    g = generate_synthetic_model(3, 4, bottleneck_at=1, seed=2, spatial=4)
    calib = generate_calibration(g.input_shape, 8, 2, seed=3)
    cfg = ReconConfig(iterations=60, trajectory_every=20)
    return g, calib, cfg


class TestPipeline:
    def test_report_shape(self, small):
        g, calib, cfg = small
        rep = run_pipeline(g, [1, 0], calib, cfg, calib.samples[:4])
        assert [(m.start, m.stop) for m in rep.modules] == [(0, 4), (4, 6)]
        assert all(m.final_loss >= 0 and m.eval_loss >= 0 for m in rep.modules)
        assert [it for it, _ in rep.modules[0].loss_trajectory] == [0, 20, 40]
        assert rep.mask == [1, 0] and rep.wall_time > 0

    def test_same_seed_same_report(self, small):
        g, calib, cfg = small
        assert run_pipeline(g, None, calib, cfg).to_json() == run_pipeline(g, None, calib, cfg).to_json()

    def test_seed_changes_report(self, small):
        g, calib, cfg = small
        assert run_pipeline(g, None, calib, cfg).to_json() != run_pipeline(g, None, calib, replace(cfg, seed=1)).to_json()

    def test_mask_length_checked(self, small):
        g, calib, cfg = small
        with pytest.raises(ValueError):
            run_pipeline(g, [1], calib, cfg)

    def test_later_modules_do_not_affect_earlier(self, small):
        g, calib, cfg = small
        altered = replace(g, weights=g.weights[:4] + [w * 1.5 for w in g.weights[4:]])
        a = run_pipeline(g, None, calib, cfg).modules
        b = run_pipeline(altered, None, calib, cfg).modules
        assert a[0].to_dict() == b[0].to_dict() and a[1].to_dict() == b[1].to_dict()
        assert a[2].final_loss != b[2].final_loss

    def test_degenerate_methods(self, small):
        g, calib, cfg = small
        assert method_config("adaround", cfg) == replace(cfg, granularity="layer")
        assert method_config("brecq", cfg) == replace(cfg, granularity="block")
        layer = run_pipeline(g, GranularityScheme.zeros(6), calib, replace(cfg, granularity="layer"))
        assert layer.to_json() == run_method(g, calib, cfg, "adaround").to_json()
        with pytest.raises(ValueError):
            method_config("gptq", cfg)

    def test_report_files(self, small, tmp_path):
        g, calib, cfg = small
        rep = run_pipeline(g, None, calib, cfg)
        rep.save(tmp_path / "r.json")
        back = ReconstructionReport.load(tmp_path / "r.json")
        assert back.to_json() == rep.to_json()
        rows = list(csv.DictReader(io.StringIO(rep.trajectories_csv())))
        assert list(rows[0]) == ["module_index", "iter", "loss"]
        assert len(rows) == sum(len(m.loss_trajectory) for m in rep.modules)
        assert all(float(r["loss"]) == dict(rep.modules[int(r["module_index"])].loss_trajectory)[int(r["iter"])] for r in rows)

    def test_budget_keeps_step_product(self):
        cfg = ReconConfig().with_budget(2000)
        assert cfg.iterations == 2000 and cfg.learning_rate == pytest.approx(1e-2)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            ReconConfig(iterations=0)
        with pytest.raises(ValueError):
            ReconConfig(qdrop_prob=1.5)
        assert ReconConfig.for_family("mobilenet").round_loss_weight == 0.1
        assert ReconConfig().iterations == 20000 and ReconConfig().num_batches == 16


def test_bottleneck_bits_lower_its_loss():
    """Raising the bottleneck block to 8-bit weights cuts that block's loss."""
    wins = 0
    for seed in range(5):
        g = generate_synthetic_model(4, 8, bottleneck_at=2, seed=seed, spatial=5)
        calib = generate_calibration(g.input_shape, 16, 2, seed=seed + 50)
        cfg = ReconConfig(seed=seed, wbits=None).with_budget(1000)
        low = run_pipeline(g, None, calib, cfg)
        blk = g.blocks[2]
        high = run_pipeline(g.with_bits({i: 8 for i in range(blk.start, blk.stop)}), None, calib, cfg)
        wins += high.modules[2].final_loss < low.modules[2].final_loss
    assert wins >= 5 * 0.9
