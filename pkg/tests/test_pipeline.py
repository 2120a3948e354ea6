import numpy as np
import pytest

from _models import bundle_of, fragile_data, fragile_model
from hqp.config import RunConfig
from hqp.costs import CostCounters, compare_cost_models
from hqp.errors import ConfigError
from hqp.graph import count_flops
from hqp.pipeline import (
    benchmark_latency,
    compression_report,
    model_from_config,
    run_baseline_variants,
    run_hqp,
)
from hqp.pruning import PruneConfig
from hqp.quantization import quantize_model
from hqp.serialize import serialized_weight_bytes


@pytest.fixture(scope="module")
def hqp_run(trained_resnet, bundle):
    return run_hqp(trained_resnet, bundle, PruneConfig())


class TestRunHQP:
    def test_constraint_on_val(self, hqp_run):
        _, state, _ = hqp_run
        o = state.outcome
        assert o.val_baseline - o.val_pruned <= o.delta_max
        assert state.accuracy == o.val_pruned

    def test_counter_identity(self, hqp_run, bundle):
        _, state, c = hqp_run
        n_val, n_calib = len(bundle.val), len(bundle.calib)
        assert c.grad_passes == n_calib
        assert c.prune_steps == state.steps
        assert c.loop_inference_passes == state.steps * n_val
        assert c.inference_passes == c.loop_inference_passes + n_calib
        _, c_hqp, _ = compare_cost_models(c, 5, len(bundle.train), c_grad=3.0, c_inf=1.0)
        assert c_hqp == n_calib * 3.0 + state.steps * n_val * 1.0

    def test_pruned_model_smaller(self, hqp_run, trained_resnet):
        qmodel, state, _ = hqp_run
        if state.theta > 0:
            assert count_flops(state.model) < count_flops(trained_resnet)
        assert qmodel.quantized

    def test_int8_payload_quarter(self, hqp_run):
        qmodel, state, _ = hqp_run
        assert serialized_weight_bytes(qmodel) == pytest.approx(
            serialized_weight_bytes(state.model) / 4, rel=0.02)

    def test_deterministic(self, hqp_run, trained_resnet, bundle):
        qmodel, state, c = run_hqp(trained_resnet, bundle, PruneConfig())
        assert qmodel == hqp_run[0]
        assert state.victims == hqp_run[1].victims
        assert c.as_dict() == hqp_run[2].as_dict()


class TestZeroBudget:
    def test_fragile_equals_q8_only(self):
        model, bundle = fragile_model(), bundle_of(fragile_data)
        qmodel, state, c = run_hqp(model, bundle, PruneConfig(delta_max=0.0))
        assert state.theta == 0.0 and state.victims == []
        assert qmodel == quantize_model(model, bundle.calib)
        assert c.prune_steps == 1


class TestBaselines:
    def test_variants(self, trained_resnet, bundle):
        fp32, q8, p50 = run_baseline_variants(trained_resnet, bundle)
        assert (fp32.method, q8.method, p50.method) == ("FP32", "Q8", "P50")
        assert fp32.model is trained_resnet and q8.model.quantized
        ratio = serialized_weight_bytes(q8.model) / serialized_weight_bytes(fp32.model)
        assert ratio == pytest.approx(0.25, abs=0.01)
        assert p50.theta >= 0.5


class TestBenchmark:
    def test_fields(self, trained_convnet):
        s = benchmark_latency(trained_convnet, warmup=1, reps=7)
        assert s.reps == 7 and 0 < s.p50_ms <= s.p95_ms
        assert s.flops == count_flops(trained_convnet)
        assert s.weight_bytes == serialized_weight_bytes(trained_convnet)
        assert s.p95_over_p50 >= 1.0

    def test_rejects_zero_reps(self, trained_convnet):
        with pytest.raises(ValueError):
            benchmark_latency(trained_convnet, reps=0)


class TestConfigHelpers:
    def test_unknown_arch(self):
        with pytest.raises(ConfigError):
            model_from_config(RunConfig(arch="vgg"))

    def test_convnet(self):
        m = model_from_config(RunConfig(arch="convnet", width_multiplier=0.25))
        assert m.input_shape == (1, 16, 16)


class TestCompressionReport:
    def test_rows_and_counters(self, trained_convnet, small_bundle):
        cfg = RunConfig(reps=3, warmup=1)
        report, qmodel, state = compression_report(trained_convnet, small_bundle, cfg)
        assert [r.method for r in report.rows] == ["FP32", "Q8", "P50", "HQP"]
        hqp = report.row("HQP")
        assert hqp.sparsity_pct == pytest.approx(100 * state.theta)
        assert report.counters["grad_passes"] == len(small_bundle.calib)
        assert hqp.energy_ratio == hqp.speedup
        assert any("pruning-stage drop" in n for n in report.notes)
