import numpy as np
import pytest
import torch

from samix.errors import ConfigError, DegenerateSignalError, ShapeError
from samix.evalkit import (
    SI_SDR_CAP_DB,
    EvalReport,
    build_eval_items,
    export_frozen_reps,
    finite_difference_grad_error,
    layer_weighted_sum,
    masked_accuracy,
    order_swap_consistency,
    probe_target_labeling,
    run_invariant_suite,
    si_sdr,
)
from samix.model import MaskSpec, ModelConfig, SAWavLM
from samix.trainer import build_model


class TestMaskedAccuracy:
    def test_perfect_and_zero(self):
        z = np.full((1, 4, 3), -1.0)
        labels = np.array([[0, 1, 2, 1]])
        for t in range(4):
            z[0, t, labels[0, t]] = 1.0
        mask = MaskSpec(np.ones((1, 4), dtype=bool))
        assert masked_accuracy(z, labels, mask) == 1.0
        wrong = (labels + 1) % 3
        assert masked_accuracy(z, wrong, mask) == 0.0

    def test_only_masked_frames_count(self):
        z = np.zeros((1, 4, 3))
        z[0, :, 1] = 1.0
        labels = np.array([[1, 0, 0, 1]])
        mask = np.array([[True, False, False, True]])
        assert masked_accuracy(z, labels, MaskSpec(mask)) == 1.0

    def test_tie_breaks_toward_lower_class(self):
        z = np.zeros((1, 2, 4))  # all logits equal -> class 0 everywhere
        labels = np.array([[0, 3]])
        acc = masked_accuracy(z, labels, MaskSpec(np.ones((1, 2), dtype=bool)))
        assert acc == 0.5

    def test_empty_mask_is_none(self):
        z = np.zeros((1, 3, 2))
        labels = np.zeros((1, 3), dtype=int)
        assert masked_accuracy(z, labels, MaskSpec(np.zeros((1, 3), dtype=bool))) is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            masked_accuracy(np.zeros((1, 3, 2)), np.zeros((1, 4), dtype=int),
                            MaskSpec(np.ones((1, 3), dtype=bool)))


class TestSiSdr:
    def test_known_10db(self):
        # orthogonal residual with a tenth of the target energy is +10 dB
        ref = np.zeros(100)
        ref[0] = 1.0
        noise = np.zeros(100)
        noise[1] = np.sqrt(0.1)
        assert abs(si_sdr(ref + noise, ref) - 10.0) < 1e-9

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        ref = rng.standard_normal(300)
        est = ref + 0.2 * rng.standard_normal(300)
        assert abs(si_sdr(est, ref) - si_sdr(5.0 * est, ref)) < 1e-9

    def test_exact_match_capped(self):
        x = np.random.default_rng(1).standard_normal(50)
        assert si_sdr(x, x) == SI_SDR_CAP_DB
        assert si_sdr(3.0 * x, x) == SI_SDR_CAP_DB

    def test_zero_reference_rejected(self):
        with pytest.raises(DegenerateSignalError):
            si_sdr(np.ones(10), np.zeros(10))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            si_sdr(np.ones(10), np.ones(11))


class TestLayerWeightedSum:
    def test_convex_combination(self):
        reps = [np.full((3, 2), float(i)) for i in range(3)]
        out = layer_weighted_sum(reps, [0.5, 0.25, 0.25])
        assert np.allclose(out, 0.75)

    def test_one_hot_selects_layer(self):
        reps = [np.random.default_rng(i).standard_normal((4, 3)) for i in range(3)]
        out = layer_weighted_sum(reps, [0.0, 1.0, 0.0])
        assert np.array_equal(out, reps[1])

    def test_simplex_enforced(self):
        reps = [np.zeros((2, 2))] * 2
        with pytest.raises(ConfigError):
            layer_weighted_sum(reps, [0.7, 0.7])
        with pytest.raises(ConfigError):
            layer_weighted_sum(reps, [-0.5, 1.5])
        with pytest.raises(ShapeError):
            layer_weighted_sum(reps, [1.0])


class TestGradCheck:
    def test_catches_wrong_gradient(self):
        # a loss whose hand-patched gradient is wrong must produce a large error
        x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)

        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, v):
                ctx.save_for_backward(v)
                return (v**2).sum()

            @staticmethod
            def backward(ctx, g):
                (v,) = ctx.saved_tensors
                return g * 3.0 * v  # correct would be 2 v



        err = finite_difference_grad_error(lambda: Bad.apply(x), [x])
        assert err > 0.2

    def test_correct_gradient_small_error(self):
        x = torch.tensor([0.3, -1.2, 0.8], dtype=torch.float64, requires_grad=True)
        err = finite_difference_grad_error(lambda: (x.sin() * x).sum(), [x])
        assert err < 1e-7


@pytest.fixture(scope="module")
def eval_model(toy_model_cfg):
    return build_model(toy_model_cfg, "sa_wavlm", 0)


@pytest.fixture(scope="module")
def eval_items(toy_corpus, toy_codebook, toy_model_cfg):
    return build_eval_items(toy_corpus, toy_codebook, toy_model_cfg, 8, 11,
                            crop_seconds=1.0, kind="overlap")


class TestEvalItems:
    def test_structure(self, eval_items, toy_model_cfg):
        assert len(eval_items) == 8
        for it in eval_items:
            assert it.scenario_kind == "overlap"
            assert len(it.wave) == 16000
            assert len(it.slots) == 2
            t_enc = toy_model_cfg.encoder_frames(16000)
            assert all(len(s.labels) == t_enc for s in it.slots)

    def test_determinism(self, toy_corpus, toy_codebook, toy_model_cfg, eval_items):
        again = build_eval_items(toy_corpus, toy_codebook, toy_model_cfg, 8, 11,
                                 crop_seconds=1.0, kind="overlap")
        for a, b in zip(eval_items, again):
            assert np.array_equal(a.wave, b.wave)


class TestProbeAndOrderSwap:
    def test_probe_reports_conditions_and_freezes_model(self, eval_model, eval_items):
        import samix.checkpoint as ckpt

        before = ckpt.state_hash(eval_model)
        result = probe_target_labeling(eval_model, eval_items, epochs=10)
        assert set(result) == {"correct", "interferer"}
        assert all(0.0 <= v <= 1.0 for v in result.values())
        assert ckpt.state_hash(eval_model) == before

    def test_probe_with_baseline_condition(self, eval_model, eval_items, toy_model_cfg):
        baseline = build_model(toy_model_cfg, "baseline_wavlm", 1)
        result = probe_target_labeling(eval_model, eval_items, baseline_model=baseline, epochs=5)
        assert "baseline" in result

    def test_order_swap_range(self, eval_model, eval_items):
        gap = order_swap_consistency(eval_model, eval_items)
        assert 0.0 <= gap <= 1.0

    def test_order_swap_zero_when_heads_tied(self, eval_items, toy_model_cfg):
        # with identical slot embeddings and head2 tied to head1 the swapped
        # orders produce the same distributions, so the gap vanishes
        model = build_model(toy_model_cfg, "sa_wavlm", 5)
        with torch.no_grad():
            model.head2.weight.copy_(model.head1.weight)
            model.head2.bias.copy_(model.head1.bias)
        it = eval_items[0]
        sym = type(it)(it.wave, [it.slots[0], it.slots[0]], it.scenario_kind)
        assert order_swap_consistency(model, [sym]) < 1e-6

    def test_export_frozen_reps(self, eval_model, eval_items, tmp_path, toy_model_cfg):
        it = eval_items[0]
        prefix = str(tmp_path / "reps")
        sidecar = export_frozen_reps(eval_model, it.wave, it.slots[0].embedding.vector, prefix)
        assert sidecar["layers"] == toy_model_cfg.layer_count + 1
        assert sidecar["dim"] == toy_model_cfg.dim
        raw = np.fromfile(prefix + ".bin", dtype="<f4")
        assert raw.size == sidecar["layers"] * sidecar["frames"] * sidecar["dim"]


class TestEvalReport:
    def test_pass_fail_and_json(self):
        report = EvalReport()
        report.add("a", True, value=1e-9, tolerance=1e-6)
        report.add("b", False, details="boom")
        assert not report.all_passed
        assert "PASS" in report.to_table() and "FAIL" in report.to_table()
        import json

        doc = json.loads(report.to_json())
        assert [c["check_id"] for c in doc["checks"]] == ["a", "b"]

    def test_duplicate_ids_rejected(self):
        report = EvalReport()
        report.add("a", True)
        with pytest.raises(ConfigError):
            report.add("a", True)


class TestInvariantSuite:
    def test_full_suite_passes(self):
        # run on a small config to keep the gradient checks quick
        cfg = ModelConfig(dim=16, embed_dim=8, layer_count=2, satl_layer_index=1,
                          attention_heads=2, ffn_dim=32, k=8)
        report = run_invariant_suite(model_cfg=cfg, seed=0)
        failed = [c for c in report.checks if not c["passed"]]
        assert report.all_passed, report.to_table()
        ids = {c["check_id"] for c in report.checks}
        assert {"normalization_core", "cln_collapse_to_layer_norm", "masking_exactness",
                "pit_free_ce_counter", "grad_cln", "grad_satl", "grad_smb", "grad_sa_loss",
                "codebook_determinism", "label_alignment_and_range", "simulator_fidelity",
                "checkpoint_roundtrip", "metric_properties"} <= ids

    def test_suite_survives_broken_model(self, small_cfg):
        # a sabotaged model must fail some check without crashing the suite
        torch.manual_seed(0)
        model = SAWavLM(small_cfg)
        with torch.no_grad():
            model.mask_embedding.fill_(float("nan"))
        report = run_invariant_suite(model=model, model_cfg=small_cfg, grad_checks=False)
        assert not report.all_passed
