import copy

import numpy as np
import pytest
import torch

from medmap.dataio import ScenarioMask, SyntheticSpec, generate_dataset
from medmap.errors import ConfigurationError, ValidationError
from medmap.latent_align import AnchorSpec, AnchorVariant
from medmap.nets import EncoderConfig, EncoderStyle, param_checksum
from medmap.regimes import (
    Regime,
    RegimeConfig,
    init_adaptive_weights,
    train_base,
    train_da,
    train_kd,
    train_sls,
)

ENC = EncoderConfig(style=EncoderStyle.SHARED_TSTAR, base_channels=2, latent_dim=8, depth=2)


@pytest.fixture(scope="module")
def train_data():
    spec = SyntheticSpec(n_samples=12, height=16, width=16, gap_strength=1.5, noise_sigma=0.05)
    return generate_dataset(spec, seed=21)


def base_cfg(**over):
    defaults = dict(
        regime=Regime.BASE,
        anchor=AnchorSpec(AnchorVariant.ADAPTIVE, weights_raw=init_adaptive_weights(4, 3)),
        alpha=0.125,
        encoder=ENC,
        epochs=2,
        batch_size=6,
        learning_rate=0.05,
        seed=0,
    )
    defaults.update(over)
    return RegimeConfig(**defaults)


class TestAdaptiveWeightInit:
    def test_near_one_hot_at_prior(self):
        raw = init_adaptive_weights(4, prior=3)
        w = torch.softmax(torch.tensor(raw), dim=0).numpy()
        np.testing.assert_allclose(w, [0.001, 0.001, 0.001, 0.997], atol=1e-9)

    def test_uniform_without_prior(self):
        raw = init_adaptive_weights(4)
        w = torch.softmax(torch.tensor(raw), dim=0).numpy()
        np.testing.assert_allclose(w, 0.25, atol=1e-12)

    def test_single_modality(self):
        raw = init_adaptive_weights(1, prior=0)
        w = torch.softmax(torch.tensor(raw), dim=0).numpy()
        np.testing.assert_allclose(w, [1.0])

    def test_bad_prior_rejected(self):
        with pytest.raises(ValidationError):
            init_adaptive_weights(3, prior=3)


class TestBaseRegime:
    def test_medmap_off_has_no_align_trace(self, train_data):
        res = train_base(train_data, base_cfg(medmap_enabled=False))
        assert "align" not in res.loss_traces
        assert set(res.loss_traces) == {"seg", "total"}

    def test_medmap_on_logs_align_trace(self, train_data):
        res = train_base(train_data, base_cfg())
        assert "align" in res.loss_traces
        assert len(res.loss_traces["align"]) == 2

    def test_alpha_zero_matches_medmap_off_trajectories(self, train_data):
        on = train_base(train_data, base_cfg(alpha=0.0))
        off = train_base(train_data, base_cfg(medmap_enabled=False))
        np.testing.assert_allclose(on.loss_traces["total"], off.loss_traces["total"], atol=1e-9)
        np.testing.assert_allclose(on.loss_traces["seg"], off.loss_traces["seg"], atol=1e-9)
        # identical trajectories for every shared parameter (the alpha=0 run
        # additionally carries the inert anchor logits)
        off_state = off.model.state_dict()
        for name, tensor in on.model.state_dict().items():
            if name == "anchor_logits":
                continue
            torch.testing.assert_close(tensor, off_state[name], rtol=0, atol=0)

    def test_default_alpha_is_one_eighth(self):
        cfg = base_cfg()
        assert cfg.alpha == 0.125
        assert RegimeConfig.from_dict(
            {"regime": "base", "anchor": {"variant": "normal"}}
        ).alpha == 0.125

    def test_total_equals_sum_of_parts(self, train_data):
        res = train_base(train_data, base_cfg())
        for epoch in range(len(res.loss_traces["total"])):
            parts = sum(
                res.loss_traces[k][epoch] for k in res.loss_traces if k != "total"
            )
            assert res.loss_traces["total"][epoch] == pytest.approx(parts, abs=1e-6)

    def test_trace_lengths_match_epochs_and_are_finite(self, train_data):
        res = train_base(train_data, base_cfg(epochs=3))
        for trace in res.loss_traces.values():
            assert len(trace) == 3
            assert np.all(np.isfinite(trace))
        assert len(res.gap_trace) == 3

    def test_determinism_same_seed_same_checksum(self, train_data):
        a = train_base(train_data, base_cfg(seed=5))
        b = train_base(train_data, base_cfg(seed=5))
        c = train_base(train_data, base_cfg(seed=6))
        assert param_checksum(a.model) == param_checksum(b.model)
        assert param_checksum(a.model) != param_checksum(c.model)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValidationError):
            train_base([], base_cfg())

    def test_adaptive_weights_stay_on_simplex(self, train_data):
        res = train_base(train_data, base_cfg(epochs=3, learning_rate=0.2))
        anchor = AnchorSpec(AnchorVariant.ADAPTIVE, weights_raw=res.model.anchor_logits.detach())
        w = anchor.mixture_weights()
        assert float(w.sum()) == pytest.approx(1.0, abs=1e-9)
        assert bool((w >= 0).all())


class TestAlignmentReducesGap:
    @pytest.mark.parametrize("variant", ["adaptive", "fixed", "normal"])
    def test_any_alignment_loss_reduces_offdiag_kl(self, variant):
        spec = SyntheticSpec(n_samples=16, height=16, width=16, gap_strength=2.0,
                             noise_sigma=0.05)
        data = generate_dataset(spec, seed=31)
        if variant == "adaptive":
            anchor = AnchorSpec(AnchorVariant.ADAPTIVE, weights_raw=init_adaptive_weights(4, 3))
        elif variant == "fixed":
            anchor = AnchorSpec(AnchorVariant.FIXED_K, k=2)
        else:
            anchor = AnchorSpec(AnchorVariant.NORMAL)
        cfg = base_cfg(anchor=anchor, epochs=6, learning_rate=0.1, seed=1, alpha=0.5)
        res = train_base(data, cfg)
        assert res.gap_trace[-1].mean_offdiag_kl() < res.initial_gap.mean_offdiag_kl()


class TestKdRegime:
    @pytest.fixture(scope="class")
    def teacher(self, train_data):
        res = train_base(train_data, base_cfg(seed=9))
        return res.model

    def kd_cfg(self, **over):
        defaults = dict(
            regime=Regime.KD,
            student_mask=ScenarioMask((True, False, False, False)),
            seed=2,
        )
        defaults.update(over)
        return base_cfg(**defaults)

    def test_teacher_frozen_checksums_equal(self, train_data, teacher):
        before = param_checksum(teacher)
        res = train_kd(train_data, teacher, self.kd_cfg())
        assert param_checksum(teacher) == before
        assert res.extras["teacher_checksum_before"] == res.extras["teacher_checksum_after"]

    def test_student_initialized_to_teacher_has_zero_divergence(self, train_data, teacher):
        cfg = self.kd_cfg(student_mask=ScenarioMask.full(4))
        res = train_kd(train_data, teacher, cfg, init_student_from_teacher=True)
        assert res.first_step_terms["kd"] < 1e-6

    def test_loss_terms_are_seg_and_kd(self, train_data, teacher):
        res = train_kd(train_data, teacher, self.kd_cfg())
        assert set(res.loss_traces) == {"seg", "kd", "total"}

    def test_missing_mask_rejected(self, train_data, teacher):
        with pytest.raises(ConfigurationError):
            train_kd(train_data, teacher, self.kd_cfg(student_mask=None))

    def test_latent_width_mismatch_rejected(self, train_data, teacher):
        bad = self.kd_cfg(
            encoder=EncoderConfig(style=EncoderStyle.SHARED_TSTAR, base_channels=2,
                                  latent_dim=4, depth=2)
        )
        with pytest.raises(ConfigurationError):
            train_kd(train_data, teacher, bad)


class TestSlsRegime:
    def sls_cfg(self, **over):
        defaults = dict(regime=Regime.SLS, seed=3)
        defaults.update(over)
        return base_cfg(**defaults)

    def test_fusion_consistency_zero_with_single_modality_data(self):
        spec = SyntheticSpec(n_modalities=1, n_samples=8, height=16, width=16)
        data = generate_dataset(spec, seed=41)
        cfg = self.sls_cfg(anchor=AnchorSpec(AnchorVariant.NORMAL), epochs=1)
        res = train_sls(data, cfg)
        assert res.first_step_terms["fuse"] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(res.loss_traces["fuse"], 0.0, atol=1e-12)

    def test_disabling_medmap_keeps_backbone_composition(self, train_data):
        res = train_sls(train_data, self.sls_cfg(medmap_enabled=False))
        assert set(res.loss_traces) == {"seg", "fuse", "total"}

    def test_medmap_adds_align_term(self, train_data):
        res = train_sls(train_data, self.sls_cfg())
        assert set(res.loss_traces) == {"seg", "fuse", "align", "total"}

    def test_deterministic_scenario_stream(self, train_data):
        a = train_sls(train_data, self.sls_cfg(seed=7))
        b = train_sls(train_data, self.sls_cfg(seed=7))
        assert param_checksum(a.model) == param_checksum(b.model)
        assert a.loss_traces == b.loss_traces


class TestDaRegime:
    @pytest.fixture(scope="class")
    def reference(self, train_data):
        return train_base(train_data, base_cfg(seed=13)).model

    def da_cfg(self, **over):
        defaults = dict(
            regime=Regime.DA,
            student_mask=ScenarioMask((True, True, False, False)),
            seed=4,
        )
        defaults.update(over)
        return base_cfg(**defaults)

    def test_identical_branches_have_zero_mi_at_step_zero(self, train_data, reference):
        # masked branch == full branch at init and both see all modalities
        cfg = self.da_cfg(student_mask=ScenarioMask.full(4), medmap_enabled=False)
        res = train_da(train_data, reference, cfg)
        del res  # only the construction below matters
        # construct the degenerate case explicitly: reference as both branches
        from medmap.nets import SegmentationModel
        import medmap.regimes as regimes_mod

        images, labels = None, None
        # reuse internals: run one probe step with the masked branch forced
        # to the reference weights
        full_branch = copy.deepcopy(reference)
        masked_branch = copy.deepcopy(reference)
        mask = ScenarioMask.full(4)
        from medmap.nets import samples_to_tensors
        from medmap.latent_align import symmetric_gaussian_kl

        images, labels = samples_to_tensors(train_data[:6])
        stages_f = full_branch.encode_stages(images, mask)
        stages_m = masked_branch.encode_stages(images, mask)
        mi_terms = [
            float(symmetric_gaussian_kl(sf, sm).detach())
            for j in mask.indices()
            for sf, sm in zip(stages_f[j], stages_m[j])
        ]
        assert max(mi_terms) == pytest.approx(0.0, abs=1e-9)

    def test_both_branches_change(self, train_data, reference):
        res = train_da(train_data, reference, self.da_cfg())
        full_model = res.extras["full_branch_model"]
        assert res.extras["full_branch_checksum"] != res.extras["reference_checksum"]
        assert param_checksum(res.model) != param_checksum(full_model)
        # deployed model is the masked branch, co-trained (changed) as well
        fresh = train_da(train_data, reference, self.da_cfg())
        assert param_checksum(fresh.model) == param_checksum(res.model)

    def test_loss_terms(self, train_data, reference):
        res = train_da(train_data, reference, self.da_cfg())
        assert set(res.loss_traces) == {"seg_full", "seg_masked", "mi", "align", "total"}

    def test_reference_required(self, train_data):
        from medmap.regimes import train

        with pytest.raises(ConfigurationError):
            train(train_data, self.da_cfg())


class TestMetricsDict:
    def test_json_round_trippable_and_complete(self, train_data):
        import json

        res = train_base(train_data, base_cfg())
        metrics = res.metrics_dict()
        encoded = json.dumps(metrics, sort_keys=True)
        back = json.loads(encoded)
        assert back["config"]["alpha"] == 0.125
        assert len(back["loss_traces"]["total"]) == 2
        assert len(back["gap_trace"]) == 2
        assert "param_checksum" in back
        assert len(back["final_latents"]) == 4
