import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from medmap.dataio import ScenarioMask, SyntheticSpec, generate_dataset
from medmap.errors import ReportError, ValidationError
from medmap.evalrep import (
    DiceTable,
    RunRecord,
    composite_classes,
    dice,
    evaluate_all_scenarios,
    mask_display_string,
    pair_delta,
    project_embeddings,
    render_report,
    write_dice_csv,
)
from medmap.latent_align import LatentBatch
from medmap.nets import EncoderConfig, EncoderStyle, SegmentationModel


def make_model(seed=0):
    cfg = EncoderConfig(style=EncoderStyle.SHARED_TSTAR, base_channels=2, latent_dim=8, depth=2)
    return SegmentationModel(4, cfg, seed=seed)


@pytest.fixture(scope="module")
def eval_samples():
    spec = SyntheticSpec(n_samples=6, height=16, width=16, noise_sigma=0.05)
    return generate_dataset(spec, seed=51)


class TestDice:
    def test_perfect_prediction_is_100(self):
        gt = np.zeros((8, 8), np.uint8)
        gt[2:5, 2:5] = 3
        assert dice(gt, gt, {3}) == 100.0

    def test_disjoint_regions_are_0(self):
        a = np.zeros((8, 8), np.uint8)
        b = np.zeros((8, 8), np.uint8)
        a[0, 0] = 1
        b[7, 7] = 1
        assert dice(a, b, {1}) == 0.0

    def test_half_overlap_is_50(self):
        # |P| = |G| = 4, |P ∩ G| = 2 on a constructed 8x8 mask
        p = np.zeros((8, 8), np.uint8)
        g = np.zeros((8, 8), np.uint8)
        p[0, 0:4] = 1
        g[0, 2:6] = 1
        assert dice(p, g, {1}) == 50.0

    def test_empty_vs_empty_is_100_by_convention(self):
        z = np.zeros((4, 4), np.uint8)
        assert dice(z, z, {3}) == 100.0

    def test_empty_vs_nonempty_is_0(self):
        z = np.zeros((4, 4), np.uint8)
        g = z.copy()
        g[1, 1] = 3
        assert dice(z, g, {3}) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            dice(np.zeros((4, 4)), np.zeros((4, 5)), {1})

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 4, (10, 10))
        b = rng.integers(0, 4, (10, 10))
        for cs in composite_classes().values():
            assert dice(a, b, cs) == dice(b, a, cs)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_permutation_invariance_and_range(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 4, (6, 6))
        b = rng.integers(0, 4, (6, 6))
        perm = rng.permutation(36)
        a_p = a.reshape(-1)[perm].reshape(6, 6)
        b_p = b.reshape(-1)[perm].reshape(6, 6)
        value = dice(a, b, {1, 3})
        assert 0.0 <= value <= 100.0
        assert value == dice(a_p, b_p, {1, 3})


class TestCompositeClasses:
    def test_nesting(self):
        cc = composite_classes()
        assert cc["ET"] <= cc["TC"] <= cc["WT"]

    def test_edema_analog_only_in_wt(self):
        cc = composite_classes()
        assert 2 in cc["WT"]
        assert 2 not in cc["TC"] and 2 not in cc["ET"]

    def test_et_is_singleton(self):
        assert composite_classes()["ET"] == {3}


class TestEvaluateAllScenarios:
    def test_fifteen_rows_for_four_modalities(self, eval_samples):
        table = evaluate_all_scenarios(make_model(), eval_samples)
        assert len(table.masks) == 15
        for c in ("WT", "TC", "ET"):
            assert len(table.scores[c]) == 15

    def test_deterministic_evaluation(self, eval_samples):
        model = make_model()
        a = evaluate_all_scenarios(model, eval_samples)
        b = evaluate_all_scenarios(model, eval_samples)
        assert a.scores == b.scores
        assert a.grand_average == b.grand_average

    def test_marginals_recompute_exactly(self, eval_samples):
        table = evaluate_all_scenarios(make_model(), eval_samples)
        J = 4
        for cname, vals in table.scores.items():
            for n_missing, avg in table.avg_by_missing[cname].items():
                cells = [
                    v for m, v in zip(table.masks, vals) if J - m.n_present == n_missing
                ]
                assert avg == pytest.approx(float(np.mean(cells)), abs=1e-9)
            assert table.total_avg[cname] == pytest.approx(float(np.mean(vals)), abs=1e-9)
        assert table.grand_average == pytest.approx(
            float(np.mean([table.total_avg[c] for c in table.scores])), abs=1e-9
        )

    def test_cells_match_independent_recount(self, eval_samples):
        # spot-check: recompute three random cells from raw masks
        model = make_model()
        table = evaluate_all_scenarios(model, eval_samples)
        rng = np.random.default_rng(7)
        classes = composite_classes()
        from medmap.nets import samples_to_tensors

        images, _ = samples_to_tensors(eval_samples)
        for _ in range(3):
            si = int(rng.integers(len(table.masks)))
            cname = ("WT", "TC", "ET")[int(rng.integers(3))]
            mask = table.masks[si]
            with torch.no_grad():
                logits, _ = model(images, mask)
            pred = logits.argmax(dim=1).numpy()
            recount = float(
                np.mean(
                    [
                        dice(pred[i], eval_samples[i].label, classes[cname])
                        for i in range(len(eval_samples))
                    ]
                )
            )
            assert table.scores[cname][si] == pytest.approx(recount, abs=1e-9)


class TestProjectEmbeddings:
    def test_identical_features_project_identically(self):
        rng = np.random.default_rng(1)
        z = torch.tensor(rng.standard_normal((6, 5)))
        batch = LatentBatch([z, z.clone()], ScenarioMask((True, True)))
        coords, fallback = project_embeddings(batch)
        assert not fallback
        np.testing.assert_allclose(coords[0], coords[1])
        assert coords[0].shape == (6, 2)

    def test_mean_shift_preserved_up_to_sign(self):
        rng = np.random.default_rng(2)
        base = rng.standard_normal((40, 6))
        shift = np.zeros(6)
        shift[0] = 8.0  # dominant direction
        batch = LatentBatch(
            [torch.tensor(base), torch.tensor(base + shift)],
            ScenarioMask((True, True)),
        )
        coords, fallback = project_embeddings(batch)
        assert not fallback
        # the separation must survive projection along the top direction
        gap = np.abs(coords[1][:, 0].mean() - coords[0][:, 0].mean())
        assert gap == pytest.approx(8.0, rel=0.1)

    def test_rank_deficient_covariance_falls_back(self):
        z = torch.zeros((5, 3), dtype=torch.float64)
        batch = LatentBatch([z, z.clone()], ScenarioMask((True, True)))
        coords, fallback = project_embeddings(batch)
        assert fallback
        assert coords[0].shape == (5, 2)

    def test_single_batch_rejected(self):
        z = torch.zeros((1, 3))
        batch = LatentBatch([z], ScenarioMask((True,)))
        with pytest.raises(ValidationError):
            project_embeddings(batch)


class TestMaskDisplay:
    def test_display_order_flair_t1_t1ce_t2(self):
        # internal order is (T1, T2, T1ce, Flair)
        only_flair = ScenarioMask((False, False, False, True))
        assert mask_display_string(only_flair) == "oxxx"
        only_t2 = ScenarioMask((False, True, False, False))
        assert mask_display_string(only_t2) == "xxxo"
        full = ScenarioMask.full(4)
        assert mask_display_string(full) == "oooo"


def simple_table(offset=0.0):
    from medmap.dataio import enumerate_scenarios

    masks = enumerate_scenarios(4)
    scores = {
        "WT": [50.0 + offset + i for i in range(15)],
        "TC": [40.0 + offset + i for i in range(15)],
        "ET": [30.0 + offset + i for i in range(15)],
    }
    return DiceTable.from_scores(masks, scores)


class TestRenderReport:
    def run_record(self, name, medmap_on, offset=0.0, dataset_hash="h0"):
        config = {"regime": "sls", "alpha": 0.125, "medmap_enabled": medmap_on}
        metrics = {
            "loss_traces": {"seg": [2.0, 1.5], "total": [2.0, 1.5]},
            "mean_offdiag_kl_trace": [1.0, 0.8],
        }
        return RunRecord(name, config, simple_table(offset), metrics, dataset_hash)

    def test_empty_results_error_not_empty_file(self, tmp_path):
        with pytest.raises(ReportError):
            render_report([], tmp_path)
        assert not (tmp_path / "summary.json").exists()

    def test_paired_runs_get_delta_tables(self, tmp_path):
        with_rec = self.run_record("sls_on", True, offset=3.0)
        without_rec = self.run_record("sls_off", False)
        summary = render_report([with_rec, without_rec], tmp_path)
        assert len(summary["pairs"]) == 1
        assert summary["pairs"][0]["grand_average_delta"] == pytest.approx(3.0)
        delta_csv = tmp_path / "dice_delta_sls_on_vs_sls_off.csv"
        assert delta_csv.exists()
        lines = [l for l in delta_csv.read_text().splitlines() if l and not l.startswith("#")]
        header, rows = lines[0], lines[1:]
        assert header == "scenario,present_mask,WT,TC,ET"
        for row in rows:
            cells = row.split(",")
            assert float(cells[2]) == pytest.approx(3.0)

    def test_delta_is_exact_per_cell(self, tmp_path):
        a = self.run_record("on", True, offset=1.25)
        b = self.run_record("off", False)
        render_report([a, b], tmp_path)
        text = (tmp_path / "dice_delta_on_vs_off.csv").read_text()
        for i, line in enumerate(l for l in text.splitlines()[1:] if not l.startswith("#")):
            got = [float(x) for x in line.split(",")[2:]]
            expect = [
                a.dice_table.scores[c][i] - b.dice_table.scores[c][i]
                for c in ("WT", "TC", "ET")
            ]
            assert got == expect

    def test_single_run_no_delta(self, tmp_path):
        summary = render_report([self.run_record("solo", True)], tmp_path)
        assert summary["pairs"] == []
        assert (tmp_path / "dice_solo.csv").exists()
        assert (tmp_path / "loss_solo.png").exists()
        assert (tmp_path / "gap_solo.png").exists()

    def test_conflicting_dataset_manifests_rejected(self, tmp_path):
        a = self.run_record("a", True, dataset_hash="h0")
        b = self.run_record("b", False, dataset_hash="h1")
        with pytest.raises(ReportError):
            render_report([a, b], tmp_path)

    def test_mismatched_pair_rejected_with_config_names(self):
        a = self.run_record("a", True)
        b = self.run_record("b", False)
        b.config["alpha"] = 0.5
        with pytest.raises(ReportError, match="alpha"):
            pair_delta(a, b)

    def test_summary_format_and_footer(self, tmp_path):
        summary = render_report([self.run_record("solo", True)], tmp_path)
        assert summary["format"] == "MMREP1"
        loaded = json.loads((tmp_path / "summary.json").read_text())
        assert loaded["empty_region_dice"] == 100.0
        csv_text = (tmp_path / "dice_solo.csv").read_text()
        assert csv_text.rstrip().endswith("# empty_region_dice=100")


class TestDiceCsv:
    def test_csv_round_trip(self, tmp_path):
        table = simple_table()
        path = tmp_path / "dice.csv"
        write_dice_csv(table, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "scenario,present_mask,WT,TC,ET"
        data_rows = [l for l in lines[1:] if not l.startswith("#")]
        assert len(data_rows) == 15
        for i, row in enumerate(data_rows):
            cells = row.split(",")
            assert float(cells[2]) == table.scores["WT"][i]

    def test_table_rejects_out_of_range(self):
        from medmap.dataio import enumerate_scenarios

        masks = enumerate_scenarios(2)
        with pytest.raises(ValidationError):
            DiceTable.from_scores(masks, {"WT": [0, 50, 101], "TC": [0, 0, 0], "ET": [0, 0, 0]})
