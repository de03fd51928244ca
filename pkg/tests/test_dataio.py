import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medmap.dataio import (
    HEADER_SIZE,
    MultiModalSample,
    ScenarioMask,
    SyntheticSpec,
    dataset_manifest_hash,
    enumerate_scenarios,
    generate_dataset,
    load_dataset,
    read_sample,
    split_of,
    split_samples,
    write_dataset,
    write_sample,
)
from medmap.errors import FormatError, ValidationError


def dataset_bytes(samples):
    chunks = []
    for s in samples:
        chunks.append(s.label.tobytes())
        for m in s.modalities:
            chunks.append(m.tobytes())
    return b"".join(chunks)


class TestGeneration:
    def test_empty_dataset(self):
        spec = SyntheticSpec(n_samples=0)
        assert generate_dataset(spec, seed=3) == []

    def test_deterministic_given_spec_and_seed(self):
        spec = SyntheticSpec(n_samples=6, gap_strength=1.5)
        a = generate_dataset(spec, seed=7)
        b = generate_dataset(spec, seed=7)
        assert dataset_bytes(a) == dataset_bytes(b)

    def test_different_seeds_differ(self):
        spec = SyntheticSpec(n_samples=6)
        a = generate_dataset(spec, seed=7)
        b = generate_dataset(spec, seed=8)
        assert dataset_bytes(a) != dataset_bytes(b)

    def test_identical_rows_no_noise_no_gap_gives_identical_modalities(self):
        # with no noise, no shift, and equal contrast rows the renderer
        # cannot distinguish modalities
        row = (0.1, 0.5, 0.7, 0.9)
        spec = SyntheticSpec(
            contrast_profile=(row, row, row, row),
            noise_sigma=0.0,
            gap_strength=0.0,
            n_samples=4,
        )
        for sample in generate_dataset(spec, seed=5):
            for m in sample.modalities[1:]:
                np.testing.assert_array_equal(m, sample.modalities[0])

    def test_nesting_invariant(self):
        spec = SyntheticSpec(n_samples=24, height=24, width=40)
        for sample in generate_dataset(spec, seed=1):
            et = sample.label == 3
            tc = et | (sample.label == 1)
            wt = tc | (sample.label == 2)
            assert np.all(~et | tc)
            assert np.all(~tc | wt)
            sample.check_nesting()

    def test_label_values_in_range(self):
        spec = SyntheticSpec(n_samples=8)
        for sample in generate_dataset(spec, seed=2):
            assert set(np.unique(sample.label)) <= {0, 1, 2, 3}

    def test_gap_strength_zero_is_identity_affine(self):
        row_spec = SyntheticSpec(n_samples=3, noise_sigma=0.0, gap_strength=0.0)
        shifted = SyntheticSpec(n_samples=3, noise_sigma=0.0, gap_strength=2.0)
        base = generate_dataset(row_spec, seed=4)
        moved = generate_dataset(shifted, seed=4)
        # same geometry, different intensities for at least one modality
        np.testing.assert_array_equal(base[0].label, moved[0].label)
        assert any(
            not np.array_equal(a, b)
            for a, b in zip(base[0].modalities, moved[0].modalities)
        )

    @pytest.mark.parametrize(
        "field,value",
        [
            ("n_modalities", 0),
            ("height", 4),
            ("width", 7),
            ("noise_sigma", -0.1),
            ("gap_strength", -1.0),
            ("n_samples", -2),
        ],
    )
    def test_invalid_spec_names_field(self, field, value):
        spec = SyntheticSpec(**{field: value})
        with pytest.raises(ValidationError, match=field):
            generate_dataset(spec, seed=0)

    def test_bad_contrast_profile_shape(self):
        spec = SyntheticSpec(contrast_profile=((0.1, 0.2, 0.3),) * 4)
        with pytest.raises(ValidationError, match="contrast_profile"):
            spec.validate()


class TestScenarios:
    def test_four_modalities_give_fifteen_masks(self):
        assert len(enumerate_scenarios(4)) == 15

    def test_single_modality(self):
        assert enumerate_scenarios(1) == [ScenarioMask((True,))]

    def test_three_modalities_brute_force(self):
        # oracle: enumerate non-empty subsets independently
        expected = set()
        for r in range(1, 4):
            expected.update(itertools.combinations(range(3), r))
        got = {m.indices() for m in enumerate_scenarios(3)}
        assert got == expected
        assert len(got) == 7

    def test_ordering_popcount_then_lexicographic(self):
        masks = enumerate_scenarios(4)
        keys = [(m.n_present, m.indices()) for m in masks]
        assert keys == sorted(keys)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=1, max_value=8))
    def test_count_and_uniqueness(self, n):
        masks = enumerate_scenarios(n)
        assert len(masks) == 2**n - 1
        assert len({m.present for m in masks}) == len(masks)
        assert all(m.n_present >= 1 for m in masks)

    def test_zero_modalities_rejected(self):
        with pytest.raises(ValidationError):
            enumerate_scenarios(0)

    def test_all_absent_mask_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioMask((False, False))

    def test_mask_from_names(self):
        mask = ScenarioMask.from_names(4, ["T1", "Flair"])
        assert mask.indices() == (0, 3)
        with pytest.raises(ValidationError):
            ScenarioMask.from_names(4, ["T9"])


class TestSampleFormat:
    def test_round_trip_identity(self, small_dataset, tmp_path):
        sample = small_dataset[0]
        path = tmp_path / f"{sample.sample_id}.mms"
        write_sample(sample, path)
        assert read_sample(path) == sample

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.mms"
        path.write_bytes(b"NOPE" + b"\x00" * 60)
        with pytest.raises(FormatError) as err:
            read_sample(path)
        assert err.value.offset == 0

    def test_truncated_file(self, small_dataset, tmp_path):
        sample = small_dataset[0]
        path = tmp_path / "trunc.mms"
        write_sample(sample, path)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(FormatError):
            read_sample(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "tiny.mms"
        path.write_bytes(b"MMS1\x01")
        with pytest.raises(FormatError) as err:
            read_sample(path)
        assert err.value.offset == 5  # detection point: end of the short file

    def test_file_size_arithmetic(self, tmp_path):
        # 24-byte header + J*H*W float32 + H*W labels
        spec = SyntheticSpec(n_samples=1, height=32, width=32)
        sample = generate_dataset(spec, seed=0)[0]
        path = tmp_path / "size.mms"
        write_sample(sample, path)
        assert path.stat().st_size == HEADER_SIZE + 4 * 32 * 32 * 4 + 32 * 32

    def test_bad_version(self, small_dataset, tmp_path):
        sample = small_dataset[0]
        path = tmp_path / "ver.mms"
        write_sample(sample, path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError) as err:
            read_sample(path)
        assert err.value.offset == 4


class TestDatasetDirectory:
    def test_write_load_round_trip(self, small_dataset, tmp_path):
        spec = SyntheticSpec(n_samples=16, height=16, width=16,
                             gap_strength=1.0, noise_sigma=0.05)
        write_dataset(small_dataset, spec, 11, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert loaded == small_dataset

    def test_manifest_hash_is_reproducible(self, small_dataset, tmp_path):
        spec = SyntheticSpec(n_samples=16, height=16, width=16,
                             gap_strength=1.0, noise_sigma=0.05)
        write_dataset(small_dataset, spec, 11, tmp_path / "a")
        write_dataset(small_dataset, spec, 11, tmp_path / "b")
        assert dataset_manifest_hash(tmp_path / "a") == dataset_manifest_hash(tmp_path / "b")

    def test_split_is_stable_and_covers(self):
        ids = [f"s{i:04d}" for i in range(500)]
        first = [split_of(i) for i in ids]
        second = [split_of(i) for i in ids]
        assert first == second
        counts = {k: first.count(k) for k in ("train", "val", "test")}
        assert counts["train"] > counts["val"] > 0
        assert counts["test"] > 0
        # roughly 70/15/15
        assert 0.6 < counts["train"] / len(ids) < 0.8

    def test_split_samples_partitions(self, small_dataset):
        parts = split_samples(small_dataset)
        total = sum(len(v) for v in parts.values())
        assert total == len(small_dataset)


class TestSampleValidation:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            MultiModalSample(
                [np.zeros((4, 4), np.float32), np.zeros((4, 5), np.float32)],
                np.zeros((4, 4), np.uint8),
                "x",
            )

    def test_label_range_rejected(self):
        label = np.full((4, 4), 7, np.uint8)
        with pytest.raises(ValidationError):
            MultiModalSample([np.zeros((4, 4), np.float32)], label, "x")
