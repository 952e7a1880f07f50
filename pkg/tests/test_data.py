import json
import logging

import numpy as np
import pytest

from conftest import PROTOCOL, random_acquisition, write_protocol_files
from retifuse.data import (
    PAPER_PATIENT_FRACTIONS, SPLITS, Acquisition, AlignmentError, DataError, DatasetSplit, InfeasibleSplitError,
    ManifestRecord, labels_of, load_manifest, min_max, preprocess, resample, save_manifest, split_by_patient,
    write_dataset,
)


def _cohort(n_patients, per_patient=1, positive_every=2):
    out = []
    for p in range(n_patients):
        for j in range(per_patient):
            grade = 4 if p % positive_every == 0 else 1
            out.append(Acquisition(f"A{p:03d}_{j}", f"P{p:03d}", grade))
    return out


def check_split_invariants(split, acqs):
    by_id = {a.acquisition_id: a for a in acqs}
    all_ids = split.train + split.val + split.test
    assert sorted(all_ids) == sorted(by_id)
    owners = {}
    for name in SPLITS:
        for i in split.ids(name):
            assert owners.setdefault(by_id[i].patient_id, name) == name
        assert set(labels_of(split.select(acqs, name))) == {0, 1}


class TestSplit:
    def test_eight_patients_quarters(self):
        acqs = _cohort(8)
        split = split_by_patient(acqs, (0.5, 0.25, 0.25), seed=0)
        assert (len(split.train), len(split.val), len(split.test)) == (4, 2, 2)

    def test_property_over_100_seeds(self):
        rng = np.random.default_rng(0)
        acqs = []
        for p in range(40):
            for j in range(int(rng.integers(1, 5))):
                acqs.append(Acquisition(f"A{p}_{j}", f"P{p}", int(rng.choice([0, 2, 4], p=[0.5, 0.3, 0.2]))))
        for seed in range(100):
            check_split_invariants(split_by_patient(acqs, seed=seed), acqs)

    def test_deterministic_per_seed(self):
        acqs = _cohort(20, 2)
        assert split_by_patient(acqs, seed=3) == split_by_patient(acqs, seed=3)
        assert split_by_patient(acqs, seed=3) != split_by_patient(acqs, seed=4)

    def test_infeasible_names_split(self):
        # a single positive patient cannot cover three splits
        acqs = _cohort(9, positive_every=100)
        with pytest.raises(InfeasibleSplitError, match="split (val|test|train)"):
            split_by_patient(acqs, seed=0)

    def test_zero_fraction_names_split(self):
        with pytest.raises(InfeasibleSplitError, match="val"):
            split_by_patient(_cohort(8), (0.9, 0.0, 0.1))

    def test_bad_fractions(self):
        with pytest.raises(DataError):
            split_by_patient(_cohort(8), (0.5, 0.5, 0.5))
        with pytest.raises(InfeasibleSplitError):
            split_by_patient(_cohort(2))

    def test_validate_catches_shared_patient(self):
        acqs = _cohort(8, per_patient=2)
        split = split_by_patient(acqs, (0.5, 0.25, 0.25), seed=1)
        moved = split.train.pop()
        split.test.append(moved)
        with pytest.raises(DataError, match="appears in both"):
            split.validate(acqs)

    def test_validate_catches_unassigned_and_unknown(self):
        acqs = _cohort(8)
        split = split_by_patient(acqs, (0.5, 0.25, 0.25))
        short = DatasetSplit(split.train[:-1], split.val, split.test)
        with pytest.raises(DataError, match="not assigned"):
            short.validate(acqs)
        with pytest.raises(DataError, match="unknown"):
            DatasetSplit(split.train + ["nope"], split.val, split.test).validate(acqs)

    def test_save_load(self, tmp_path):
        split = split_by_patient(_cohort(10), seed=2)
        split.save(tmp_path / "s.json")
        assert DatasetSplit.load(tmp_path / "s.json") == split
        (tmp_path / "bad.json").write_text(json.dumps(dict(split.to_json(), version=9)))
        with pytest.raises(DataError, match="version"):
            DatasetSplit.load(tmp_path / "bad.json")


class TestProtocolReplay:
    def test_stored_manifest_and_split(self, tmp_path):
        manifest_path, split_path = write_protocol_files(tmp_path)
        acqs = load_manifest(manifest_path).headers()
        assert len(acqs) == 151 and len({a.patient_id for a in acqs}) == 64
        split = DatasetSplit.load(split_path)
        split.validate(acqs)
        for name, (n_pat, n_acq, n_pos) in PROTOCOL.items():
            chosen = split.select(acqs, name)
            assert len(chosen) == n_acq
            assert len({a.patient_id for a in chosen}) == n_pat
            assert labels_of(chosen).sum() == n_pos
        assert [len(split.train), len(split.val), len(split.test)] == [88, 28, 35]

    def test_fractions_reproduce_patient_counts(self, tmp_path):
        manifest_path, _ = write_protocol_files(tmp_path)
        acqs = load_manifest(manifest_path).headers()
        for seed in range(10):
            split = split_by_patient(acqs, PAPER_PATIENT_FRACTIONS, seed=seed)
            counts = [len({a.patient_id for a in split.select(acqs, n)}) for n in SPLITS]
            assert counts == [31, 14, 19]


class TestPreprocess:
    def test_constant_becomes_zeros_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="retifuse.data"):
            out = min_max(np.full((4, 4), 7.0), "lso")
        assert out.dtype == np.float32 and not out.any()
        assert "constant" in caplog.text

    def test_identity_on_normalized_grid(self, rng):
        a = random_acquisition(rng, volume=(4, 8, 8), lso=(8, 8))
        for name in ("structure", "flow", "lso"):
            arr = a.modality(name)
            arr.reshape(-1)[:2] = (0.0, 1.0)
        out = preprocess(a, (4, 8, 8), (8, 8))
        for name in ("structure", "flow", "lso"):
            np.testing.assert_allclose(out.modality(name), a.modality(name), atol=1e-7)

    def test_range_and_ramp_monotone(self):
        ramp = np.arange(10, dtype=np.float64)[None, :].repeat(3, 0) * 5 - 11
        out = min_max(resample(ramp, (3, 19)))
        assert out.min() == 0.0 and out.max() == 1.0
        assert np.all(np.diff(out, axis=1) > 0)
        np.testing.assert_allclose(out[0], np.linspace(0, 1, 19), atol=1e-6)

    def test_resample_shapes(self, rng):
        a = random_acquisition(rng, volume=(5, 20, 30), lso=(33, 17))
        out = preprocess(a, (4, 16, 16), (16, 16))
        assert out.structure.shape == (4, 16, 16) and out.lso.shape == (16, 16)
        with pytest.raises(AlignmentError):
            resample(np.zeros((4, 4)), (4, 4, 4))

    def test_missing_modality(self, rng):
        a = random_acquisition(rng)
        a.flow = None
        with pytest.raises(DataError, match="flow"):
            preprocess(a)

    def test_grade_range(self):
        with pytest.raises(DataError):
            Acquisition("A", "P", 5)
        assert Acquisition("A", "P", 4).label == 1 and Acquisition("A", "P", 3).label == 0


class TestManifest:
    def test_round_trip_with_tensors(self, tmp_path, rng):
        acqs = [random_acquisition(rng, f"A{i}", f"P{i // 2}", grade=4 * (i % 2)) for i in range(4)]
        path = write_dataset(tmp_path / "ds", acqs)
        manifest = load_manifest(path)
        assert len(manifest) == 4
        back = manifest.acquisitions()
        for a, b in zip(acqs, back):
            assert (a.acquisition_id, a.patient_id, a.icdr_grade) == (b.acquisition_id, b.patient_id, b.icdr_grade)
            for name in ("structure", "flow", "lso"):
                assert a.modality(name).tobytes() == b.modality(name).tobytes()
        save_manifest(tmp_path / "again.jsonl", manifest.records)
        assert load_manifest(tmp_path / "again.jsonl") == manifest

    def test_duplicate_id(self, tmp_path):
        rec = ManifestRecord("A1", "P1", 0, "s", "f", "l")
        with pytest.raises(DataError, match="duplicate"):
            save_manifest(tmp_path / "m.jsonl", [rec, rec])

    def test_missing_file_names_path(self, tmp_path):
        save_manifest(tmp_path / "m.jsonl", [ManifestRecord("A1", "P1", 0, "nope.ften", "f", "l")])
        with pytest.raises(DataError, match="nope.ften"):
            load_manifest(tmp_path / "m.jsonl").acquisitions()

    @pytest.mark.parametrize("line,match", [
        ("{not json", "invalid JSON"),
        ('{"version": 1}', "expected keys"),
        ('{"version": 2, "acquisition_id": "A", "patient_id": "P", "icdr_grade": 0, '
         '"structure": "s", "flow": "f", "lso": "l"}', "version"),
        ('{"version": 1, "acquisition_id": "A", "patient_id": "P", "icdr_grade": 9, '
         '"structure": "s", "flow": "f", "lso": "l"}', "icdr_grade"),
    ])
    def test_schema_errors(self, tmp_path, line, match):
        (tmp_path / "m.jsonl").write_text(line + "\n")
        with pytest.raises(DataError, match=match):
            load_manifest(tmp_path / "m.jsonl")
