import numpy as np
import pytest

from retifuse.data import Acquisition, preprocess
from retifuse.synthetic import SynthConfig, synth_generate

SMALL_VOLUME = (4, 16, 16)
SMALL_LSO = (16, 16)


def small_synth(n_patients=16, n_acquisitions=40, seed=0, **kw):
    cfg = SynthConfig(n_patients=n_patients, n_acquisitions=n_acquisitions, volume_grid=SMALL_VOLUME,
                      lso_grid=SMALL_LSO, seed=seed, **kw)
    return [preprocess(a, SMALL_VOLUME, SMALL_LSO) for a in synth_generate(cfg)]


def random_acquisition(rng, acq_id="A", patient="P", grade=0, volume=SMALL_VOLUME, lso=SMALL_LSO):
    return Acquisition(acq_id, patient, grade, structure=rng.random(volume).astype(np.float32),
                       flow=rng.random(volume).astype(np.float32), lso=rng.random(lso).astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return small_synth()


# patients / acquisitions / positive acquisitions per split of the reference protocol
PROTOCOL = {"train": (31, 88, 16), "val": (14, 28, 5), "test": (19, 35, 9)}


def write_protocol_files(directory):
    """Header-only manifest plus stored split reproducing the reference cardinalities."""
    from retifuse.data import DatasetSplit, ManifestRecord, save_manifest

    records, ids, p_index, a_index = [], {}, 0, 0
    for name, (n_pat, n_acq, n_pos) in PROTOCOL.items():
        per_patient = [n_acq // n_pat + (i < n_acq % n_pat) for i in range(n_pat)]
        ids[name] = []
        k = 0
        for count in per_patient:
            for _ in range(count):
                aid = f"A{a_index:04d}"
                grade = 4 if k < n_pos else k % 4
                records.append(ManifestRecord(aid, f"P{p_index:03d}", grade, *(f"t/{aid}.{m}.ften"
                                                                                for m in ("structure", "flow", "lso"))))
                ids[name].append(aid)
                a_index += 1
                k += 1
            p_index += 1
    manifest = directory / "manifest.jsonl"
    save_manifest(manifest, records)
    split = directory / "split.json"
    DatasetSplit(ids["train"], ids["val"], ids["test"]).save(split)
    return manifest, split
