"""Acquisitions, preprocessing, patient-grouped splits and the dataset manifest."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .autograd.serialization import load_tensor, save_tensor

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLIT_VERSION = 1
SPLITS = ("train", "val", "test")
PROLIFERATIVE_GRADE = 4
DEFAULT_VOLUME_GRID = (16, 64, 64)
DEFAULT_LSO_GRID = (64, 64)
# patient ratio of the reference study: 31 / 14 / 19 of 64 patients
PAPER_PATIENT_FRACTIONS = (31 / 64, 14 / 64, 19 / 64)


class DataError(ValueError):
    pass


class InfeasibleSplitError(DataError):
    pass


class AlignmentError(DataError):
    pass


@dataclass
class Acquisition:
    """One multimodal acquisition: structure and flow volumes ``[D, H, W]`` plus an LSO image ``[H, W]``."""

    acquisition_id: str
    patient_id: str
    icdr_grade: int
    structure: np.ndarray | None = field(default=None, repr=False)
    flow: np.ndarray | None = field(default=None, repr=False)
    lso: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 <= int(self.icdr_grade) <= 4:
            raise DataError(f"{self.acquisition_id}: ICDR grade {self.icdr_grade} outside 0-4")
        self.icdr_grade = int(self.icdr_grade)

    @property
    def label(self) -> int:
        return int(self.icdr_grade == PROLIFERATIVE_GRADE)

    def modality(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        if arr is None:
            raise DataError(f"{self.acquisition_id}: modality {name!r} is missing")
        return arr


def labels_of(acquisitions: Iterable[Acquisition]) -> np.ndarray:
    return np.array([a.label for a in acquisitions], dtype=np.int64)


# ---------------------------------------------------------------------------
# preprocessing

def resample(image: np.ndarray, grid: Sequence[int]) -> np.ndarray:
    """Linear interpolation onto ``grid`` with corner samples aligned."""
    image = np.asarray(image, dtype=np.float64)
    grid = tuple(int(g) for g in grid)
    if image.shape == grid:
        return image.copy()
    if image.ndim != len(grid):
        raise AlignmentError(f"cannot resample rank-{image.ndim} data onto grid {grid}")
    axes = [np.linspace(0.0, n - 1, g) for n, g in zip(image.shape, grid)]
    coords = np.meshgrid(*axes, indexing="ij")
    return ndimage.map_coordinates(image, coords, order=1, mode="nearest")


def min_max(image: np.ndarray, what: str = "image") -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if hi - lo <= 0:
        log.warning("%s is constant (%g); normalized to zeros", what, lo)
        return np.zeros(image.shape, dtype=np.float32)
    return ((image - lo) / (hi - lo)).astype(np.float32)


def preprocess(acq: Acquisition, volume_grid: Sequence[int] = DEFAULT_VOLUME_GRID,
               lso_grid: Sequence[int] = DEFAULT_LSO_GRID) -> Acquisition:
    """Resample every modality to its grid and min-max normalize each to [0, 1]."""
    out = {}
    for name, grid in (("structure", volume_grid), ("flow", volume_grid), ("lso", lso_grid)):
        arr = acq.modality(name)
        out[name] = min_max(resample(arr, grid), f"{acq.acquisition_id}/{name}")
    return replace(acq, **out)


# ---------------------------------------------------------------------------
# splits

@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    split_seed: int | None = None

    def ids(self, name: str) -> list[str]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def select(self, acquisitions: Sequence[Acquisition], name: str) -> list[Acquisition]:
        by_id = {a.acquisition_id: a for a in acquisitions}
        try:
            return [by_id[i] for i in self.ids(name)]
        except KeyError as exc:
            raise DataError(f"split {name} references unknown acquisition {exc.args[0]}") from None

    def validate(self, acquisitions: Sequence[Acquisition]) -> None:
        """Check partition, patient-disjointness and class presence in every split."""
        by_id = {a.acquisition_id: a for a in acquisitions}
        seen: set[str] = set()
        owner: dict[str, str] = {}
        for name in SPLITS:
            ids = self.ids(name)
            dup = seen.intersection(ids)
            if dup or len(set(ids)) != len(ids):
                raise DataError(f"split {name} overlaps another split: {sorted(dup)[:3]}")
            seen.update(ids)
            for i in ids:
                if i not in by_id:
                    raise DataError(f"split {name} references unknown acquisition {i}")
                pid = by_id[i].patient_id
                if owner.setdefault(pid, name) != name:
                    raise DataError(f"patient {pid} appears in both {owner[pid]} and {name}")
            labels = {by_id[i].label for i in ids}
            if labels != {0, 1}:
                raise InfeasibleSplitError(f"split {name} lacks a {'positive' if 1 not in labels else 'negative'}")
        if seen != set(by_id):
            raise DataError(f"{len(set(by_id) - seen)} acquisitions are not assigned to any split")

    def to_json(self) -> dict:
        return {"version": SPLIT_VERSION, "split_seed": self.split_seed,
                "train": self.train, "val": self.val, "test": self.test}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        if obj.get("version") != SPLIT_VERSION:
            raise DataError(f"unsupported split version {obj.get('version')!r}")
        return cls(list(obj["train"]), list(obj["val"]), list(obj["test"]), obj.get("split_seed"))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


def _allocate(total: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``total * fractions``."""
    raw = [total * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split_by_patient(acquisitions: Sequence[Acquisition], fractions: Sequence[float] = PAPER_PATIENT_FRACTIONS,
                     seed: int = 0, max_attempts: int = 1000) -> DatasetSplit:
    """Partition *patients* into train/val/test by ``fractions``.

    Patients are shuffled with ``seed``; if a draw leaves some split without
    both classes, further draws (seeded by ``(seed, attempt)``) are tried.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    by_patient: dict[str, list[Acquisition]] = {}
    for a in acquisitions:
        by_patient.setdefault(a.patient_id, []).append(a)
    patients = sorted(by_patient)
    if len(patients) < 3:
        raise InfeasibleSplitError(f"need at least 3 patients, got {len(patients)}")
    counts = _allocate(len(patients), fractions)
    if min(counts) == 0:
        raise InfeasibleSplitError(f"fractions {tuple(fractions)} leave split "
                                   f"{SPLITS[counts.index(0)]} with no patients")
    has_pos = {p: any(a.label for a in by_patient[p]) for p in patients}
    has_neg = {p: any(not a.label for a in by_patient[p]) for p in patients}

    failure = ""
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        order = [patients[i] for i in rng.permutation(len(patients))]
        groups = np.split(np.array(order, dtype=object), np.cumsum(counts)[:-1])
        failure = ""
        for name, group in zip(SPLITS, groups):
            if not any(has_pos[p] for p in group):
                failure = f"split {name} has no positive acquisition"
            elif not any(has_neg[p] for p in group):
                failure = f"split {name} has no negative acquisition"
            if failure:
                break
        if not failure:
            ids = [[a.acquisition_id for p in group for a in by_patient[p]] for group in groups]
            return DatasetSplit(*ids, split_seed=seed)
    raise InfeasibleSplitError(f"no feasible patient split in {max_attempts} draws: {failure}")


# ---------------------------------------------------------------------------
# manifest

@dataclass
class ManifestRecord:
    acquisition_id: str
    patient_id: str
    icdr_grade: int
    structure: str
    flow: str
    lso: str

    def to_json(self) -> dict:
        return {"version": MANIFEST_VERSION, "acquisition_id": self.acquisition_id,
                "patient_id": self.patient_id, "icdr_grade": self.icdr_grade,
                "structure": self.structure, "flow": self.flow, "lso": self.lso}


_RECORD_KEYS = {"version", "acquisition_id", "patient_id", "icdr_grade", "structure", "flow", "lso"}


class Manifest:
    """Line-delimited JSON, one record per acquisition; tensor paths are relative to the manifest."""

    def __init__(self, records: Sequence[ManifestRecord], root: str | os.PathLike = "."):
        self.records = list(records)
        self.root = Path(root)
        seen = set()
        for r in self.records:
            if r.acquisition_id in seen:
                raise DataError(f"duplicate acquisition_id {r.acquisition_id!r}")
            seen.add(r.acquisition_id)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, Manifest) and self.records == other.records

    def resolve(self, record: ManifestRecord) -> Acquisition:
        arrays = {}
        for name in ("structure", "flow", "lso"):
            path = self.root / getattr(record, name)
            if not path.is_file():
                raise DataError(f"{record.acquisition_id}: tensor file not found: {path}")
            arrays[name] = load_tensor(path)
        return Acquisition(record.acquisition_id, record.patient_id, record.icdr_grade, **arrays)

    def acquisitions(self) -> list[Acquisition]:
        return [self.resolve(r) for r in self.records]

    def headers(self) -> list[Acquisition]:
        """Acquisitions without tensor data (enough for splitting)."""
        return [Acquisition(r.acquisition_id, r.patient_id, r.icdr_grade) for r in self.records]


def save_manifest(path: str | os.PathLike, records: Sequence[ManifestRecord]) -> None:
    Manifest(records)  # duplicate check
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def load_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if set(obj) != _RECORD_KEYS:
                raise DataError(f"{path}:{lineno}: expected keys {sorted(_RECORD_KEYS)}, got {sorted(obj)}")
            if obj["version"] != MANIFEST_VERSION:
                raise DataError(f"{path}:{lineno}: unsupported manifest version {obj['version']!r}")
            obj.pop("version")
            if not isinstance(obj["icdr_grade"], int) or not 0 <= obj["icdr_grade"] <= 4:
                raise DataError(f"{path}:{lineno}: icdr_grade must be an integer in 0-4")
            records.append(ManifestRecord(**obj))
    return Manifest(records, path.parent)


def write_dataset(directory: str | os.PathLike, acquisitions: Sequence[Acquisition]) -> Path:
    """Write FTEN tensors under ``directory/tensors`` and ``directory/manifest.jsonl``."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    records = []
    for a in acquisitions:
        paths = {}
        for name in ("structure", "flow", "lso"):
            rel = f"tensors/{a.acquisition_id}.{name}.ften"
            save_tensor(directory / rel, a.modality(name))
            paths[name] = rel
        records.append(ManifestRecord(a.acquisition_id, a.patient_id, a.icdr_grade, **paths))
    manifest = directory / "manifest.jsonl"
    save_manifest(manifest, records)
    return manifest
