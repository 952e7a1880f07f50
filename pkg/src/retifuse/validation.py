"""Input checks shared by the estimator API."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Acquisition, DataError

MODALITIES = ("structure", "flow", "lso")


def check_acquisitions(X, modalities: Sequence[str] = MODALITIES) -> list[Acquisition]:
    """Return ``X`` as a list after checking every sample carries the needed arrays on one grid."""
    if isinstance(X, Acquisition):
        raise TypeError("expected a sequence of acquisitions, got a single acquisition")
    samples = list(X)
    if not samples:
        raise ValueError("no samples given")
    shapes: dict[str, tuple] = {}
    for a in samples:
        if not isinstance(a, Acquisition):
            raise TypeError(f"expected Acquisition objects, got {type(a).__name__}")
        for m in modalities:
            arr = a.modality(m)
            expected_rank = 2 if m == "lso" else 3
            if np.ndim(arr) != expected_rank:
                raise DataError(f"{a.acquisition_id}: {m} must be {expected_rank}-D, got shape {np.shape(arr)}")
            if not np.isfinite(arr).all():
                raise DataError(f"{a.acquisition_id}: {m} contains non-finite values")
            if shapes.setdefault(m, np.shape(arr)) != np.shape(arr):
                raise DataError(f"{a.acquisition_id}: {m} shape {np.shape(arr)} differs from {shapes[m]}; "
                                "preprocess samples onto a common grid first")
    return samples


def check_binary_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be 1-D with {n_samples} entries, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"labels must be 0/1, got values {sorted(set(y.tolist()))[:5]}")
    return y.astype(np.int64)


def check_both_classes(y: np.ndarray, what: str = "training set") -> None:
    if len(np.unique(y)) < 2:
        raise ValueError(f"{what} needs both classes, got only {int(y[0])}")
