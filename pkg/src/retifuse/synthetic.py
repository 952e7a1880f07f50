"""Synthetic tri-modal acquisitions with planted, optionally complementary, signals.

Negatives are pure background plus noise.  A positive carries a bright
ellipsoid in the structure volume, a bright tube in the flow volume and a
bright disc in the LSO image.  In ``complementary`` mode each positive shows
only a random subset (two or three) of those signals, so no single modality
identifies every positive while the three together do.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import DEFAULT_LSO_GRID, DEFAULT_VOLUME_GRID, PROLIFERATIVE_GRADE, Acquisition, DataError

MODALITIES = ("structure", "flow", "lso")
MIN_VOLUME_GRID = (4, 8, 8)
MIN_LSO_GRID = (8, 8)
# every subset of at least two modalities, in a fixed order
_SUBSETS = [s for r in (2, 3) for s in itertools.combinations(MODALITIES, r)]


@dataclass
class SynthConfig:
    n_patients: int = 64
    acquisitions_per_patient: tuple[int, int] = (1, 4)
    n_acquisitions: int | None = 151
    volume_grid: tuple[int, int, int] = DEFAULT_VOLUME_GRID
    lso_grid: tuple[int, int] = DEFAULT_LSO_GRID
    positive_rate: float = 30 / 151
    s_structure: float = 1.0
    s_flow: float = 1.0
    s_lso: float = 1.0
    noise: float = 0.25
    mode: str = "complementary"
    seed: int = 0

    def __post_init__(self):
        self.acquisitions_per_patient = tuple(int(v) for v in self.acquisitions_per_patient)
        self.volume_grid = tuple(int(v) for v in self.volume_grid)
        self.lso_grid = tuple(int(v) for v in self.lso_grid)
        lo, hi = self.acquisitions_per_patient
        if self.n_patients < 1 or not 1 <= lo <= hi:
            raise DataError("need n_patients >= 1 and 1 <= min <= max acquisitions per patient")
        if self.n_acquisitions is not None and not self.n_patients * lo <= self.n_acquisitions <= self.n_patients * hi:
            raise DataError(f"n_acquisitions={self.n_acquisitions} impossible for {self.n_patients} patients "
                            f"with {lo}-{hi} acquisitions each")
        if not 0 < self.positive_rate < 1:
            raise DataError("positive_rate must lie in (0, 1)")
        if min(self.s_structure, self.s_flow, self.s_lso, self.noise) < 0:
            raise DataError("signal strengths and noise must be non-negative")
        if self.mode not in ("redundant", "complementary"):
            raise DataError(f"unknown mode {self.mode!r}")
        if len(self.volume_grid) != 3 or any(g < m for g, m in zip(self.volume_grid, MIN_VOLUME_GRID)):
            raise DataError(f"volume grid {self.volume_grid} too small for the planted signals "
                            f"(minimum {MIN_VOLUME_GRID})")
        if len(self.lso_grid) != 2 or any(g < m for g, m in zip(self.lso_grid, MIN_LSO_GRID)):
            raise DataError(f"LSO grid {self.lso_grid} too small for the planted signals (minimum {MIN_LSO_GRID})")

    def strengths(self) -> dict[str, float]:
        return {"structure": self.s_structure, "flow": self.s_flow, "lso": self.s_lso}

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SynthAcquisition(Acquisition):
    """Acquisition plus the generator's ground truth (which signals were planted)."""

    planted: tuple[str, ...] = field(default=(), repr=True)


def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def ellipsoid(shape, rng) -> np.ndarray:
    """0/1 ellipsoid with radii a fifth of depth and a sixth of the en-face extents."""
    radii = np.array([shape[0] / 5, shape[1] / 6, shape[2] / 6])
    center = [rng.uniform(r, n - 1 - r) for r, n in zip(radii, shape)]
    z, y, x = _grid(shape)
    d = ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((x - center[2]) / radii[2]) ** 2
    return (d <= 1.0).astype(np.float64)


def tube(shape, rng) -> np.ndarray:
    """0/1 straight vessel crossing the en-face plane within a band of depths."""
    depth, h, w = shape
    radius = max(h, w) / 16
    thickness = max(1, depth // 4)
    z0 = rng.integers(0, depth - thickness + 1)
    cy, cx = rng.uniform(h / 4, 3 * h / 4), rng.uniform(w / 4, 3 * w / 4)
    theta = rng.uniform(0, np.pi)
    _, y, x = _grid(shape)
    dist = np.abs((y - cy) * np.sin(theta) - (x - cx) * np.cos(theta))
    out = (dist <= radius).astype(np.float64)
    out[:z0] = 0
    out[z0 + thickness:] = 0
    return out


def disc(shape, rng) -> np.ndarray:
    """0/1 disc of radius an eighth of the image."""
    radius = min(shape) / 8
    cy, cx = (rng.uniform(radius, n - 1 - radius) for n in shape)
    y, x = _grid(shape)
    return (((y - cy) ** 2 + (x - cx) ** 2) <= radius ** 2).astype(np.float64)


def _background(kind: str, shape) -> np.ndarray:
    if kind == "structure":
        # a bright retinal band in the middle of the depth axis
        z = np.linspace(-1, 1, shape[0])[:, None, None]
        return np.broadcast_to(0.2 + 0.2 * np.exp(-4 * z ** 2), shape).copy()
    if kind == "flow":
        return np.full(shape, 0.1)
    y, x = _grid(shape)
    r2 = ((y - shape[0] / 2) / shape[0]) ** 2 + ((x - shape[1] / 2) / shape[1]) ** 2
    return 0.4 - 0.3 * r2


_PLANTERS = {"structure": ellipsoid, "flow": tube, "lso": disc}


def _acquisition_counts(cfg: SynthConfig, rng) -> np.ndarray:
    lo, hi = cfg.acquisitions_per_patient
    if cfg.n_acquisitions is None:
        return rng.integers(lo, hi + 1, size=cfg.n_patients)
    counts = np.full(cfg.n_patients, lo)
    for _ in range(cfg.n_acquisitions - counts.sum()):
        open_slots = np.flatnonzero(counts < hi)
        counts[open_slots[rng.integers(len(open_slots))]] += 1
    return counts


def synth_generate(cfg: SynthConfig) -> list[SynthAcquisition]:
    """Generate the dataset described by ``cfg``; identical seeds give identical data."""
    rng = np.random.default_rng(cfg.seed)
    counts = _acquisition_counts(cfg, rng)
    total = int(counts.sum())
    n_pos = int(np.clip(round(cfg.positive_rate * total), 1, max(total - 1, 1)))
    positive = np.zeros(total, dtype=bool)
    positive[rng.choice(total, size=n_pos, replace=False)] = True
    grades = np.where(positive, PROLIFERATIVE_GRADE, rng.integers(0, PROLIFERATIVE_GRADE, size=total))
    subset_pick = rng.integers(len(_SUBSETS), size=total)
    children = np.random.SeedSequence(cfg.seed).spawn(total)

    strengths = cfg.strengths()
    grids = {"structure": cfg.volume_grid, "flow": cfg.volume_grid, "lso": cfg.lso_grid}
    out = []
    idx = 0
    for p, count in enumerate(counts):
        for _ in range(count):
            arng = np.random.default_rng(children[idx])
            planted: tuple[str, ...] = ()
            if positive[idx]:
                planted = MODALITIES if cfg.mode == "redundant" else _SUBSETS[subset_pick[idx]]
            arrays = {}
            for name in MODALITIES:
                img = _background(name, grids[name])
                if name in planted:
                    img = img + strengths[name] * _PLANTERS[name](grids[name], arng)
                if cfg.noise > 0:
                    img = img + arng.normal(0.0, cfg.noise, size=img.shape)
                arrays[name] = img.astype(np.float32)
            out.append(SynthAcquisition(f"A{idx:04d}", f"P{p:03d}", int(grades[idx]),
                                        planted=planted, **arrays))
            idx += 1
    return out
