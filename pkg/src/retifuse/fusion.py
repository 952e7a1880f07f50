"""Early, intermediate and hierarchical fusion of structure, flow and LSO inputs.

* early: modalities stacked as channels of one 3-D input, one backbone, one head
* intermediate: one backbone and head per modality; probabilities averaged
* hierarchical: one backbone per modality; pooled features concatenated into one head

Single-modality classifiers (the baselines) share the same interface.
"""

from __future__ import annotations

import enum
import os
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, load_archive, save_archive
from .backbones import FeatureExtractor, build_backbone, preset
from .data import Acquisition, AlignmentError, DataError, resample
from .nn import DecisionHead, Module

CHECKPOINT_VERSION = 1


class ModalityId(str, enum.Enum):
    STRUCTURE = "structure"
    FLOW = "flow"
    LSO = "lso"

    @property
    def spatial_rank(self) -> int:
        return 2 if self is ModalityId.LSO else 3


class FusionStrategy(str, enum.Enum):
    EARLY = "early"
    INTERMEDIATE = "intermediate"
    HIERARCHICAL = "hierarchical"


class HierarchicalFusionPoint(str, enum.Enum):
    """Where per-modality features meet in hierarchical fusion.  Only pooled vectors are implemented."""

    POOLED = "pooled"


MODALITY_ORDER = (ModalityId.STRUCTURE, ModalityId.FLOW, ModalityId.LSO)
FUSED = "fused"


class IncompleteSampleError(DataError):
    pass


def _derive_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def fuse_early(sample: Acquisition) -> np.ndarray:
    """Stack (structure, flow, LSO) into ``[3, D, H, W]``.

    The LSO image is resampled onto the volumes' en-face grid when needed and
    repeated along depth.
    """
    s, f, lso = (_require(sample, m) for m in MODALITY_ORDER)
    if s.shape != f.shape or s.ndim != 3:
        raise AlignmentError(f"{sample.acquisition_id}: structure {s.shape} and flow {f.shape} "
                             "are not on one 3-D grid")
    if lso.ndim != 2:
        raise AlignmentError(f"{sample.acquisition_id}: LSO must be 2-D, got {lso.shape}")
    if lso.shape != s.shape[1:]:
        lso = resample(lso, s.shape[1:])
    lso_vol = np.broadcast_to(lso, s.shape)
    return np.stack([s, f, lso_vol]).astype(np.float32)


def _require(sample: Acquisition, modality: ModalityId) -> np.ndarray:
    arr = getattr(sample, modality.value, None)
    if arr is None:
        raise IncompleteSampleError(f"{sample.acquisition_id}: missing {modality.value} input")
    return np.asarray(arr, dtype=np.float32)


class Classifier(Module):
    """Shared plumbing: input assembly, loss, batched eval-mode prediction."""

    method: str
    preset_name: str
    seed: int
    inputs_needed: tuple[str, ...]

    def assemble(self, samples: Sequence[Acquisition]) -> dict[str, Tensor]:
        batch = {}
        for key in self.inputs_needed:
            if key == FUSED:
                arr = np.stack([fuse_early(s) for s in samples])
            else:
                arr = np.stack([_require(s, ModalityId(key)) for s in samples])[:, None]
            batch[key] = Tensor._wrap(arr)
        return batch

    def loss(self, batch: Mapping[str, Tensor], labels, pos_weight: float = 1.0) -> Tensor:
        y = np.asarray(labels, dtype=np.float64)
        w = np.where(y == 1, pos_weight, 1.0)
        return ag.bce_loss(self.forward(batch), y, w)

    def predict_proba(self, samples: Sequence[Acquisition], batch_size: int = 8) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            out = [self.forward(self.assemble(samples[i:i + batch_size])).data
                   for i in range(0, len(samples), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(out).astype(np.float64) if out else np.zeros(0)

    def metadata(self) -> dict:
        return {"method": self.method, "preset": self.preset_name, "seed": self.seed}


class SingleModalityModel(Classifier):
    """One backbone and decision head on one modality."""

    def __init__(self, modality: ModalityId | str, backbone_preset: str, seed: int = 0):
        super().__init__()
        self.modality = ModalityId(modality)
        self.method = f"single:{self.modality.value}"
        self.preset_name = backbone_preset
        self.seed = seed
        self.inputs_needed = (self.modality.value,)
        idx = MODALITY_ORDER.index(self.modality)
        self.backbone = build_backbone(preset(backbone_preset, self.modality.spatial_rank), 1,
                                       _derive_seed(seed, idx))
        self.head = DecisionHead(self.backbone.feature_dim, np.random.default_rng(_derive_seed(seed, idx, 1)))

    def forward(self, batch: Mapping[str, Tensor]) -> Tensor:
        return self.head(self.backbone(batch[self.modality.value]))


class FusionModel(Classifier):
    def __init__(self, strategy: FusionStrategy | str, backbone_preset: str, seed: int = 0,
                 fusion_point: HierarchicalFusionPoint = HierarchicalFusionPoint.POOLED):
        super().__init__()
        self.strategy = FusionStrategy(strategy)
        self.method = self.strategy.value
        self.preset_name = backbone_preset
        self.seed = seed
        self.fusion_point = HierarchicalFusionPoint(fusion_point)
        self.backbones: dict[str, FeatureExtractor] = {}
        self.heads: dict[str, DecisionHead] = {}
        _BUILDERS[self.strategy](self, backbone_preset, seed)

    def _add_backbone(self, key: str, rank: int, in_channels: int, seed: int) -> FeatureExtractor:
        fe = build_backbone(preset(self.preset_name, rank), in_channels, seed)
        self.add_module(f"{key}", fe)
        self.backbones[key] = fe
        return fe

    def _add_head(self, key: str, in_features: int, seed: int) -> DecisionHead:
        head = DecisionHead(in_features, np.random.default_rng(seed))
        self.add_module(f"head_{key}", head)
        self.heads[key] = head
        return head

    def features(self, batch: Mapping[str, Tensor]) -> dict[str, Tensor]:
        return {key: fe(batch[key]) for key, fe in self.backbones.items()}

    def modality_probabilities(self, batch: Mapping[str, Tensor]) -> dict[str, Tensor]:
        """Intermediate fusion only: each modality network's own probability."""
        if self.strategy is not FusionStrategy.INTERMEDIATE:
            raise ValueError("per-modality probabilities exist only for intermediate fusion")
        return {key: self.heads[key](f) for key, f in self.features(batch).items()}

    def fused_logit(self, features: Mapping[str, Tensor]) -> Tensor:
        """Hierarchical fusion only: head logit on concatenated (structure, flow, LSO) features."""
        joined = ag.concat([features[m.value] for m in MODALITY_ORDER], axis=1)
        return self.heads[FUSED].logit(joined)

    def forward(self, batch: Mapping[str, Tensor]) -> Tensor:
        return _FORWARDS[self.strategy](self, batch)

    def loss(self, batch: Mapping[str, Tensor], labels, pos_weight: float = 1.0) -> Tensor:
        if self.strategy is not FusionStrategy.INTERMEDIATE:
            return super().loss(batch, labels, pos_weight)
        # each modality network is trained on its own output, so no gradient
        # crosses between modalities
        y = np.asarray(labels, dtype=np.float64)
        w = np.where(y == 1, pos_weight, 1.0)
        probs = self.modality_probabilities(batch)
        total = None
        for m in MODALITY_ORDER:
            term = ag.bce_loss(probs[m.value], y, w)
            total = term if total is None else ag.add(total, term)
        return ag.mul(total, 1.0 / len(MODALITY_ORDER))

    def metadata(self) -> dict:
        return {**super().metadata(), "fusion_point": self.fusion_point.value}


def _build_early(model: FusionModel, name: str, seed: int) -> None:
    fe = model._add_backbone(FUSED, 3, len(MODALITY_ORDER), _derive_seed(seed, 0))
    model._add_head(FUSED, fe.feature_dim, _derive_seed(seed, 0, 1))
    model.inputs_needed = (FUSED,)


def _build_intermediate(model: FusionModel, name: str, seed: int) -> None:
    for i, m in enumerate(MODALITY_ORDER):
        fe = model._add_backbone(m.value, m.spatial_rank, 1, _derive_seed(seed, i))
        model._add_head(m.value, fe.feature_dim, _derive_seed(seed, i, 1))
    model.inputs_needed = tuple(m.value for m in MODALITY_ORDER)


def _build_hierarchical(model: FusionModel, name: str, seed: int) -> None:
    dims = [model._add_backbone(m.value, m.spatial_rank, 1, _derive_seed(seed, i)).feature_dim
            for i, m in enumerate(MODALITY_ORDER)]
    model._add_head(FUSED, sum(dims), _derive_seed(seed, len(MODALITY_ORDER), 1))
    model.inputs_needed = tuple(m.value for m in MODALITY_ORDER)


def _forward_early(model: FusionModel, batch) -> Tensor:
    return model.heads[FUSED](model.backbones[FUSED](batch[FUSED]))


def _forward_intermediate(model: FusionModel, batch) -> Tensor:
    probs = model.modality_probabilities(batch)
    total = ag.add(ag.add(probs["structure"], probs["flow"]), probs["lso"])
    return ag.mul(total, 1.0 / 3.0)


def _forward_hierarchical(model: FusionModel, batch) -> Tensor:
    return ag.sigmoid(model.fused_logit(model.features(batch)))


_BUILDERS = {
    FusionStrategy.EARLY: _build_early,
    FusionStrategy.INTERMEDIATE: _build_intermediate,
    FusionStrategy.HIERARCHICAL: _build_hierarchical,
}
_FORWARDS = {
    FusionStrategy.EARLY: _forward_early,
    FusionStrategy.INTERMEDIATE: _forward_intermediate,
    FusionStrategy.HIERARCHICAL: _forward_hierarchical,
}


def build_fusion_model(strategy: FusionStrategy | str, backbone_preset: str, seed: int = 0) -> FusionModel:
    preset(backbone_preset)  # unknown names fail here
    return FusionModel(strategy, backbone_preset, seed)


def build_model(method: str, backbone_preset: str, seed: int = 0) -> Classifier:
    """``method`` is a fusion strategy name or ``single:<modality>``."""
    if method.startswith("single:"):
        preset(backbone_preset)
        return SingleModalityModel(method.split(":", 1)[1], backbone_preset, seed)
    try:
        strategy = FusionStrategy(method)
    except ValueError:
        raise ValueError(f"unknown method {method!r}") from None
    return build_fusion_model(strategy, backbone_preset, seed)


def method_label(method: str) -> str:
    """Row label used in comparison reports, e.g. ``Single modality (Flow)``."""
    if method.startswith("single:"):
        modality = ModalityId(method.split(":", 1)[1])
        return "Single modality (LSO)" if modality is ModalityId.LSO else f"Single modality ({modality.value.title()})"
    return f"{FusionStrategy(method).value.title()} fusion"


def _predict_one(model: Classifier, sample: Acquisition) -> float:
    return float(model.predict_proba([sample])[0])


def predict_intermediate(model: FusionModel, sample: Acquisition) -> float:
    if getattr(model, "strategy", None) is not FusionStrategy.INTERMEDIATE:
        raise ValueError("predict_intermediate needs an intermediate-fusion model")
    return _predict_one(model, sample)


def predict_hierarchical(model: FusionModel, sample: Acquisition) -> float:
    if getattr(model, "strategy", None) is not FusionStrategy.HIERARCHICAL:
        raise ValueError("predict_hierarchical needs a hierarchical-fusion model")
    return _predict_one(model, sample)


def predict(model: Classifier, sample: Acquisition) -> float:
    """Eval-mode probability for one sample, whatever the model's method."""
    return _predict_one(model, sample)


# ---------------------------------------------------------------------------
# checkpoints

def save_model(path: str | os.PathLike, model: Classifier, extra: dict | None = None) -> None:
    meta = {"format_version": CHECKPOINT_VERSION, **model.metadata(), **(extra or {})}
    save_archive(path, model.state_dict(), meta)


def load_model(path: str | os.PathLike) -> tuple[Classifier, dict]:
    """Rebuild a model from its checkpoint; fails on any parameter mismatch."""
    state, meta = load_archive(path)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')!r}")
    model = build_model(meta["method"], meta["preset"], meta["seed"])
    model.load_state_dict(state)
    return model, meta
