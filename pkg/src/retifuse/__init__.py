"""Multimodal fusion of retinal OCTA volumes and LSO images on a small numpy autodiff engine."""

from .backbones import BackboneSpec, FeatureExtractor, PRESETS, build_backbone, preset
from .config import ConfigError, ExperimentConfig, RunSpec, load_config, parse_config
from .data import Acquisition, DatasetSplit, Manifest, load_manifest, preprocess, split_by_patient
from .estimator import FusionClassifier
from .fusion import (
    FusionModel, FusionStrategy, ModalityId, SingleModalityModel, build_fusion_model, build_model,
    fuse_early, load_model, predict, save_model,
)
from .metrics import MetricsReport, ScoredSet, auc, build_report, operating_point, roc_curve, sens_spec
from .synthetic import SynthConfig, synth_generate
from .training import DivergenceError, TrainConfig, TrainHistory, train

__version__ = "0.1.0"

__all__ = [
    "Acquisition", "BackboneSpec", "ConfigError", "DatasetSplit", "DivergenceError", "ExperimentConfig",
    "FeatureExtractor", "FusionClassifier", "FusionModel", "FusionStrategy", "Manifest", "MetricsReport",
    "ModalityId", "PRESETS", "RunSpec", "ScoredSet", "SingleModalityModel", "SynthConfig", "TrainConfig",
    "TrainHistory", "auc", "build_backbone", "build_fusion_model", "build_model", "build_report",
    "fuse_early", "load_config", "load_manifest", "load_model", "operating_point", "parse_config",
    "predict", "preprocess", "preset", "roc_curve", "save_model", "sens_spec", "split_by_patient",
    "synth_generate", "train",
]
