"""scikit-learn style wrapper around model construction, training and thresholding."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import PROLIFERATIVE_GRADE, labels_of
from .fusion import build_model
from .metrics import ScoredSet, operating_point
from .training import TrainConfig, train
from .validation import check_acquisitions, check_binary_labels, check_both_classes


def _relabel(samples, y):
    """Copies whose grade encodes ``y`` (4 for positive, otherwise the original grade capped at 3)."""
    return [a if a.label == yi else replace(a, icdr_grade=PROLIFERATIVE_GRADE if yi else min(a.icdr_grade, 3))
            for a, yi in zip(samples, y)]


class FusionClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier over acquisitions (``X`` is a sequence of :class:`Acquisition`).

    ``method`` is ``early``, ``intermediate``, ``hierarchical`` or
    ``single:<modality>``.  When ``fit`` receives ``eval_set`` it is used for
    early stopping and to choose the decision threshold (Youden's J);
    otherwise ``predict`` thresholds at 0.5.
    """

    def __init__(self, method="hierarchical", backbone="mini-res-a", seed=0, optimizer="adam", lr=1e-3,
                 batch_size=4, max_epochs=30, patience=5, pos_class_weight=None):
        self.method = method
        self.backbone = backbone
        self.seed = seed
        self.optimizer = optimizer
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.pos_class_weight = pos_class_weight

    def _train_config(self) -> TrainConfig:
        return TrainConfig(optimizer=self.optimizer, lr=self.lr, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience,
                           pos_class_weight=self.pos_class_weight, seed=self.seed)

    def fit(self, X, y=None, eval_set=None):
        samples = check_acquisitions(X)
        if y is not None:
            samples = _relabel(samples, check_binary_labels(y, len(samples)))
        check_both_classes(labels_of(samples))
        val = None
        if eval_set is not None:
            val = check_acquisitions(eval_set[0] if isinstance(eval_set, tuple) else eval_set)
            if isinstance(eval_set, tuple) and eval_set[1] is not None:
                val = _relabel(val, check_binary_labels(eval_set[1], len(val)))
            check_both_classes(labels_of(val), "eval_set")
        model = build_model(self.method, self.backbone, self.seed)
        self.model_, self.history_ = train(model, samples, val, self._train_config())
        self.classes_ = np.array([0, 1])
        self.threshold_ = 0.5
        if val is not None:
            scores = self.model_.predict_proba(val)
            self.threshold_ = operating_point(ScoredSet([a.acquisition_id for a in val], scores, labels_of(val)))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        p = self.model_.predict_proba(check_acquisitions(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold_).astype(np.int64)
