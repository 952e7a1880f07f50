"""Mini-batch training with validation-AUC model selection and early stopping."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import GradTape
from .data import Acquisition, labels_of
from .fusion import Classifier, save_model
from .metrics import ScoredSet, auc

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite; the model holds the last good weights."""

    def __init__(self, message: str, history: "TrainHistory"):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 100
    patience: int = 10
    pos_class_weight: float | None = None
    seed: int = 0
    target_loss: float | None = None

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float | None
    timestamp: float = field(default=0.0, compare=False)


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopping_reason: str = ""

    def best_record(self) -> EpochRecord | None:
        return None if self.best_epoch is None else self.records[self.best_epoch - 1]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"kind": "epoch", **asdict(r)}) + "\n")
            fh.write(json.dumps({"kind": "summary", "best_epoch": self.best_epoch,
                                 "stopping_reason": self.stopping_reason}) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainHistory":
        hist = cls()
        for line in Path(path).read_text().splitlines():
            obj = json.loads(line)
            kind = obj.pop("kind")
            if kind == "epoch":
                hist.records.append(EpochRecord(**obj))
            else:
                hist.best_epoch, hist.stopping_reason = obj["best_epoch"], obj["stopping_reason"]
        return hist


# ---------------------------------------------------------------------------
# optimizers (in-place updates on parameter buffers)

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict, config: TrainConfig):
    bufs = state.setdefault("momentum", [np.zeros_like(p, dtype=np.float64) for p in params])
    for p, g, v in zip(params, grads, bufs):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v *= config.momentum
        v += g
        p -= (config.lr * v).astype(p.dtype)
    return params, state


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict, config: TrainConfig):
    m = state.setdefault("m", [np.zeros_like(p, dtype=np.float64) for p in params])
    v = state.setdefault("v", [np.zeros_like(p, dtype=np.float64) for p in params])
    t = state["t"] = state.get("t", 0) + 1
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        g = g.astype(np.float64)
        mi *= config.beta1
        mi += (1.0 - config.beta1) * g
        vi *= config.beta2
        vi += (1.0 - config.beta2) * g * g
        p -= (config.lr * (mi / c1) / (np.sqrt(vi / c2) + config.eps)).astype(p.dtype)
    return params, state


_STEPS = {"sgd": sgd_step, "adam": adam_step}


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order for ``epoch`` from a counter-based generator keyed on ``(seed, epoch)``."""
    gen = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, epoch]))
    return gen.permutation(n)


def positive_weight(labels) -> float:
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    return 1.0 if n_pos == 0 else (len(labels) - n_pos) / n_pos


def evaluate_auc(model: Classifier, samples: Sequence[Acquisition]) -> float:
    scores = model.predict_proba(samples)
    return auc(ScoredSet([a.acquisition_id for a in samples], scores, labels_of(samples)))


def train(model: Classifier, train_set: Sequence[Acquisition], val_set: Sequence[Acquisition] | None,
          config: TrainConfig, checkpoint_dir: str | os.PathLike | None = None) -> tuple[Classifier, TrainHistory]:
    """Train ``model`` in place and return it with the weights of its best epoch.

    With a validation set the best epoch has the highest validation AUC and
    training stops after ``patience`` epochs without improvement.  Without
    one, the lowest training loss is kept.  ``target_loss`` (optional) stops
    as soon as an epoch's mean training loss falls below it.
    """
    labels = labels_of(train_set)
    pos_weight = config.pos_class_weight if config.pos_class_weight is not None else positive_weight(labels)
    step_fn = _STEPS[config.optimizer]
    names, params = zip(*model.named_parameters())
    opt_state: dict = {}
    history = TrainHistory()
    best_score: tuple = (-np.inf, -np.inf)
    best_state = model.state_dict()
    stale = 0
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = epoch_permutation(len(train_set), config.seed, epoch)
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = model.assemble([train_set[i] for i in idx])
            with GradTape() as tape:
                loss = model.loss(batch, labels[idx], pos_weight)
            value = float(loss.data)
            if not np.isfinite(value):
                model.load_state_dict(best_state)
                history.stopping_reason = "diverged"
                log.error("loss became %s at epoch %d; restored epoch %s weights", value, epoch, history.best_epoch)
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", history)
            grads = tape.backward(loss, wrt=params)
            step_fn([p.data for p in params], [grads[p] for p in params], opt_state, config)
            total += value * len(idx)
            count += len(idx)
        train_loss = total / count

        val_auc = evaluate_auc(model, val_set) if val_set else None
        history.records.append(EpochRecord(epoch, train_loss, val_auc, time.time()))
        # ties in validation AUC (common with few positives) go to the lower training loss
        score = (val_auc if val_set else -train_loss, -train_loss)
        log.info("epoch %d train_loss=%.5f val_auc=%s", epoch, train_loss,
                 "n/a" if val_auc is None else f"{val_auc:.4f}",
                 extra={"fields": {"epoch": epoch, "train_loss": train_loss, "val_auc": val_auc}})
        if score[0] > best_score[0]:
            stale = 0
        else:
            stale += 1
        if score > best_score:
            best_score = score
            history.best_epoch = epoch
            best_state = model.state_dict()
            if checkpoint_dir is not None:
                tag = "na" if val_auc is None else f"{val_auc:.4f}"
                save_model(Path(checkpoint_dir) / f"epoch{epoch:03d}-auc{tag}.ckpt", model)
        if config.target_loss is not None and train_loss < config.target_loss:
            history.stopping_reason = "target_loss"
            if not val_set:
                history.best_epoch, best_state = epoch, model.state_dict()
            break
        if val_set and stale >= config.patience:
            history.stopping_reason = "early_stop"
            break
    else:
        history.stopping_reason = "max_epochs"

    model.load_state_dict(best_state)
    model.eval()
    return model, history
