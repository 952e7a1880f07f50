"""Finite-difference check of every parameter gradient of tiny backbones.

Each case builds a small residual or dense extractor (2-D or 3-D), puts a
decision head and a weighted BCE loss on top, and compares the tape's
gradient for every parameter element with a central difference.  The whole
computation runs in float64 so the difference quotient is not swamped by
rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import GradTape, Tensor, finite_diff_grad, grad_mismatch, precision
from .backbones import BackboneSpec, DenseStage, FeatureExtractor, ResidualStage
from .nn import DecisionHead

TINY_SPECS = {
    "residual": lambda rank: BackboneSpec("residual", rank, 2, (ResidualStage(1, 2), ResidualStage(1, 3)), "tiny-res"),
    "dense": lambda rank: BackboneSpec("dense", rank, 2, (DenseStage(1, 2), DenseStage(2, 2)), "tiny-dense"),
}
TINY_INPUT = {2: (8, 8), 3: (2, 8, 8)}
BATCH = 3


@dataclass
class GradCase:
    family: str
    spatial_rank: int
    seed: int
    n_params: int
    n_mismatched: int
    max_abs_error: float
    worst_parameter: str

    @property
    def passed(self) -> bool:
        return self.n_mismatched == 0


def check_backbone(family: str, spatial_rank: int, seed: int, h: float = 1e-5,
                   atol: float = 1e-4, rtol: float = 1e-2) -> GradCase:
    rng = np.random.default_rng([seed, spatial_rank, len(family)])
    with precision(np.float64):
        net = FeatureExtractor(TINY_SPECS[family](spatial_rank), 1, seed)
        head = DecisionHead(net.feature_dim, rng)
        x = Tensor(rng.normal(size=(BATCH, 1, *TINY_INPUT[spatial_rank])))
        labels = np.array([1.0, 0.0, 1.0])
        weights = np.array([2.0, 1.0, 2.0])

        def loss_fn(_=None) -> Tensor:
            return ag.bce_loss(head(net(x)), labels, weights)

        named = list(net.named_parameters("backbone.")) + list(head.named_parameters("head."))
        with GradTape() as tape:
            loss = loss_fn()
        grads = tape.backward(loss, wrt=[p for _, p in named])

        mismatched, worst, worst_name, total = 0, 0.0, "", 0
        for name, p in named:
            numeric = finite_diff_grad(loss_fn, p, h)
            err = np.abs(grads[p] - numeric)
            mismatched += int(grad_mismatch(grads[p], numeric, atol, rtol).sum())
            total += p.data.size
            if err.max() > worst:
                worst, worst_name = float(err.max()), name
    return GradCase(family, spatial_rank, seed, total, mismatched, worst, worst_name)


def run_suite(seeds: int = 20, families=("residual", "dense"), ranks=(2, 3)) -> list[GradCase]:
    return [check_backbone(f, r, s) for s in range(seeds) for f in families for r in ranks]
