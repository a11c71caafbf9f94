"""Shared test fixtures: tiny closed-form losses and scorers."""

from __future__ import annotations

import numpy as np

from gradsieve.numcore import BatchLoss, Layout, ParamVector


class ComponentBatch:
    """A 'batch' of quadratic component indices, mimicking example batches."""

    def __init__(self, idx):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.ids = self.idx

    def __len__(self):
        return len(self.idx)

    def take(self, rows):
        return ComponentBatch(self.idx[rows])


class DiagQuadLoss(BatchLoss):
    """Per-example loss 0.5 * sum_j diag[i,j] * (theta_j - center[i,j])^2.

    Components play the role of examples; everything stays twice
    differentiable so grad/hvp/jvp all apply.
    """

    def __init__(self, diag: np.ndarray, centers: np.ndarray):
        self.diag = np.asarray(diag, dtype=np.float64)
        self.centers = np.asarray(centers, dtype=np.float64)
        self.dim = self.diag.shape[1]
        self.layout = Layout.build([("theta", (self.dim,))])

    def init_params(self, seed: int) -> ParamVector:
        rng = np.random.default_rng(seed)
        return ParamVector(rng.standard_normal(self.dim), self.layout)

    def per_example(self, g, p, batch):
        idx = batch.idx
        b = len(idx)
        theta_row = g.reshape(p["theta"], (1, self.dim))
        tiled = g.matmul(g.constant(np.ones((b, 1))), theta_row)
        diff = g.sub(tiled, g.constant(self.centers[idx]))
        quad = g.mul(g.square(diff), g.constant(0.5 * self.diag[idx]))
        return g.reshape(g.matmul(quad, g.constant(np.ones((self.dim, 1)))), (b,))


class IdentityScorer:
    """Scores are the alpha entries themselves, one per component."""

    def __init__(self, n: int):
        self.n = n
        self.layout = Layout.build([("alpha", (n,))])

    def init_params(self, seed: int) -> ParamVector:
        return ParamVector.zeros(self.layout)

    def scores(self, params: ParamVector, batch) -> np.ndarray:
        return params.values[batch.idx]

    def score_vjp(self, params: ParamVector, batch, coeff: np.ndarray) -> ParamVector:
        out = np.zeros(self.n)
        np.add.at(out, batch.idx, coeff)
        return ParamVector(out, self.layout)
