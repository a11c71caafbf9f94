"""Batch weight normalization and big-batch filtering.

Scores become a per-batch softmax distribution; a filter rule reduces a big
generic batch to a small one the main model actually trains on. Sampling
without replacement uses the Gumbel-top-k equivalence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

FILTER_RULES = ("importance", "without_replacement", "top_k")


@dataclass(frozen=True)
class BatchWeights:
    ids: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = self.weights
        if len(w) == 0:
            raise ContractError("weights over an empty batch")
        if (w <= 0).any():
            raise ContractError("all weights must be positive")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ContractError("weights must sum to 1")

    def __len__(self) -> int:
        return len(self.ids)


def softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    e = np.exp(scores - scores.max())
    return e / e.sum()


def softmax_vjp(w: np.ndarray, coeff: np.ndarray) -> np.ndarray:
    """d/dscores of sum_i coeff_i * softmax(scores)_i, given w = softmax(scores)."""
    return w * (coeff - float(np.dot(w, coeff)))


def normalize(scores: np.ndarray, ids: np.ndarray) -> BatchWeights:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ContractError("cannot normalize an empty score batch")
    if not np.isfinite(scores).all():
        raise ContractError("scores must be finite")
    return BatchWeights(np.asarray(ids), softmax(scores))


def uniform_weights(ids: np.ndarray) -> BatchWeights:
    n = len(ids)
    return BatchWeights(np.asarray(ids), np.full(n, 1.0 / n))


def _top_n(keys: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    # descending key, ties broken by lower id
    order = np.lexsort((ids, -keys))
    return order[:n]


def filter_indices(weights: BatchWeights, n: int, rule: str,
                   rng: np.random.Generator) -> np.ndarray:
    """Row indices of the selected sub-batch (length n, in selection order)."""
    b = len(weights)
    if n > b:
        raise ContractError(f"cannot filter {n} examples from a batch of {b}")
    if rule == "top_k":
        return _top_n(weights.weights, weights.ids, n)
    if rule == "importance":
        return rng.choice(b, size=n, replace=True, p=weights.weights)
    if rule == "without_replacement":
        gumbel = rng.gumbel(size=b)
        keys = np.log(weights.weights) + gumbel
        return _top_n(keys, weights.ids, n)
    raise ContractError(f"unknown filter rule {rule!r}")


def filter_batch(batch, weights: BatchWeights, n: int, rule: str,
                 rng: np.random.Generator):
    if len(batch) != len(weights):
        raise ContractError("weights do not cover the batch")
    return batch.take(filter_indices(weights, n, rule, rng))
