"""Gradient-alignment diagnostics: normalized alignment, SAR, GAR.

The normalized alignment of an example against a batch is the inner product
of the example gradient with the unit-normalized mean batch gradient. SAR is
the rate at which a specific example aligns strictly better with a fresh
specific batch than with a fresh generic batch; GAR is the symmetric rate for
generic examples. Ties count as failures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ContractError, NumericError
from .numcore import (BatchLoss, ParamVector, axpy, grad, norm,
                      per_example_jvp, scale)

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class AlignmentReport:
    sar: float
    gar: float
    trials: int
    sar_halfwidth: float
    gar_halfwidth: float
    skipped: int

    def summary(self) -> str:
        return (f"SAR {self.sar:.3f} ±{self.sar_halfwidth:.3f}  "
                f"GAR {self.gar:.3f} ±{self.gar_halfwidth:.3f}  "
                f"(trials={self.trials}, skipped={self.skipped})")


def _halfwidth(p: float, trials: int) -> float:
    return 1.96 * math.sqrt(p * (1.0 - p) / trials)


def alignment(loss: BatchLoss, theta: ParamVector, x_batch, comp_batch) -> float:
    """Normalized alignment of a single example against a comparison batch."""
    if len(x_batch) != 1:
        raise ContractError("alignment expects a single-example batch")
    g_b = grad(loss, theta, comp_batch)
    nb = norm(g_b)
    if nb < DEGENERATE_NORM:
        raise NumericError("degenerate comparison-batch gradient")
    return float(per_example_jvp(loss, theta, scale(1.0 / nb, g_b), x_batch)[0])


def _draw_excluding(rng: np.random.Generator, n: int, size: int, skip: int):
    idx = rng.integers(0, n - 1, size=size)
    idx[idx >= skip] += 1
    return idx


def sar_gar(loss: BatchLoss, theta: ParamVector, d_generic: Dataset,
            d_specific: Dataset, trials: int, b_specific: int, b_generic: int,
            rng: np.random.Generator) -> AlignmentReport:
    """Estimate SAR and GAR with fresh comparison batches every trial.

    The probed example is excluded from the comparison batch drawn from its
    own pool. Trials with a degenerate batch gradient are skipped, redrawn,
    and counted.
    """
    if trials < 100:
        raise ContractError("sar_gar needs trials >= 100")
    if len(d_specific) < 2 or len(d_generic) < 2:
        raise ContractError("sar_gar needs at least two examples per pool")

    skipped = 0

    def one_rate(own: Dataset, other: Dataset, b_own: int, b_other: int) -> float:
        nonlocal skipped
        hits = 0
        done = 0
        attempts = 0
        while done < trials:
            attempts += 1
            if attempts > 4 * trials:
                raise NumericError("too many degenerate diagnostic batches")
            i = int(rng.integers(0, len(own)))
            x_batch = own.batch(np.array([i]))
            own_batch = own.batch(_draw_excluding(rng, len(own), b_own, i))
            other_batch = other.batch(rng.integers(0, len(other), size=b_other))
            g_own = grad(loss, theta, own_batch)
            g_other = grad(loss, theta, other_batch)
            n_own, n_other = norm(g_own), norm(g_other)
            if n_own < DEGENERATE_NORM or n_other < DEGENERATE_NORM:
                skipped += 1
                continue
            # a_norm(x, own) - a_norm(x, other) in a single tangent pass
            d = axpy(-1.0 / n_other, g_other, scale(1.0 / n_own, g_own))
            t = float(per_example_jvp(loss, theta, d, x_batch)[0])
            hits += t > 0.0
            done += 1
        return hits / trials

    sar = one_rate(d_specific, d_generic, b_specific, b_generic)
    gar = one_rate(d_generic, d_specific, b_generic, b_specific)
    return AlignmentReport(sar, gar, trials, _halfwidth(sar, trials),
                           _halfwidth(gar, trials), skipped)
