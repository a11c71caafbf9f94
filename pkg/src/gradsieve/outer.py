"""Weighting-parameter updates: DDS, SOBA, Anograd, LTR, MetaWeightNet.

All methods share one backbone: compute a per-example coefficient c_x on the
generic batch, push it through the batch softmax (softmax_vjp) and then
through the scorer network (score_vjp) to get the alpha gradient.

- DDS: c_x = <grad l(x; theta), grad specific loss at the unrolled step u>,
  scaled by -rho. Exact derivative of the one-step-unrolled specific loss.
- SOBA: c_x = <grad l(x; theta), v>, with v tracking
  -[hessian of weighted generic loss]^-1 grad specific loss via HVP steps.
- Anograd: c_x = <grad l(x; theta), d>, d the gradient of the negative cosine
  between the weighted generic gradient and the specific gradient. Descending
  the negative cosine maximizes alignment (the derivation's descent step is a
  nonpositive combination of example gradients, so the sign folds in here).
- LTR: one descent step on the DDS objective with the batch weights as free
  variables; no persistent alpha.
- MetaWeightNet: DDS rule where the scorer sees only the example loss.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError
from .numcore import (BatchLoss, ParamVector, axpy, dot, grad, hvp, norm,
                      per_example_jvp, scale)
from .selection import normalize, softmax, softmax_vjp

OUTER_METHODS = ("dds", "soba", "anograd", "ltr", "mwn", "none")

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class OuterState:
    """Weighting parameters plus SOBA's auxiliary variable and step sizes."""

    alpha: ParamVector | None
    v: ParamVector | None
    t: int
    rho: float
    eta_v: float
    eta_alpha: float
    v_max: float

    def __post_init__(self):
        if min(self.rho, self.eta_v, self.v_max) <= 0 or self.eta_alpha < 0:
            raise ContractError("outer learning rates must be positive")


def make_outer_state(method: str, alpha: ParamVector | None,
                     theta_layout, *, rho: float, eta_v: float,
                     eta_alpha: float, v_max: float) -> OuterState:
    if method not in OUTER_METHODS:
        raise ContractError(f"unknown outer method {method!r}")
    v = ParamVector.zeros(theta_layout) if method == "soba" else None
    return OuterState(alpha, v, 0, rho, eta_v, eta_alpha, v_max)


def _alpha_grad_from_coeff(scorer, alpha: ParamVector, scorer_input,
                           w: np.ndarray, coeff: np.ndarray) -> ParamVector:
    ds = softmax_vjp(w, coeff)
    return scorer.score_vjp(alpha, scorer_input, ds)


def _assert_weights_ok(scorer, alpha, scorer_input, ids) -> None:
    # normalize() checks positivity and sums; raises on violation
    normalize(scorer.scores(alpha, scorer_input), ids)


# ---------------------------------------------------------------------------
# DDS: differentiate the specific loss through one unrolled inner step
# ---------------------------------------------------------------------------


def dds_alpha_grad(loss: BatchLoss, scorer, alpha: ParamVector, scorer_input,
                   theta: ParamVector, b_gen, b_spec, rho: float) -> ParamVector:
    w = softmax(scorer.scores(alpha, scorer_input))
    g_w = grad(loss, theta, b_gen, weights=w)
    u = axpy(-rho, g_w, theta)
    g_spec_u = grad(loss, u, b_spec)
    c = per_example_jvp(loss, theta, g_spec_u, b_gen)
    return _alpha_grad_from_coeff(scorer, alpha, scorer_input, w, -rho * c)


def dds_objective(loss: BatchLoss, scorer, alpha: ParamVector, scorer_input,
                  theta: ParamVector, b_gen, b_spec, rho: float) -> float:
    """Specific-batch loss after one simulated weighted inner step (scalar)."""
    from .numcore import loss_value

    w = softmax(scorer.scores(alpha, scorer_input))
    g_w = grad(loss, theta, b_gen, weights=w)
    u = axpy(-rho, g_w, theta)
    return loss_value(loss, u, b_spec)


def dds_update(loss, scorer, scorer_input, theta, state: OuterState,
               b_gen, b_spec) -> tuple[OuterState, list[str]]:
    g_alpha = dds_alpha_grad(loss, scorer, state.alpha, scorer_input, theta,
                             b_gen, b_spec, state.rho)
    alpha = axpy(-state.eta_alpha, g_alpha, state.alpha)
    _assert_weights_ok(scorer, alpha, scorer_input, b_gen.ids)
    return replace(state, alpha=alpha, t=state.t + 1), []


# ---------------------------------------------------------------------------
# SOBA: track v ~ -[H_generic]^-1 grad_specific with Hessian-vector products
# ---------------------------------------------------------------------------


def soba_update(loss, scorer, scorer_input, theta, state: OuterState,
                b_gen, b_spec) -> tuple[OuterState, list[str]]:
    events: list[str] = []
    w = softmax(scorer.scores(state.alpha, scorer_input))
    hv = hvp(loss, theta, state.v, b_gen, weights=w)
    g_spec = grad(loss, theta, b_spec)
    dv = axpy(1.0, hv, g_spec)
    v = axpy(-state.eta_v, dv, state.v)
    vn = norm(v)
    if vn > state.v_max:
        v = scale(state.v_max / vn, v)
        events.append("v_clipped")
    c = per_example_jvp(loss, theta, v, b_gen)
    g_alpha = _alpha_grad_from_coeff(scorer, state.alpha, scorer_input, w, c)
    alpha = axpy(-state.eta_alpha, g_alpha, state.alpha)
    _assert_weights_ok(scorer, alpha, scorer_input, b_gen.ids)
    return replace(state, alpha=alpha, v=v, t=state.t + 1), events


def soba_alpha_direction(loss, scorer, alpha: ParamVector, scorer_input,
                         theta: ParamVector, v: ParamVector, b_gen) -> ParamVector:
    """The d-alpha direction for a given v (used by the oracle cross-checks)."""
    w = softmax(scorer.scores(alpha, scorer_input))
    c = per_example_jvp(loss, theta, v, b_gen)
    return _alpha_grad_from_coeff(scorer, alpha, scorer_input, w, c)


# ---------------------------------------------------------------------------
# Anograd: maximize the cosine between weighted generic and specific gradients
# ---------------------------------------------------------------------------


def _neg_cosine_and_direction(g_w: ParamVector, g_s: ParamVector):
    nw, ns = norm(g_w), norm(g_s)
    if nw < DEGENERATE_NORM or ns < DEGENERATE_NORM:
        return None, None
    cos = dot(g_w, g_s) / (nw * ns)
    # d(-cos)/d g_w
    d = axpy(-1.0 / (nw * ns), g_s, scale(cos / nw**2, g_w))
    return -cos, d


def anograd_update(loss, scorer, scorer_input, theta, state: OuterState,
                   b_gen, b_spec) -> tuple[OuterState, list[str]]:
    w = softmax(scorer.scores(state.alpha, scorer_input))
    g_w = grad(loss, theta, b_gen, weights=w)
    g_s = grad(loss, theta, b_spec)
    neg_cos, d = _neg_cosine_and_direction(g_w, g_s)
    if d is None:
        return replace(state, t=state.t + 1), ["degenerate_batch"]
    c = per_example_jvp(loss, theta, d, b_gen)
    g_alpha = _alpha_grad_from_coeff(scorer, state.alpha, scorer_input, w, c)
    alpha = axpy(-state.eta_alpha, g_alpha, state.alpha)
    _assert_weights_ok(scorer, alpha, scorer_input, b_gen.ids)
    return replace(state, alpha=alpha, t=state.t + 1), []


def anograd_objective(loss, scorer, alpha: ParamVector, scorer_input,
                      theta: ParamVector, b_gen, b_spec) -> float:
    """Negative cosine between the weighted generic and specific gradients."""
    w = softmax(scorer.scores(alpha, scorer_input))
    g_w = grad(loss, theta, b_gen, weights=w)
    g_s = grad(loss, theta, b_spec)
    neg_cos, _ = _neg_cosine_and_direction(g_w, g_s)
    if neg_cos is None:
        raise ContractError("degenerate batch gradients in anograd objective")
    return neg_cos


# ---------------------------------------------------------------------------
# LTR: one-shot reweighting of the current batch, no persistent state
# ---------------------------------------------------------------------------


def ltr_batch_weights(loss: BatchLoss, theta: ParamVector, b_gen, b_spec,
                      rho: float, eta: float) -> tuple[np.ndarray, list[str]]:
    b = len(b_gen)
    base = np.full(b, 1.0 / b)
    g_u = grad(loss, theta, b_gen, weights=base)
    u = axpy(-rho, g_u, theta)
    g_spec_u = grad(loss, u, b_spec)
    c = per_example_jvp(loss, theta, g_spec_u, b_gen)
    # dL/dw_x = -rho * c_x; one descent step from uniform, then clamp+renormalize
    w = np.maximum(base + eta * rho * c, 0.0)
    if np.array_equal(w, base):
        return base, []
    total = w.sum()
    if total <= 0.0:
        return base, ["ltr_all_clamped"]
    return w / total, []


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def outer_update(method: str, loss, scorer, scorer_input, theta,
                 state: OuterState, b_gen, b_spec) -> tuple[OuterState, list[str]]:
    if method == "dds" or method == "mwn":
        return dds_update(loss, scorer, scorer_input, theta, state, b_gen, b_spec)
    if method == "soba":
        return soba_update(loss, scorer, scorer_input, theta, state, b_gen, b_spec)
    if method == "anograd":
        return anograd_update(loss, scorer, scorer_input, theta, state, b_gen, b_spec)
    raise ContractError(f"no persistent outer update for method {method!r}")
