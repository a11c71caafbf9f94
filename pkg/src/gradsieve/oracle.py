"""Closed-form quadratic bilevel instances for exact hypergradient checks.

Inner loss: sum_i w_i(alpha) * 0.5 (theta-c_i)' A_i (theta-c_i) with
w = softmax(alpha). Outer loss: h(alpha) = 0.5 (theta*(alpha)-c')' A' (theta*-c').
Everything solves in closed form, so the implicit-function hypergradient and
the SOBA direction can be verified to solver precision. The alpha-to-weights
path goes through the same softmax machinery as live selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .selection import softmax, softmax_vjp

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class QuadraticInstance:
    mats: np.ndarray       # (n, d, d) symmetric positive definite
    centers: np.ndarray    # (n, d)
    spec_mat: np.ndarray   # (d, d) SPD
    spec_center: np.ndarray  # (d,)

    @property
    def n(self) -> int:
        return self.mats.shape[0]

    @property
    def dim(self) -> int:
        return self.mats.shape[1]


def instance_q1() -> QuadraticInstance:
    """1-D two-component instance with h(alpha) solvable by hand."""
    return QuadraticInstance(
        mats=np.ones((2, 1, 1)),
        centers=np.array([[0.0], [1.0]]),
        spec_mat=np.ones((1, 1)),
        spec_center=np.array([1.0]),
    )


def random_instance(rng: np.random.Generator, n: int | None = None,
                    dim: int | None = None) -> QuadraticInstance:
    n = n or int(rng.integers(2, 6))
    dim = dim or int(rng.integers(1, 5))

    def spd():
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eigs = rng.uniform(0.5, 2.0, size=dim)
        return (q * eigs) @ q.T

    mats = np.stack([spd() for _ in range(n)])
    centers = rng.standard_normal((n, dim))
    return QuadraticInstance(mats, centers, spd(), rng.standard_normal(dim))


def _weighted_system(inst: QuadraticInstance, w: np.ndarray):
    h_w = np.einsum("i,ijk->jk", w, inst.mats)
    rhs = np.einsum("i,ijk,ik->j", w, inst.mats, inst.centers)
    if np.linalg.cond(h_w) > MAX_CONDITION:
        raise NumericError("weighted inner Hessian is numerically singular")
    return h_w, rhs


def theta_star(inst: QuadraticInstance, alpha: np.ndarray) -> np.ndarray:
    """Closed-form inner solution (sum_i w_i A_i)^-1 sum_i w_i A_i c_i."""
    w = softmax(np.asarray(alpha, dtype=np.float64))
    h_w, rhs = _weighted_system(inst, w)
    return np.linalg.solve(h_w, rhs)


def inner_grad(inst: QuadraticInstance, alpha: np.ndarray,
               theta: np.ndarray) -> np.ndarray:
    w = softmax(np.asarray(alpha, dtype=np.float64))
    return np.einsum("i,ijk,ik->j", w, inst.mats, theta - inst.centers)


def outer_value(inst: QuadraticInstance, alpha: np.ndarray) -> float:
    d = theta_star(inst, alpha) - inst.spec_center
    return 0.5 * float(d @ inst.spec_mat @ d)


def spec_grad(inst: QuadraticInstance, theta: np.ndarray) -> np.ndarray:
    return inst.spec_mat @ (theta - inst.spec_center)


def analytic_hypergrad(inst: QuadraticInstance, alpha: np.ndarray) -> np.ndarray:
    """Implicit-function hypergradient of h at alpha, assembled in closed form."""
    alpha = np.asarray(alpha, dtype=np.float64)
    w = softmax(alpha)
    h_w, _ = _weighted_system(inst, w)
    ts = np.linalg.solve(h_w, np.einsum("i,ijk,ik->j", w, inst.mats, inst.centers))
    q = np.linalg.solve(h_w, spec_grad(inst, ts))
    per_comp = np.einsum("ijk,ik->ij", inst.mats, ts[None, :] - inst.centers)
    m = per_comp @ q
    # grad h = - (dw/dalpha)' m; softmax_vjp applies the same Jacobian
    return softmax_vjp(w, -m)


def finite_diff_hypergrad(inst: QuadraticInstance, alpha: np.ndarray,
                          h: float = 1e-5) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    out = np.zeros_like(alpha)
    for i in range(len(alpha)):
        up, down = alpha.copy(), alpha.copy()
        up[i] += h
        down[i] -= h
        out[i] = (outer_value(inst, up) - outer_value(inst, down)) / (2 * h)
    return out


def soba_dalpha(inst: QuadraticInstance, alpha: np.ndarray, theta: np.ndarray,
                v: np.ndarray) -> np.ndarray:
    """Full-batch SOBA alpha direction for given theta and v."""
    w = softmax(np.asarray(alpha, dtype=np.float64))
    per_comp = np.einsum("ijk,ik->ij", inst.mats, theta[None, :] - inst.centers)
    m = per_comp @ v
    return softmax_vjp(w, m)


def exact_v(inst: QuadraticInstance, alpha: np.ndarray,
            theta: np.ndarray) -> np.ndarray:
    """Direct linear solve for v = -[H_w]^-1 grad_spec at theta."""
    w = softmax(np.asarray(alpha, dtype=np.float64))
    h_w, _ = _weighted_system(inst, w)
    return -np.linalg.solve(h_w, spec_grad(inst, theta))


@dataclass
class SobaTrace:
    h_values: list[float]
    dalpha_rel_errors: list[float]
    final_gap: float
    diverged: bool
    alpha: np.ndarray
    theta: np.ndarray


def min_outer_value(inst: QuadraticInstance, alpha0: np.ndarray) -> float:
    from scipy.optimize import minimize

    res = minimize(lambda a: outer_value(inst, a), alpha0,
                   jac=lambda a: analytic_hypergrad(inst, a), method="BFGS",
                   options={"gtol": 1e-12, "maxiter": 500})
    return float(res.fun)


def run_soba_on_oracle(inst: QuadraticInstance, steps: int,
                       eta_theta: float = 0.1, eta_v: float = 0.1,
                       eta_alpha: float = 0.1, solve_v_exactly: bool = False,
                       alpha0: np.ndarray | None = None) -> SobaTrace:
    """Full-batch SOBA on the closed-form instance.

    With `solve_v_exactly`, theta sits at theta*(alpha) and v comes from a
    direct linear solve, so dalpha must reproduce the analytic hypergradient.
    """
    alpha = np.zeros(inst.n) if alpha0 is None else np.asarray(alpha0, float).copy()
    theta = theta_star(inst, alpha) if solve_v_exactly else np.zeros(inst.dim)
    v = np.zeros(inst.dim)
    h_values: list[float] = []
    rel_errors: list[float] = []
    rises = 0
    diverged = False
    for _ in range(steps):
        if solve_v_exactly:
            theta = theta_star(inst, alpha)
            v = exact_v(inst, alpha, theta)
        else:
            theta = theta - eta_theta * inner_grad(inst, alpha, theta)
            w = softmax(alpha)
            h_w, _ = _weighted_system(inst, w)
            dv = h_w @ v + spec_grad(inst, theta)
            v = v - eta_v * dv
        dalpha = soba_dalpha(inst, alpha, theta, v)
        gh = analytic_hypergrad(inst, alpha)
        denom = max(np.linalg.norm(gh), 1e-30)
        rel_errors.append(float(np.linalg.norm(dalpha - gh) / denom))
        alpha = alpha - eta_alpha * dalpha
        h = outer_value(inst, alpha)
        if h_values and h > h_values[-1]:
            rises += 1
            if rises >= 100:
                diverged = True
        else:
            rises = 0
        h_values.append(h)
    gap = abs(h_values[-1] - min_outer_value(inst, alpha)) if h_values else 0.0
    return SobaTrace(h_values, rel_errors, gap, diverged, alpha, theta)
