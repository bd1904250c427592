"""Maximin aggregation of factor-wise ITEs and the end-to-end DRIFT pipeline.

The worst-case-optimal ITE over the on-target set is ``gamma* @ tau(x)`` where
``gamma*`` minimises ``gamma' Xi gamma`` over the set, ``Xi`` being the second
moment matrix of the factor-wise ITEs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from ._numerics import ConvergenceError, simplex_qp
from .factor_model import FactorConfig, FactorFit, ResponseDataset, fit_cjmle
from .latent_effects import FactorITE, dr_learner, factor_ite, fit_arm_regressions
from .on_target import (
    ExcessLossEvaluator,
    OnTargetSet,
    Representation,
    build_unobserved_geo_evaluator,
    default_radius,
    item_representations,
    observed_geo_evaluator,
    profiled_excess,
)


@dataclass
class XiMatrix:
    Xi: np.ndarray

    def __post_init__(self):
        Xi = np.atleast_2d(np.asarray(self.Xi, dtype=float))
        if Xi.shape[0] != Xi.shape[1]:
            raise ValueError("Xi must be square")
        self.Xi = 0.5 * (Xi + Xi.T)

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.Xi).min())

    def repaired(self) -> np.ndarray:
        """Copy with negative eigenvalues clamped to zero."""
        w, V = np.linalg.eigh(self.Xi)
        if w.min() >= 0:
            return self.Xi.copy()
        R = (V * np.clip(w, 0, None)) @ V.T
        return 0.5 * (R + R.T)


@dataclass
class MaximinSolution:
    gamma_star: np.ndarray
    lambda_star: float
    objective: float
    constraint_residual: float
    iterations: int
    interior: bool = False


class DriftStepError(RuntimeError):
    def __init__(self, step, err):
        super().__init__(f"step {step}: {err}")
        self.step = step


@dataclass
class DriftModel:
    ite: FactorITE
    anchor: Representation
    delta: float
    gamma_star: np.ndarray
    provenance: dict = field(default_factory=dict)
    factor_fit: Optional[FactorFit] = None
    solution: Optional[MaximinSolution] = None
    diagnostics: dict = field(default_factory=dict)

    def predict(self, X):
        return drift_predict(self, X)


def empirical_xi(ite: FactorITE, X) -> XiMatrix:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != ite.B.shape[0]:
        raise ValueError("covariate dimension does not match B")
    T = X @ ite.B
    return XiMatrix(T.T @ T / X.shape[0])


# ----------------------------------------------------------------------------
# solvers

def _minimise_penalised(Xi, ev, lam, gamma, tol=1e-9, max_iter=200):
    """Newton descent on ``g' Xi g + lam * profiled_excess(g)`` with backtracking."""
    def evaluate(g):
        val, _, pgrad, phess = ev.profile(g)
        return (float(g @ Xi @ g) + lam * val, 2 * Xi @ g + lam * pgrad, 2 * Xi + lam * phess)

    f, grad, H = evaluate(gamma)
    scale = max(1.0, lam)
    for it in range(1, max_iter + 1):
        gnorm = np.linalg.norm(grad)
        if gnorm == 0:
            return gamma, it
        try:
            direction = -np.linalg.solve(H, grad)
            if not grad @ direction < 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            direction = -grad
        # small gradient alone is not enough when H is ill-conditioned
        if gnorm <= tol * scale and np.linalg.norm(direction) <= 1e-12 * (1.0 + np.linalg.norm(gamma)):
            return gamma, it
        slope = float(grad @ direction)
        t = 1.0
        for _ in range(60):
            cand = gamma + t * direction
            f_new, g_new, H_new = evaluate(cand)
            if f_new <= f + 1e-4 * t * slope:
                break
            # near the optimum f is below roundoff; fall back to gradient decrease
            if t == 1.0 and np.linalg.norm(g_new) < 0.5 * gnorm:
                break
            t *= 0.5
        else:
            return gamma, it
        gamma, f, grad, H = cand, f_new, g_new, H_new
    raise ConvergenceError("penalised inner problem did not converge", best=gamma)


def solve_maximin(Xi: Union[XiMatrix, np.ndarray], on_target: OnTargetSet,
                  tol=1e-6, max_outer=200) -> MaximinSolution:
    """Minimise ``gamma' Xi gamma`` subject to ``profiled_excess(gamma) <= delta``.

    Lagrangian dual search: for a multiplier ``lam`` the penalised problem is
    solved by Newton descent with envelope-theorem gradients, and ``lam`` is
    located by bracketing (doubling from 1) and a safeguarded root search on
    ``profiled_excess(gamma(lam)) = delta``.
    """
    Xi = Xi if isinstance(Xi, XiMatrix) else XiMatrix(Xi)
    Xi_mat = Xi.repaired()
    ev, delta = on_target.evaluator, float(on_target.delta)
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    anchor = ev.anchor.gamma.copy()
    if delta == 0:
        return MaximinSolution(anchor, math.inf, float(anchor @ Xi_mat @ anchor),
                               profiled_excess(ev, anchor)[0], 0)
    K = Xi_mat.shape[0]
    zero = np.zeros(K)
    pe0 = profiled_excess(ev, zero)[0]
    if pe0 <= delta:
        return MaximinSolution(zero, 0.0, 0.0, pe0 - delta, 0, interior=True)

    state = {"gamma": anchor.copy(), "iters": 0}

    def gap(lam):
        g, n = _minimise_penalised(Xi_mat, ev, lam, state["gamma"])
        state["gamma"], state["iters"] = g, state["iters"] + n
        return profiled_excess(ev, g)[0] - delta

    lo, hi = 0.0, 1.0
    for _ in range(max_outer):
        if gap(hi) <= 0:
            break
        lo, hi = hi, 2 * hi
    else:
        raise ConvergenceError("could not bracket the multiplier", best=state["gamma"])
    if lo == 0.0:
        state["gamma"] = anchor.copy()
    lam = brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=max_outer)
    gap(lam)
    gamma = state["gamma"]
    residual = profiled_excess(ev, gamma)[0] - delta
    if abs(residual) > tol * max(delta, 1.0):
        raise ConvergenceError(f"constraint residual {residual:.3e} above tolerance", best=gamma)
    return MaximinSolution(gamma, float(lam), float(gamma @ Xi_mat @ gamma), float(residual),
                           state["iters"])


def centered_second_moment(U) -> np.ndarray:
    """Population covariance of the rows of ``U``; for a squared-error GEO the
    profiled excess equals ``(g - g_anchor)' S (g - g_anchor)`` with this S."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    Uc = U - U.mean(axis=0)
    return Uc.T @ Uc / U.shape[0]


def solve_maximin_ellipsoid(Xi, anchor_gamma, G, delta) -> MaximinSolution:
    """Closed-form solver for ``min g' Xi g`` s.t. ``(g-a)' G (g-a) <= delta``.

    ``G`` is the (intercept-profiled) quadratic form of the constraint. The
    multiplier solves a one-dimensional secular equation in the generalized
    eigenbasis of ``(Xi, G)``; it is bracketed and bisected to machine
    precision.
    """
    Xi = Xi.repaired() if isinstance(Xi, XiMatrix) else XiMatrix(Xi).repaired()
    a = np.asarray(anchor_gamma, dtype=float).ravel()
    G = np.atleast_2d(np.asarray(G, dtype=float))
    G = 0.5 * (G + G.T)
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if np.linalg.eigvalsh(G).min() <= 0:
        raise ValueError("G must be positive definite")
    if delta == 0:
        return MaximinSolution(a.copy(), math.inf, float(a @ Xi @ a), 0.0, 0)
    if a @ G @ a <= delta:
        return MaximinSolution(np.zeros_like(a), 0.0, 0.0, float(a @ G @ a - delta), 0, interior=True)
    lam, V = scipy.linalg.eigh(Xi, G)
    lam = np.clip(lam, 0, None)
    c = V.T @ G @ a
    null = lam <= 1e-14 * max(1.0, lam.max())

    def secular(mu):
        denom = np.where(null, 1.0, lam + mu)
        r = np.where(null, 0.0, lam * c / denom)
        return float(r @ r) - delta

    def gamma_at(mu):
        w = np.where(null, 1.0, mu / (lam + mu)) if mu > 0 else null.astype(float)
        return V @ (w * c)

    if secular(0.0) <= 0:
        g = gamma_at(0.0)
        return MaximinSolution(g, 0.0, float(g @ Xi @ g), float((g - a) @ G @ (g - a) - delta), 0,
                               interior=True)
    lo, hi = 0.0, 1.0
    iters = 0
    while secular(hi) > 0:
        lo, hi = hi, 2 * hi
        iters += 1
    # bisect down to adjacent floats
    while iters < 5000:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if secular(mid) > 0:
            lo = mid
        else:
            hi = mid
        iters += 1
    mu = hi
    g = gamma_at(mu)
    return MaximinSolution(g, float(mu), float(g @ Xi @ g), float((g - a) @ G @ (g - a) - delta), iters)


def obs_maximin(Xi, items: Sequence[Representation], tol=1e-8, max_iter=5000, return_info=False):
    """Observed-only maximin: the point of the convex hull of item loadings
    with the smallest ``Xi``-norm."""
    if len(items) == 0:
        raise ValueError("need at least one item")
    Xi = Xi.repaired() if isinstance(Xi, XiMatrix) else XiMatrix(Xi).repaired()
    A = np.array([np.asarray(getattr(it, "gamma", it), dtype=float) for it in items])
    M = A @ Xi @ A.T
    lam, gap, iters = simplex_qp(0.5 * (M + M.T), np.zeros(len(A)), tol=tol, max_iter=max_iter)
    gamma = A.T @ lam
    if return_info:
        return gamma, {"weights": lam, "gap": gap, "iterations": iters,
                       "objective": float(gamma @ Xi @ gamma)}
    return gamma


# ----------------------------------------------------------------------------
# pipeline

def _factor_effects(dataset, fit, method, split_seed):
    if method == "randomized":
        return factor_ite(fit_arm_regressions(fit.U, dataset.X, dataset.A))
    if method == "dr":
        return dr_learner(fit.U, dataset.X, dataset.A, split_seed=split_seed)
    raise ValueError(f"unknown method {method!r}")


def drift_from_factors(dataset: ResponseDataset, fit: FactorFit, geo="observed",
                       delta: Union[str, float] = "auto", method="randomized",
                       split_seed=0) -> DriftModel:
    """Steps 2 and 3 of the DRIFT procedure given fitted latent factors."""
    try:
        dataset.require_both_arms()
        ite = _factor_effects(dataset, fit, method, split_seed)
    except Exception as err:
        raise DriftStepError(1, err) from err
    try:
        if geo == "observed":
            if dataset.O is None:
                raise ValueError("dataset has no observed GEO; use geo='unobserved'")
            ev = observed_geo_evaluator(fit.U, dataset.O, dataset.geo_kind)
        elif geo == "unobserved":
            ev = build_unobserved_geo_evaluator(fit, kind=dataset.geo_kind)
        else:
            raise ValueError(f"unknown geo option {geo!r}")
        d = default_radius(ev, item_representations(fit)) if delta == "auto" else float(delta)
    except Exception as err:
        raise DriftStepError(2, err) from err
    try:
        xi = empirical_xi(ite, dataset.X)
        sol = solve_maximin(xi, OnTargetSet(ev, d))
    except Exception as err:
        raise DriftStepError(3, err) from err
    return DriftModel(
        ite=ite, anchor=ev.anchor, delta=d, gamma_star=sol.gamma_star,
        provenance={"geo_source": "observed" if geo == "observed" else "minimax_center",
                    "method": method},
        factor_fit=fit, solution=sol,
        diagnostics={"xi_min_eigenvalue": xi.min_eigenvalue},
    )


def run_drift(dataset: ResponseDataset, config: FactorConfig, geo="observed",
              delta: Union[str, float] = "auto", method="randomized", split_seed=0) -> DriftModel:
    """Fit latent factors, build the on-target set and solve the maximin
    problem; returns a model whose ``predict`` gives the robust ITE."""
    try:
        fit = fit_cjmle(dataset, config)
    except Exception as err:
        raise DriftStepError(1, err) from err
    return drift_from_factors(dataset, fit, geo=geo, delta=delta, method=method,
                              split_seed=split_seed)


def drift_predict(model: DriftModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.ite.B.shape[0]:
        raise ValueError("covariate dimension does not match the model")
    out = x @ (model.ite.B @ model.gamma_star)
    return out[()] if np.ndim(out) == 0 else out


def factorized_geo_predict(model: DriftModel, x) -> np.ndarray:
    """ITE of the factorized GEO anchor alone (no robustification)."""
    return np.asarray(x, dtype=float) @ (model.ite.B @ model.anchor.gamma)


def itr_assign(model: DriftModel, x):
    """Treat when the robust ITE is strictly positive; ties go to control."""
    tau = drift_predict(model, x)
    out = (np.asarray(tau) > 0).astype(int)
    return int(out) if out.ndim == 0 else out
