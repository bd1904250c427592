"""GEO anchor, empirical excess loss and the on-target set of weights.

A representation is a linear functional ``phi(z) = gamma @ z - zeta`` of the
latent factors. The on-target set collects every weight vector ``gamma`` whose
best intercept keeps the GEO excess loss below a radius ``delta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import expit, logit

from ._numerics import ConvergenceError, fit_logistic, logistic_loss, simplex_qp
from .factor_model import FactorFit, ITEM_KINDS

EXCESS_CLAMP = 1e-12


@dataclass(frozen=True)
class Representation:
    gamma: np.ndarray
    zeta: float

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float).ravel()
        if not (np.all(np.isfinite(gamma)) and math.isfinite(self.zeta)):
            raise ValueError("representation must be finite")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "zeta", float(self.zeta))

    def __call__(self, U):
        return np.asarray(U, dtype=float) @ self.gamma - self.zeta

    @property
    def theta(self):
        """Coefficients on the augmented design ``[z, 1]``."""
        return np.append(self.gamma, -self.zeta)


def _mean_loss(kind, t, u):
    if kind == "continuous":
        return float(np.mean((t - u) ** 2))
    return float(np.mean(logistic_loss(t, u)))


class ExcessLossEvaluator:
    """Empirical excess GEO loss over fitted factors ``U``.

    ``targets`` are the observed GEO values, or fractional conditional means
    when the GEO is not observed. The anchor must minimise the empirical loss
    over all representations; this is checked on construction against a
    small probe set around it.
    """

    def __init__(self, U, targets, kind: str, anchor: Representation, check: bool = True):
        if kind not in ITEM_KINDS:
            raise ValueError(f"unknown GEO kind {kind!r}")
        self.U = np.atleast_2d(np.asarray(U, dtype=float))
        self.targets = np.asarray(targets, dtype=float).ravel()
        if self.targets.shape[0] != self.U.shape[0]:
            raise ValueError("targets must have one entry per subject")
        if kind == "binary" and np.any((self.targets < 0) | (self.targets > 1)):
            raise ValueError("binary GEO targets must lie in [0, 1]")
        if anchor.gamma.shape[0] != self.U.shape[1]:
            raise ValueError("anchor dimension does not match U")
        self.kind = kind
        self.anchor = anchor
        self.anchor_loss = self.loss(anchor)
        self._t_mean = float(self.targets.mean())
        if check:
            self._check_anchor()

    @property
    def K(self):
        return self.U.shape[1]

    def loss(self, phi: Representation) -> float:
        return _mean_loss(self.kind, self.targets, phi(self.U))

    def _check_anchor(self, step=1e-3):
        base = self.anchor.theta
        for k in range(base.size):
            for sign in (-1.0, 1.0):
                th = base.copy()
                th[k] += sign * step
                cand = Representation(th[:-1], -th[-1])
                if self.loss(cand) < self.anchor_loss - 1e-8:
                    raise ValueError("anchor does not minimise the empirical GEO loss")

    # -- profiling over the intercept ---------------------------------------

    def best_zeta(self, gamma) -> float:
        s = self.U @ np.asarray(gamma, dtype=float)
        if self.kind == "continuous":
            return float(np.mean(s - self.targets))
        return _profile_zeta_binary(s, self.targets, self._t_mean)

    def profile(self, gamma):
        """Profiled excess with its gradient and Hessian in ``gamma``.

        The gradient follows from the envelope theorem (loss derivative
        evaluated at the optimal intercept); the Hessian is the Schur
        complement that accounts for the intercept moving with ``gamma``.
        """
        gamma = np.asarray(gamma, dtype=float)
        s = self.U @ gamma
        zeta = self.best_zeta(gamma)
        u = s - zeta
        if self.kind == "continuous":
            d1 = 2.0 * (u - self.targets)
            d2 = np.full_like(u, 2.0)
        else:
            p = expit(u)
            d1 = p - self.targets
            d2 = p * (1 - p)
        value = _mean_loss(self.kind, self.targets, u) - self.anchor_loss
        grad = self.U.T @ d1 / len(u)
        wz = self.U.T @ d2 / len(u)
        hess = (self.U * d2[:, None]).T @ self.U / len(u) - np.outer(wz, wz) / max(d2.mean(), 1e-300)
        return _clamp(value), zeta, grad, hess


def _clamp(value):
    return 0.0 if -EXCESS_CLAMP <= value < 0 else value


def _profile_zeta_binary(s, t, t_mean, tol=1e-10, max_iter=100):
    if not 0 < t_mean < 1:
        raise ValueError("binary GEO targets are all 0 or all 1; intercept is unbounded")
    shift = logit(t_mean)
    lo, hi = float(s.min() - shift), float(s.max() - shift)

    def h(zeta):
        return t_mean - float(np.mean(expit(s - zeta)))

    zeta = float(np.mean(s) - shift)
    for _ in range(max_iter):
        val = h(zeta)
        if val == 0:
            return zeta
        if val < 0:
            lo = zeta
        else:
            hi = zeta
        p = expit(s - zeta)
        slope = float(np.mean(p * (1 - p)))
        new = zeta - val / slope if slope > 0 else 0.5 * (lo + hi)
        if not lo <= new <= hi:
            new = 0.5 * (lo + hi)
        if abs(new - zeta) <= tol * max(1.0, abs(zeta)):
            return new
        zeta = new
    # bisection fallback
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if h(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, abs(mid)):
            return 0.5 * (lo + hi)
    raise ConvergenceError("intercept profiling failed", best=0.5 * (lo + hi))


@dataclass
class OnTargetSet:
    evaluator: ExcessLossEvaluator
    delta: float

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError("delta must be nonnegative")

    def contains(self, gamma, slack=0.0) -> bool:
        return profiled_excess(self.evaluator, gamma)[0] <= self.delta + slack


# ----------------------------------------------------------------------------
# operations

def fit_geo_observed(U, o, kind: str = "binary") -> Representation:
    """Best linear representation of an observed GEO (least squares or
    ridge-stabilised logistic regression on ``[z, -1]``)."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    o = np.asarray(o, dtype=float).ravel()
    if kind not in ITEM_KINDS:
        raise ValueError(f"unknown GEO kind {kind!r}")
    if np.any(np.ptp(U, axis=0) == 0):
        raise ValueError("latent factor matrix has a constant column")
    if kind == "binary" and not np.all((o >= 0) & (o <= 1)):
        raise ValueError("binary GEO must lie in [0, 1]")
    D = np.hstack([U, -np.ones((U.shape[0], 1))])
    if kind == "continuous":
        theta = np.linalg.lstsq(D, o, rcond=None)[0]
    else:
        theta = fit_logistic(D, o, ridge=1e-6, polish=True)
    return Representation(theta[:-1], theta[-1])


def observed_geo_evaluator(U, o, kind: str = "binary") -> ExcessLossEvaluator:
    return ExcessLossEvaluator(U, o, kind, fit_geo_observed(U, o, kind))


def item_representations(fit: FactorFit) -> List[Representation]:
    return [Representation(fit.W[j].copy(), fit.zeta[j]) for j in range(fit.W.shape[0])]


def minimax_center(U, items: Sequence[Representation], tol=1e-8, max_iter=5000,
                   return_info=False):
    """Representation minimising the largest mean squared distance to the
    item representations over the fitted factors.

    Solved through the concave dual over simplex weights on the items, whose
    inner minimiser is the weighted average of the item coefficients.
    """
    if len(items) == 0:
        raise ValueError("need at least one item representation")
    U = np.atleast_2d(np.asarray(U, dtype=float))
    Z1 = np.hstack([U, np.ones((U.shape[0], 1))])
    G = Z1.T @ Z1 / U.shape[0]
    Theta = np.array([it.theta for it in items])
    M = Theta @ G @ Theta.T
    M = 0.5 * (M + M.T)
    q = np.diag(M).copy()
    try:
        lam, gap, iters = simplex_qp(M, -q, tol=tol, max_iter=max_iter)
    except ConvergenceError as err:
        th = Theta.T @ err.best
        raise ConvergenceError(str(err), best=Representation(th[:-1], -th[-1]), gap=err.gap) from None
    th = Theta.T @ lam
    center = Representation(th[:-1], -th[-1])
    if return_info:
        value = float(lam @ q - th @ G @ th)
        return center, {"weights": lam, "value": value, "gap": gap, "iterations": iters}
    return center


def excess_loss(ev: ExcessLossEvaluator, phi: Representation) -> float:
    return _clamp(ev.loss(phi) - ev.anchor_loss)


def profiled_excess(ev: ExcessLossEvaluator, gamma) -> Tuple[float, float]:
    """Excess loss minimised over the intercept; returns ``(value, zeta*)``."""
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite")
    zeta = ev.best_zeta(gamma)
    return excess_loss(ev, Representation(gamma, zeta)), zeta


def null_excess(ev: ExcessLossEvaluator) -> float:
    return profiled_excess(ev, np.zeros(ev.K))[0]


def default_radius(ev: ExcessLossEvaluator, items: Sequence[Representation]) -> float:
    """``min(largest item excess, 0.95 * null-model excess)``."""
    if len(items) == 0:
        raise ValueError("need at least one item representation")
    largest = max(excess_loss(ev, it) for it in items)
    return min(largest, 0.95 * null_excess(ev))


def build_unobserved_geo_evaluator(fit: FactorFit, kind: str = "binary") -> ExcessLossEvaluator:
    """Evaluator for a GEO that was not measured: the anchor is the minimax
    center of the items and the targets are its implied conditional means."""
    anchor = minimax_center(fit.U, item_representations(fit))
    eta = anchor(fit.U)
    targets = expit(eta) if kind == "binary" else eta
    return ExcessLossEvaluator(fit.U, targets, kind, anchor)
