"""Factor-wise treatment response models and treatment-effect coefficients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import expit

from ._numerics import fit_logistic


@dataclass
class ArmModels:
    Lambda0: np.ndarray  # K x p
    Lambda1: np.ndarray  # K x p


@dataclass
class FactorITE:
    """Linear factor-wise ITEs: ``tau_k(x) = B[:, k] @ x``."""

    B: np.ndarray  # p x K
    method: str = "randomized_ols"

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if not np.all(np.isfinite(self.B)):
            raise ValueError("non-finite ITE coefficients")
        if self.method not in ("randomized_ols", "dr_learner"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class PropensityModel:
    coef: np.ndarray
    clip: Tuple[float, float] = (0.01, 0.99)

    def __post_init__(self):
        lo, hi = self.clip
        if not 0 < lo < hi < 1:
            raise ValueError("clip bounds must satisfy 0 < lo < hi < 1")

    def predict(self, X):
        return np.clip(expit(np.asarray(X, dtype=float) @ self.coef), *self.clip)


def _ols(X, Y, label="design"):
    rank = np.linalg.matrix_rank(X)
    if X.shape[0] < X.shape[1] or rank < X.shape[1]:
        raise np.linalg.LinAlgError(f"{label} is rank deficient (rank {rank} < {X.shape[1]})")
    return np.linalg.lstsq(X, Y, rcond=None)[0]


def fit_arm_regressions(U, X, A) -> ArmModels:
    """Per-arm least squares of every latent column on ``X``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A = np.asarray(A).ravel()
    lambdas = []
    for arm in (0, 1):
        rows = A == arm
        coef = _ols(X[rows], U[rows], label=f"design for arm {arm}")
        lambdas.append(coef.T)
    return ArmModels(Lambda0=lambdas[0], Lambda1=lambdas[1])


def factor_ite(models: ArmModels) -> FactorITE:
    if models.Lambda0.shape != models.Lambda1.shape:
        raise ValueError("arm models disagree in shape")
    return FactorITE(B=(models.Lambda1 - models.Lambda0).T, method="randomized_ols")


def ite_predict(ite: FactorITE, x) -> np.ndarray:
    """Factor-wise ITEs at ``x`` (a p-vector or an n x p matrix)."""
    return np.asarray(x, dtype=float) @ ite.B


def fit_propensity(X, A, clip=(0.01, 0.99)) -> PropensityModel:
    A = np.asarray(A, dtype=float).ravel()
    if A.min() == A.max():
        raise ValueError("propensity model needs both treatment classes")
    coef = fit_logistic(X, A, ridge=1e-6)
    return PropensityModel(coef=coef, clip=tuple(clip))


def dr_learner(U, X, A, split_seed=0, clip=(0.01, 0.99), propensity=None) -> FactorITE:
    """Two-stage doubly robust estimate of the factor-wise ITE coefficients.

    Nuisances (propensity, per-arm outcome regressions) are trained on one
    random half of the subjects; the pseudo-outcome is built and regressed
    on ``X`` in the other half. ``propensity`` may be a callable returning
    known assignment probabilities, in which case no propensity model is fit.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A = np.asarray(A, dtype=float).ravel()
    N, p = X.shape
    if N < 4 * p:
        raise ValueError(f"DR-learner needs N >= 4p ({N} < {4 * p})")
    half = N // 2
    perm = np.random.default_rng(split_seed).permutation(N)
    d1, d2 = perm[:half], perm[half:2 * half]
    for part, idx in (("first", d1), ("second", d2)):
        if np.unique(A[idx]).size < 2:
            raise ValueError(f"a treatment arm is missing from the {part} half; try another split_seed")

    arms = fit_arm_regressions(U[d1], X[d1], A[d1])
    if propensity is None:
        s = fit_propensity(X[d1], A[d1], clip=clip).predict(X[d2])
    else:
        s = np.asarray(propensity(X[d2]), dtype=float)
    pseudo = pseudo_outcomes(U[d2], X[d2], A[d2], s, arms)
    B = _ols(X[d2], pseudo, label="second-stage design")
    return FactorITE(B=B, method="dr_learner")


def pseudo_outcomes(U, X, A, s, arms: ArmModels) -> np.ndarray:
    """DR pseudo-outcomes for given propensities and outcome models."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A = np.asarray(A, dtype=float).ravel()
    f0 = X @ arms.Lambda0.T
    f1 = X @ arms.Lambda1.T
    f_obs = np.where(A[:, None] == 1, f1, f0)
    weight = (A - s) / (s * (1 - s))
    return weight[:, None] * (np.asarray(U, dtype=float) - f_obs) + f1 - f0
