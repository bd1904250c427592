"""Generalized factor analysis of mixed binary/continuous item responses.

Latent factors, loadings and intercepts are estimated by constrained joint
maximum likelihood (CJMLE): the summed item loss is minimised subject to
``1 + ||z_i||^2 <= C^2`` for every subject and ``zeta_j^2 + ||alpha_j||^2 <= C^2``
for every item, by alternating projected-gradient block updates.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from ._numerics import logistic_loss

ITEM_KINDS = ("binary", "continuous")


@dataclass(frozen=True)
class ItemSchema:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in ITEM_KINDS:
            if self.kind == "ordinal":
                raise ValueError(
                    f"item {self.name!r}: ordinal items are not supported; "
                    "recode to binary or continuous"
                )
            raise ValueError(f"item {self.name!r}: unknown kind {self.kind!r}")


@dataclass
class ResponseDataset:
    """Covariates ``X`` (N x p), treatment ``A`` (N,), item responses ``Y``
    (N x J) described by ``schema``, and an optional global evaluation
    outcome ``O`` (N,) of kind ``geo_kind``."""

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    schema: Sequence[ItemSchema]
    O: Optional[np.ndarray] = None
    geo_kind: str = "binary"

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.A = np.asarray(self.A, dtype=float).ravel()
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        self.schema = list(self.schema)
        n = self.Y.shape[0]
        if n < 2:
            raise ValueError("need at least two subjects")
        if self.X.shape[0] != n or self.A.shape[0] != n:
            raise ValueError("X, A and Y must have the same number of rows")
        if len(self.schema) == 0 or len(self.schema) != self.Y.shape[1]:
            raise ValueError("schema must describe every column of Y")
        names = [s.name for s in self.schema]
        if len(set(names)) != len(names):
            raise ValueError("item names must be unique")
        for arr, label in ((self.X, "X"), (self.Y, "Y")):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{label} contains missing or non-finite values")
        if not np.all(np.isin(self.A, (0.0, 1.0))):
            raise ValueError("treatment A must be binary 0/1")
        bad = self.binary_mask & ~np.all(np.isin(self.Y, (0.0, 1.0)), axis=0)
        if bad.any():
            raise ValueError(f"binary item {names[int(np.argmax(bad))]!r} has values outside {{0,1}}")
        if self.geo_kind not in ITEM_KINDS:
            raise ValueError(f"unknown GEO kind {self.geo_kind!r}")
        if self.O is not None:
            self.O = np.asarray(self.O, dtype=float).ravel()
            if self.O.shape[0] != n or not np.all(np.isfinite(self.O)):
                raise ValueError("O must be a finite vector with one entry per subject")
            if self.geo_kind == "binary" and not np.all(np.isin(self.O, (0.0, 1.0))):
                raise ValueError("binary GEO must be 0/1")

    @property
    def binary_mask(self) -> np.ndarray:
        return np.array([s.kind == "binary" for s in self.schema])

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def J(self) -> int:
        return self.Y.shape[1]

    def require_both_arms(self):
        if self.A.min() == self.A.max():
            raise ValueError("both treatment arms must be present")


@dataclass
class FactorConfig:
    K: int
    C: Optional[float] = None
    max_sweeps: int = 500
    tol: float = 1e-6
    initial_step: float = 1.0
    shrink: float = 0.5
    armijo_const: float = 1e-4
    max_halvings: int = 30
    init: str = "svd"
    seed: int = 0

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError("K must be a positive integer")
        self.K = int(self.K)
        if self.C is None:
            self.C = 5.0 * math.sqrt(self.K)
        if not self.C > 1:
            raise ValueError("C must exceed 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if self.init not in ("svd", "random"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class FactorFit:
    U: np.ndarray
    W: np.ndarray
    zeta: np.ndarray
    objective_trace: list = field(default_factory=list)
    converged: bool = False
    init_fallback: bool = False

    @property
    def K(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class Reparam:
    """Affine change of latent coordinates ``z -> Q z + mu``."""

    Q: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        mu = np.asarray(self.mu, dtype=float).ravel()
        if Q.shape[0] != Q.shape[1] or mu.shape[0] != Q.shape[0]:
            raise ValueError("Q must be K x K and mu length K")
        if abs(np.linalg.det(Q)) == 0 or np.linalg.cond(Q) > 1e14:
            raise ValueError("Q must be invertible")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "mu", mu)

    def then(self, other: "Reparam") -> "Reparam":
        """Apply ``self`` first, then ``other``."""
        return Reparam(other.Q @ self.Q, other.Q @ self.mu + other.mu)


# ----------------------------------------------------------------------------
# losses

def _check_kind(kind):
    if kind not in ITEM_KINDS:
        raise ValueError(f"unknown item kind {kind!r}")


def _check_finite(*vals):
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite input")


def item_loss(kind: str, y, u):
    """Loss of natural parameter ``u`` for response ``y``.

    Squared error for continuous items; Bernoulli negative log-likelihood
    for binary items (fractional ``y`` in [0, 1] allowed).
    """
    _check_kind(kind)
    _check_finite(y, u)
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if kind == "continuous":
        out = (y - u) ** 2
    else:
        if np.any((y < 0) | (y > 1)):
            raise ValueError("binary targets must lie in [0, 1]")
        out = logistic_loss(y, u)
    return out[()] if out.ndim == 0 else out


def item_loss_grad(kind: str, y, u):
    """Derivative of :func:`item_loss` with respect to ``u``."""
    _check_kind(kind)
    _check_finite(y, u)
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if kind == "continuous":
        out = 2.0 * (u - y)
    else:
        if np.any((y < 0) | (y > 1)):
            raise ValueError("binary targets must lie in [0, 1]")
        out = expit(u) - y
    return out[()] if out.ndim == 0 else out


def _loss_matrix(Y, M, binary):
    # softplus(u) - y*u is exact enough for whole-matrix sums and one
    # transcendental call cheaper than the tail-stable form
    if binary.all():
        return np.logaddexp(0.0, M) - Y * M
    if not binary.any():
        return (Y - M) ** 2
    return np.where(binary, np.logaddexp(0.0, M) - Y * M, (Y - M) ** 2)


def _grad_matrix(Y, M, binary):
    if binary.all():
        return expit(M) - Y
    if not binary.any():
        return 2.0 * (M - Y)
    return np.where(binary, expit(M) - Y, 2.0 * (M - Y))


# ----------------------------------------------------------------------------
# feasibility projections

def project_subject(z, C: float):
    """Radial projection onto ``1 + ||z||^2 <= C^2``; accepts a single vector or
    a matrix of row vectors."""
    if not C > 1:
        raise ValueError("C must exceed 1")
    z = np.asarray(z, dtype=float)
    radius = math.sqrt(C * C - 1.0)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return z * scale


def project_item(zeta, alpha, C: float):
    """Radial projection of the joint vector ``(zeta, alpha)`` onto the ball of
    radius ``C``. Vectorised over leading dimensions."""
    if not C > 0:
        raise ValueError("C must be positive")
    zeta = np.asarray(zeta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    norms = np.sqrt(zeta ** 2 + np.sum(alpha ** 2, axis=-1))
    scale = np.where(norms > C, C / np.where(norms > 0, norms, 1.0), 1.0)
    return zeta * scale, alpha * scale[..., None]


# ----------------------------------------------------------------------------
# CJMLE

def natural_params(fit: FactorFit) -> np.ndarray:
    """``U W' - 1 zeta'``."""
    return fit.U @ fit.W.T - fit.zeta[None, :]


def cjmle_objective(dataset: ResponseDataset, fit: FactorFit) -> float:
    return float(np.sum(_loss_matrix(dataset.Y, natural_params(fit), dataset.binary_mask)))


def _working_matrix(dataset):
    Y = dataset.Y
    binary = dataset.binary_mask
    mean = Y.mean(axis=0)
    sd = Y.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    work = np.where(binary, 2.0 * Y - 1.0, (Y - mean) / sd)
    scale = np.where(binary, 1.0, sd)
    p = np.clip(mean, 1e-3, 1 - 1e-3)
    zeta0 = np.where(binary, -np.log(p / (1 - p)), -mean)
    return work, scale, zeta0


def init_factors(dataset: ResponseDataset, config: FactorConfig) -> FactorFit:
    """Starting point for :func:`fit_cjmle`.

    Truncated SVD of the centred working matrix (binary items mapped to
    ``2y-1``, continuous items standardised), intercepts from column means,
    everything projected to the feasible set. Falls back to a seeded random
    start when the working matrix has rank below ``K``.
    """
    K, C = config.K, config.C
    N, J = dataset.Y.shape
    if J < K:
        raise ValueError(f"need at least K={K} items, got {J}")
    work, scale, zeta0 = _working_matrix(dataset)
    fallback = False
    if config.init == "svd":
        centred = work - work.mean(axis=0)
        u, s, vt = np.linalg.svd(centred, full_matrices=False)
        tol = s.max(initial=0.0) * max(N, J) * np.finfo(float).eps
        if np.sum(s > tol) < K:
            warnings.warn("working matrix has rank < K; using random initialisation")
            fallback = True
        else:
            U = u[:, :K] * math.sqrt(N)
            W = vt[:K].T * (s[:K] / math.sqrt(N)) * scale[:, None]
    if config.init == "random" or fallback:
        rng = np.random.default_rng(config.seed)
        U = rng.standard_normal((N, K))
        W = rng.standard_normal((J, K)) / math.sqrt(K)
    U = project_subject(U, C)
    zeta, W = project_item(zeta0, W, C)
    fit = FactorFit(U=U, W=W, zeta=zeta, init_fallback=fallback)
    fit.objective_trace = [cjmle_objective(dataset, fit)]
    return fit


def _item_half_step(Y, binary, U, W, zeta, cfg):
    N = Y.shape[0]
    M = U @ W.T - zeta
    f0 = _loss_matrix(Y, M, binary).mean(axis=0)
    G = _grad_matrix(Y, M, binary)
    g_alpha = G.T @ U / N
    g_zeta = -G.mean(axis=0)
    step = np.full(W.shape[0], cfg.initial_step)
    pending = np.ones(W.shape[0], dtype=bool)
    W_new, zeta_new = W.copy(), zeta.copy()
    for _ in range(cfg.max_halvings + 1):
        idx = np.flatnonzero(pending)
        if idx.size == 0:
            break
        z_c, a_c = project_item(
            zeta[idx] - step[idx] * g_zeta[idx],
            W[idx] - step[idx, None] * g_alpha[idx],
            cfg.C,
        )
        Mc = U @ a_c.T - z_c
        fc = _loss_matrix(Y[:, idx], Mc, binary[idx]).mean(axis=0)
        decrease = g_zeta[idx] * (z_c - zeta[idx]) + np.sum(g_alpha[idx] * (a_c - W[idx]), axis=1)
        ok = fc <= f0[idx] + cfg.armijo_const * decrease
        W_new[idx[ok]] = a_c[ok]
        zeta_new[idx[ok]] = z_c[ok]
        pending[idx[ok]] = False
        step[idx[~ok]] *= cfg.shrink
    return W_new, zeta_new


def _subject_half_step(Y, binary, U, W, zeta, cfg):
    J = Y.shape[1]
    M = U @ W.T - zeta
    f0 = _loss_matrix(Y, M, binary).mean(axis=1)
    G = _grad_matrix(Y, M, binary)
    g = G @ W / J
    step = np.full(U.shape[0], cfg.initial_step)
    pending = np.ones(U.shape[0], dtype=bool)
    U_new = U.copy()
    for _ in range(cfg.max_halvings + 1):
        idx = np.flatnonzero(pending)
        if idx.size == 0:
            break
        cand = project_subject(U[idx] - step[idx, None] * g[idx], cfg.C)
        Mc = cand @ W.T - zeta
        fc = _loss_matrix(Y[idx], Mc, binary).mean(axis=1)
        ok = fc <= f0[idx] + cfg.armijo_const * np.sum(g[idx] * (cand - U[idx]), axis=1)
        U_new[idx[ok]] = cand[ok]
        pending[idx[ok]] = False
        step[idx[~ok]] *= cfg.shrink
    return U_new


def fit_cjmle(dataset: ResponseDataset, config: FactorConfig, init: Optional[FactorFit] = None) -> FactorFit:
    """Constrained joint maximum likelihood by alternating projected gradient.

    Each sweep updates every item block ``(zeta_j, alpha_j)`` with ``U`` held
    fixed, then every subject block ``z_i`` with the item parameters held
    fixed. Every block takes one projected-gradient step with Armijo
    backtracking on its own (averaged) loss; a block whose line search fails
    keeps its value, so the summed objective never increases. Blocks within
    a half-sweep only read the other half's current values, so the vectorised
    update equals the sequential one.
    """
    N, J = dataset.Y.shape
    if J < config.K or N < config.K:
        raise ValueError("need N >= K and J >= K")
    fit = init if init is not None else init_factors(dataset, config)
    U = project_subject(fit.U, config.C)
    zeta, W = project_item(fit.zeta, fit.W, config.C)
    Y, binary = dataset.Y, dataset.binary_mask
    trace = [float(np.sum(_loss_matrix(Y, U @ W.T - zeta, binary)))]
    converged = False
    for _ in range(config.max_sweeps):
        W, zeta = _item_half_step(Y, binary, U, W, zeta, config)
        U = _subject_half_step(Y, binary, U, W, zeta, config)
        obj = float(np.sum(_loss_matrix(Y, U @ W.T - zeta, binary)))
        prev = trace[-1]
        trace.append(min(obj, prev))
        if abs(prev - obj) <= config.tol * max(abs(prev), np.finfo(float).tiny):
            converged = True
            break
    return FactorFit(U=U, W=W, zeta=zeta, objective_trace=trace,
                     converged=converged, init_fallback=fit.init_fallback)


# ----------------------------------------------------------------------------
# rotations and reparameterisation

def _varimax_criterion(L):
    sq = L ** 2
    return float(np.sum(np.var(sq, axis=0)))


def varimax_rotate(W, max_iter=1000, tol=1e-12):
    """Orthogonal varimax rotation (Kaiser's criterion, SVD iteration).

    Returns
    -------
    W_rot : ndarray
        ``W @ R``.
    R : ndarray
        Orthogonal K x K rotation.
    """
    W = np.asarray(W, dtype=float)
    J, K = W.shape
    if J < K:
        raise ValueError("need J >= K")
    R = np.eye(K)
    if K == 1:
        return W.copy(), R
    d_old = 0.0
    for _ in range(max_iter):
        L = W @ R
        target = L ** 3 - L @ np.diag(np.sum(L ** 2, axis=0)) / J
        u, s, vt = np.linalg.svd(W.T @ target)
        R = u @ vt
        d = float(np.sum(s))
        if d <= d_old * (1 + tol):
            break
        d_old = d
    if _varimax_criterion(W @ R) < _varimax_criterion(W):
        R = np.eye(K)
    return W @ R, R


def promax_rotate(W, power: int = 4):
    """Oblique promax rotation.

    Varimax first (on Kaiser-normalised rows), then a least-squares
    regression of the varimax loadings onto the target
    ``sign(L) * |L|**power``; the regression columns are rescaled so the
    implied factor correlation matrix has a unit diagonal.

    Returns
    -------
    W_rot : ndarray
        Pattern loadings ``W @ R``.
    R : ndarray
        Invertible K x K transformation (generally not orthogonal).
    """
    W = np.asarray(W, dtype=float)
    if power < 1:
        raise ValueError("power must be >= 1")
    J, K = W.shape
    if J < K:
        raise ValueError("need J >= K")
    h = np.sqrt(np.sum(W ** 2, axis=1))
    h = np.where(h > 0, h, 1.0)
    _, R_vm = varimax_rotate(W / h[:, None])
    L = W @ R_vm
    target = np.sign(L) * np.abs(L) ** power
    gram = L.T @ L
    if np.linalg.cond(gram) > 1e12:
        raise np.linalg.LinAlgError("singular promax target regression")
    P = np.linalg.solve(gram, L.T @ target)
    scale = np.sqrt(np.diag(np.linalg.inv(P.T @ P)))
    P = P * scale[None, :]
    R = R_vm @ P
    if abs(np.linalg.det(R)) < 1e-12:
        raise np.linalg.LinAlgError("promax rotation is singular")
    return W @ R, R


def apply_reparam(fit: FactorFit, rep: Reparam) -> FactorFit:
    """Express a fit in the coordinates ``z~ = Q z + mu``; the natural
    parameters are unchanged."""
    Q_inv_T = np.linalg.inv(rep.Q).T
    U = fit.U @ rep.Q.T + rep.mu[None, :]
    W = fit.W @ Q_inv_T.T
    zeta = fit.zeta + W @ rep.mu
    return replace(fit, U=U, W=W, zeta=zeta, objective_trace=list(fit.objective_trace))
