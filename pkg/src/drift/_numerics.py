"""Small numerical kernels shared by the estimation modules."""
from __future__ import annotations

import numpy as np
from scipy.special import expit


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver exhausts its budget.

    The best iterate and the last optimality measure are attached so callers
    can inspect or reuse them.
    """

    def __init__(self, message, best=None, gap=None):
        super().__init__(message)
        self.best = best
        self.gap = gap


def softplus(u):
    """log(1 + exp(u)) without overflow."""
    return np.logaddexp(0.0, u)


def logistic_loss(y, u):
    """Bernoulli negative log-likelihood ``-y*u + log(1+exp(u))``.

    Written as ``y*softplus(-u) + (1-y)*softplus(u)`` so that no cancellation
    happens in the tails. Accepts fractional ``y`` in [0, 1].
    """
    return y * softplus(-u) + (1.0 - y) * softplus(u)


def fit_logistic(D, t, ridge=1e-6, max_iter=200, tol=1e-10, polish=False):
    """Ridge-stabilised logistic regression by damped Newton.

    Minimises ``mean(logistic_loss(t, D @ w)) + ridge * ||w||^2``. Targets may
    be fractional. With ``polish=True`` a second, unpenalised Newton run is
    started from the ridge solution and kept only if it converges to a finite
    point with a lower unpenalised loss; this removes the ridge bias whenever
    the unpenalised minimiser exists.

    Returns
    -------
    w : ndarray
    """
    D = np.asarray(D, dtype=float)
    t = np.asarray(t, dtype=float)
    w = _newton_logistic(D, t, np.zeros(D.shape[1]), ridge, max_iter, tol)
    if polish:
        try:
            w_free = _newton_logistic(D, t, w, 0.0, 50, tol, strict=True)
        except (ConvergenceError, np.linalg.LinAlgError):
            return w
        base = np.mean(logistic_loss(t, D @ w))
        if np.all(np.isfinite(w_free)) and np.mean(logistic_loss(t, D @ w_free)) <= base:
            return w_free
    return w


def _newton_logistic(D, t, w, ridge, max_iter, tol, strict=False):
    n, q = D.shape

    def objective(v):
        return np.mean(logistic_loss(t, D @ v)) + ridge * (v @ v)

    f = objective(w)
    for _ in range(max_iter):
        p = expit(D @ w)
        g = D.T @ (p - t) / n + 2 * ridge * w
        if np.max(np.abs(g)) < tol:
            return w
        h = (D * (p * (1 - p))[:, None]).T @ D / n + 2 * ridge * np.eye(q)
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            if strict:
                raise
            step = np.linalg.lstsq(h, g, rcond=None)[0]
        s = 1.0
        for _ in range(60):
            w_new = w - s * step
            f_new = objective(w_new)
            if f_new <= f - 1e-4 * s * (g @ step):
                break
            s *= 0.5
        else:
            if strict:
                raise ConvergenceError("line search failed", best=w)
            return w
        if abs(f - f_new) < 1e-16 and np.max(np.abs(w_new - w)) < tol:
            return w_new
        w, f = w_new, f_new
    if strict:
        raise ConvergenceError("logistic Newton did not converge", best=w)
    return w


def _support_step(M, c, lam):
    """Move ``lam`` toward the minimiser restricted to its support's affine hull."""
    S = np.flatnonzero(lam > 0)
    k = len(S)
    if k < 2:
        return lam
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2 * M[np.ix_(S, S)]
    kkt[:k, k] = kkt[k, :k] = 1.0
    rhs = np.append(-c[S], 1.0)
    d = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k] - lam[S]
    neg = d < 0
    t = min(1.0, float(np.min(lam[S][neg] / -d[neg]))) if neg.any() else 1.0
    new = lam.copy()
    new[S] += t * d
    new[new < 1e-15] = 0.0
    new /= new.sum()
    if new @ M @ new + c @ new <= lam @ M @ lam + c @ lam:
        return new
    return lam


def simplex_qp(M, c, tol=1e-8, max_iter=5000, polish_every=25):
    """Minimise ``l' M l + c' l`` over the probability simplex.

    Away-step Frank-Wolfe with exact line search; ``M`` must be symmetric PSD.
    Every ``polish_every`` iterations the iterate also takes an active-set step
    on its support, which fixes the slow tail of Frank-Wolfe on ill-conditioned
    faces. Stops once the Frank-Wolfe duality gap is below ``tol``.

    Returns
    -------
    lam : ndarray
        Simplex weights.
    gap : float
        Final duality gap (an upper bound on suboptimality).
    iterations : int
    """
    M = np.asarray(M, dtype=float)
    c = np.asarray(c, dtype=float)
    n = len(c)
    diag = np.diag(M) + c
    lam = np.zeros(n)
    lam[int(np.argmin(diag))] = 1.0
    Ml = M @ lam
    gap = np.inf
    for it in range(max_iter + 1):
        grad = 2 * Ml + c
        s = int(np.argmin(grad))
        gap = float(grad @ lam - grad[s])
        if gap <= tol:
            return lam, max(gap, 0.0), it
        if it == max_iter:
            break
        active = np.flatnonzero(lam > 0)
        v = active[int(np.argmax(grad[active]))]
        away_gap = float(grad[v] - grad @ lam)
        if gap >= away_gap:
            d = -lam.copy()
            d[s] += 1.0
            t_max = 1.0
        else:
            d = lam.copy()
            d[v] -= 1.0
            t_max = lam[v] / (1.0 - lam[v]) if lam[v] < 1 else np.inf
        Md = M @ d
        curv = float(d @ Md)
        slope = float(grad @ d)
        t = t_max if curv <= 0 else min(t_max, -slope / (2 * curv))
        lam = lam + t * d
        lam[lam < 1e-15] = 0.0
        lam /= lam.sum()
        if polish_every and (it + 1) % polish_every == 0:
            lam = _support_step(M, c, lam)
        Ml = M @ lam
    raise ConvergenceError(
        f"simplex QP not converged after {max_iter} iterations (gap={gap:.3e})",
        best=lam, gap=gap,
    )
