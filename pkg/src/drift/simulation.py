"""Synthetic studies with a hyper-population of outcome loadings.

Observed item loadings and external evaluation loadings are drawn around the
GEO weight vector as ``gamma_geo + r * ||gamma_geo|| * R * v`` with
``R ~ Beta(5, 1.5)`` and ``v`` von Mises-Fisher around the GEO direction.
Every method's ITE predictions are scored by worst-case sign accuracy and
worst-case correlation across the external outcomes.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from ._numerics import fit_logistic
from .factor_model import FactorConfig, ItemSchema, ResponseDataset, fit_cjmle, promax_rotate
from .latent_effects import factor_ite, fit_arm_regressions
from .maximin import empirical_xi, obs_maximin, solve_maximin
from .on_target import (
    build_unobserved_geo_evaluator,
    default_radius,
    OnTargetSet,
    item_representations,
    observed_geo_evaluator,
)

log = logging.getLogger(__name__)

METHODS = ("original_geo", "factorized_geo", "drift", "drift_n", "obs_maximin")

# 0.5 * standard normal draws from np.random.default_rng(16): Lambda0 is the first
# 3 x 5 block, Lambda1 the second; the last column multiplies the intercept.
# Seed 16 is the first seed whose GEO-oracle worst-case sign accuracy lands near
# the baseline level 0.165 (see ``calibrate_lambda_seed``).
DEFAULT_LAMBDA0 = (
    (-0.2973618489201882, 0.315391743709918, 0.5196770616118788, 0.5154608722692742, 0.9089230493644717),
    (-0.19259469042511926, 0.27208859437634014, -0.18311084092861832, -0.7124242565031677, -0.35192956026943584),
    (0.06808116922663085, -0.45758736456996013, -0.09573550985947034, 0.5601250378739552, 0.28522584537928025),
)
DEFAULT_LAMBDA1 = (
    (0.28617182759029547, 0.17256121395971422, -0.0876378959863221, -0.9338714539920695, 0.49572927981793374),
    (-0.7533300372111784, 0.10804252158110818, -0.054195862482720625, 0.0686362130124646, 0.12616838426776317),
    (-0.16692128624009459, 0.45049176172151445, -0.6425506598508317, 0.39595229072355725, -0.8459734641846323),
)
CALIBRATION_TARGET = 0.165


@dataclass
class SimConfig:
    N: int = 300
    p: int = 5
    K: int = 3
    J: int = 30
    T: int = 1000
    r: float = 1.0
    sigma_v: float = 1.0
    sigma_v_external: float = 1.0
    beta_params: tuple = (5.0, 1.5)
    gamma_geo: tuple = (1.0, 1.0, 1.0)
    Lambda0: tuple = DEFAULT_LAMBDA0
    Lambda1: tuple = DEFAULT_LAMBDA1
    item_intercepts: object = "zero"
    reps: int = 100
    seed: int = 0
    eval_mode: str = "in_sample"
    max_sweeps: int = 500

    def __post_init__(self):
        self.beta_params = tuple(float(b) for b in self.beta_params)
        self.gamma_geo = tuple(float(g) for g in self.gamma_geo)
        self.Lambda0 = tuple(tuple(float(v) for v in row) for row in self.Lambda0)
        self.Lambda1 = tuple(tuple(float(v) for v in row) for row in self.Lambda1)
        if self.r < 0:
            raise ValueError("r must be nonnegative")
        if not self.sigma_v > 0 or not self.sigma_v_external > 0:
            raise ValueError("vMF concentrations must be positive")
        if len(self.gamma_geo) != self.K or not np.linalg.norm(self.gamma_geo) > 0:
            raise ValueError("gamma_geo must be a nonzero K-vector")
        L0, L1 = self.lambda0, self.lambda1
        if L0.shape != (self.K, self.p) or L1.shape != (self.K, self.p):
            raise ValueError("Lambda matrices must be K x p")
        if np.linalg.matrix_rank(L1 - L0) < self.K:
            raise ValueError("Lambda1 - Lambda0 must have rank K")
        if self.eval_mode not in ("in_sample", "fresh"):
            raise ValueError("eval_mode must be 'in_sample' or 'fresh'")
        if isinstance(self.item_intercepts, str):
            if self.item_intercepts != "zero":
                raise ValueError("item_intercepts must be 'zero' or a list of J numbers")
        else:
            self.item_intercepts = tuple(float(v) for v in self.item_intercepts)
            if len(self.item_intercepts) != self.J:
                raise ValueError("item_intercepts must have J entries")
        probe = _covariates(np.random.default_rng(12345), 1000, self.p)
        tau = probe @ (L1 - L0).T @ np.asarray(self.gamma_geo)
        if tau.min() >= 0 or tau.max() <= 0:
            raise ValueError("the GEO treatment effect must take both signs")

    @property
    def lambda0(self):
        return np.array(self.Lambda0, dtype=float)

    @property
    def lambda1(self):
        return np.array(self.Lambda1, dtype=float)

    @property
    def gamma(self):
        return np.array(self.gamma_geo, dtype=float)

    @property
    def B_true(self):
        """True factor-wise ITE coefficients, p x K."""
        return (self.lambda1 - self.lambda0).T

    @property
    def intercepts(self):
        if isinstance(self.item_intercepts, str):
            return np.zeros(self.J)
        return np.array(self.item_intercepts)


@dataclass
class GroundTruth:
    Z0: np.ndarray
    Z1: np.ndarray
    Z: np.ndarray
    loadings: np.ndarray
    intercepts: np.ndarray
    B_true: np.ndarray
    arm_redraws: int = 0


@dataclass
class ExternalOutcomes:
    loadings: np.ndarray  # T x K
    true_ite_coef: np.ndarray  # T x p


@dataclass
class MethodResult:
    method: str
    acc: np.ndarray
    cor: np.ndarray
    acc_min: float
    cor_min: float
    n_cor_flagged: int = 0


# ----------------------------------------------------------------------------
# sampling

def sample_vmf(mu, kappa, rng, size=None):
    """Von Mises-Fisher draws on the unit sphere (Wood's rejection scheme).

    The cosine with ``mu`` is drawn by beta-envelope rejection; the remaining
    direction is uniform on the sphere orthogonal to ``mu``. ``kappa = 0``
    gives the uniform distribution.
    """
    mu = np.asarray(mu, dtype=float).ravel()
    if abs(np.linalg.norm(mu) - 1) > 1e-9:
        raise ValueError("mu must be a unit vector")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    n = 1 if size is None else int(size)
    m = mu.size
    if m == 1:
        p_plus = expit(2 * kappa)
        out = np.where(rng.random(n) < p_plus, 1.0, -1.0)[:, None] * mu
        return out[0] if size is None else out
    w = _vmf_cosines(kappa, m, n, rng)
    v = rng.standard_normal((n, m))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    out = w[:, None] * mu + np.sqrt(np.clip(1 - w ** 2, 0, None))[:, None] * v
    return out[0] if size is None else out


def _vmf_cosines(kappa, m, n, rng):
    d = m - 1
    b = d / (2 * kappa + math.sqrt(4 * kappa * kappa + d * d))
    x0 = (1 - b) / (1 + b)
    c = kappa * x0 + d * math.log(1 - x0 * x0)
    out = np.empty(n)
    filled = 0
    while filled < n:
        k = n - filled
        z = rng.beta(d / 2, d / 2, size=k)
        w = (1 - (1 + b) * z) / (1 - (1 - b) * z)
        u = rng.random(k)
        ok = kappa * w + d * np.log(1 - x0 * w) - c >= np.log(u)
        acc = w[ok]
        out[filled:filled + acc.size] = acc
        filled += acc.size
    return out


def sample_loading(config: SimConfig, rng, sigma_v=None, size=None):
    """Loadings from the hyper-population around ``gamma_geo``."""
    gamma = config.gamma
    kappa = config.sigma_v if sigma_v is None else sigma_v
    n = 1 if size is None else int(size)
    a, b = config.beta_params
    R = rng.beta(a, b, size=n)
    norm = np.linalg.norm(gamma)
    v = sample_vmf(gamma / norm, kappa, rng, size=n)
    out = gamma + config.r * norm * R[:, None] * v
    return out[0] if size is None else out


def _covariates(rng, n, p):
    return np.hstack([rng.standard_normal((n, p - 1)), np.ones((n, 1))])


def generate_dataset(config: SimConfig, rng):
    """One synthetic randomized study with a binary GEO and binary items."""
    N, K, J = config.N, config.K, config.J
    X = _covariates(rng, N, config.p)
    A = (rng.random(N) < 0.5).astype(float)
    redraws = 0
    while A.min() == A.max():
        redraws += 1
        A = (rng.random(N) < 0.5).astype(float)
    Z0 = X @ config.lambda0.T + rng.standard_normal((N, K))
    Z1 = X @ config.lambda1.T + rng.standard_normal((N, K))
    Z = np.where(A[:, None] == 1, Z1, Z0)
    O = (rng.random(N) < expit(Z @ config.gamma)).astype(float)
    loadings = sample_loading(config, rng, size=J)
    intercepts = config.intercepts
    Y = (rng.random((N, J)) < expit(Z @ loadings.T - intercepts)).astype(float)
    schema = [ItemSchema(f"y{j + 1}", "binary") for j in range(J)]
    data = ResponseDataset(X=X, A=A, Y=Y, schema=schema, O=O, geo_kind="binary")
    truth = GroundTruth(Z0=Z0, Z1=Z1, Z=Z, loadings=loadings, intercepts=intercepts,
                        B_true=config.B_true, arm_redraws=redraws)
    return data, truth


def generate_external(config: SimConfig, rng) -> ExternalOutcomes:
    loadings = sample_loading(config, rng, sigma_v=config.sigma_v_external, size=config.T)
    return ExternalOutcomes(loadings=loadings, true_ite_coef=loadings @ (config.lambda1 - config.lambda0))


# ----------------------------------------------------------------------------
# evaluation

def _sign(v):
    return np.where(v >= 0, 1, -1)


def evaluate_methods(predictions: Dict[str, np.ndarray], external: ExternalOutcomes, X_eval) -> List[MethodResult]:
    """Worst-case sign accuracy and correlation over the external outcomes."""
    X_eval = np.atleast_2d(np.asarray(X_eval, dtype=float))
    truth = X_eval @ external.true_ite_coef.T  # N x T
    t_sign = _sign(truth)
    tc = truth - truth.mean(axis=0)
    t_norm = np.sqrt(np.sum(tc ** 2, axis=0))
    results = []
    for method, pred in predictions.items():
        pred = np.asarray(pred, dtype=float).ravel()
        if pred.shape[0] != X_eval.shape[0]:
            raise ValueError(f"{method}: prediction length does not match X_eval")
        acc = np.mean(_sign(pred)[:, None] == t_sign, axis=0)
        pc = pred - pred.mean()
        p_norm = math.sqrt(float(pc @ pc))
        with np.errstate(invalid="ignore", divide="ignore"):
            cor = (pc @ tc) / (p_norm * t_norm)
        flagged = ~((t_norm > 0) & (p_norm > 0))
        cor = np.where(flagged, np.nan, np.clip(cor, -1, 1))
        if flagged.all():
            raise ValueError(f"{method}: correlation undefined for every external outcome")
        results.append(MethodResult(method=method, acc=acc, cor=cor, acc_min=float(acc.min()),
                                    cor_min=float(np.nanmin(cor)), n_cor_flagged=int(flagged.sum())))
    return results


def baseline_original_geo(dataset: ResponseDataset, X_eval=None) -> np.ndarray:
    """Log-odds-scale GEO treatment effect from per-arm logistic fits,
    evaluated at ``X_eval`` (the training covariates by default)."""
    if dataset.O is None:
        raise ValueError("original-GEO baseline needs an observed GEO")
    coefs = []
    for arm in (0, 1):
        rows = dataset.A == arm
        o = dataset.O[rows]
        if o.min() == o.max():
            raise ValueError(f"GEO is constant in arm {arm}")
        coefs.append(fit_logistic(dataset.X[rows], o, ridge=1e-6))
    X_eval = dataset.X if X_eval is None else np.atleast_2d(X_eval)
    return X_eval @ (coefs[1] - coefs[0])


def method_predictions(dataset: ResponseDataset, K: int, X_eval, max_sweeps=500) -> Dict[str, np.ndarray]:
    """Fit all five methods on one dataset and predict at ``X_eval``."""
    X_eval = np.atleast_2d(X_eval)
    fit = fit_cjmle(dataset, FactorConfig(K=K, max_sweeps=max_sweeps))
    ite = factor_ite(fit_arm_regressions(fit.U, dataset.X, dataset.A))
    xi = empirical_xi(ite, dataset.X)
    items = item_representations(fit)
    tau_k = X_eval @ ite.B

    ev = observed_geo_evaluator(fit.U, dataset.O, dataset.geo_kind)
    gamma_drift = solve_maximin(xi, OnTargetSet(ev, default_radius(ev, items))).gamma_star
    ev_n = build_unobserved_geo_evaluator(fit, kind=dataset.geo_kind)
    gamma_n = solve_maximin(xi, OnTargetSet(ev_n, default_radius(ev_n, items))).gamma_star

    # observed-only maximin on promax-rotated coordinates
    W_rot, R = promax_rotate(fit.W)
    U_rot = fit.U @ np.linalg.inv(R).T
    ite_rot = factor_ite(fit_arm_regressions(U_rot, dataset.X, dataset.A))
    gamma_obs = obs_maximin(empirical_xi(ite_rot, dataset.X), list(W_rot))

    return {
        "original_geo": baseline_original_geo(dataset, X_eval),
        "factorized_geo": tau_k @ ev.anchor.gamma,
        "drift": tau_k @ gamma_drift,
        "drift_n": tau_k @ gamma_n,
        "obs_maximin": X_eval @ ite_rot.B @ gamma_obs,
    }


# ----------------------------------------------------------------------------
# studies

@dataclass
class StudyReport:
    sweep_param: str
    sweep_values: List[float]
    records: List[dict] = field(default_factory=list)
    failures: List[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    FIELDS = ("sweep_param", "sweep_value", "rep", "method", "metric", "value")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.FIELDS)
        for rec in self.records:
            writer.writerow([rec["sweep_param"], repr(float(rec["sweep_value"])), rec["rep"],
                             rec["method"], rec["metric"], repr(float(rec["value"]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def values(self, method, metric, sweep_value=None) -> np.ndarray:
        return np.array([r["value"] for r in self.records
                         if r["method"] == method and r["metric"] == metric
                         and (sweep_value is None or r["sweep_value"] == sweep_value)])

    def summary(self) -> List[dict]:
        """Mean, median and count per (sweep value, method, metric)."""
        keys = sorted({(r["sweep_value"], r["method"], r["metric"]) for r in self.records},
                      key=lambda k: (k[0], METHODS.index(k[1]) if k[1] in METHODS else 99, k[2]))
        rows = []
        for sv, method, metric in keys:
            v = self.values(method, metric, sv)
            rows.append({"sweep_value": sv, "method": method, "metric": metric,
                         "mean": float(v.mean()), "median": float(np.median(v)), "n": int(v.size)})
        return rows


class StudyError(RuntimeError):
    pass


def replication_rng(seed, rep):
    """Independent stream for replication ``rep``; the same stream is reused
    across sweep values (common random numbers)."""
    return np.random.default_rng([int(seed), int(rep)])


def run_replication(config: SimConfig, rep: int) -> List[dict]:
    rng = replication_rng(config.seed, rep)
    data, _ = generate_dataset(config, rng)
    external = generate_external(config, rng)
    X_eval = data.X if config.eval_mode == "in_sample" else _covariates(rng, config.N, config.p)
    preds = method_predictions(data, config.K, X_eval, max_sweeps=config.max_sweeps)
    out = []
    for res in evaluate_methods(preds, external, X_eval):
        out.append({"method": res.method, "metric": "acc_min", "value": res.acc_min})
        out.append({"method": res.method, "metric": "cor_min", "value": res.cor_min})
    return out


def _task(args):
    config, rep = args
    try:
        return rep, run_replication(config, rep), None
    except Exception as err:  # recorded, study continues
        return rep, None, f"{type(err).__name__}: {err}"


def worker_count(workers=None) -> int:
    if workers is None:
        workers = int(os.environ.get("DRIFT_THREADS", "0") or 0)
    if workers <= 0:
        workers = os.cpu_count() or 1
    return max(1, int(workers))


def run_study(config: SimConfig, sweep: Optional[dict] = None, workers=None, reps=None) -> StudyReport:
    """Run every method over a sweep of ``r`` or ``sigma_v``.

    ``sweep`` is ``{"param": "r" | "sigma_v", "values": [...]}``; without it
    the single configuration is run. Results depend only on
    ``(config, sweep)``, not on the worker count.
    """
    sweep = sweep or {"param": "r", "values": [config.r]}
    param = sweep["param"]
    if param not in ("r", "sigma_v"):
        raise ValueError("sweep param must be 'r' or 'sigma_v'")
    values = [float(v) for v in sweep["values"]]
    n_reps = config.reps if reps is None else int(reps)
    report = StudyReport(sweep_param=param, sweep_values=values, config=asdict(config))
    tasks = []
    for value in values:
        cfg = SimConfig(**{**asdict(config), param: value})
        tasks.extend((cfg, rep) for rep in range(n_reps))
    n_workers = min(worker_count(workers), len(tasks))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_task, tasks, chunksize=1))
    else:
        results = [_task(t) for t in tasks]
    for (cfg, _), (rep, recs, err) in zip(tasks, results):
        value = getattr(cfg, param)
        if err is not None:
            log.warning("replication %s at %s=%s failed: %s", rep, param, value, err)
            report.failures.append({"sweep_value": value, "rep": rep, "error": err})
            continue
        for rec in recs:
            report.records.append({"sweep_param": param, "sweep_value": value, "rep": rep, **rec})
    if len(report.failures) > 0.1 * len(tasks):
        raise StudyError(f"{len(report.failures)} of {len(tasks)} replications failed")
    return report


def oracle_geo_acc_min(Lambda0, Lambda1, gamma=(1.0, 1.0, 1.0), reps=5, N=300, T=1000,
                       r=1.0, sigma_v=1.0):
    """Mean worst-case sign accuracy of the true GEO effect against external
    outcomes, using true effect coefficients (no estimation)."""
    cfg = SimConfig(Lambda0=Lambda0, Lambda1=Lambda1, gamma_geo=gamma, r=r,
                    sigma_v=sigma_v, sigma_v_external=sigma_v, N=N, T=T, K=len(gamma),
                    p=len(Lambda0[0]))
    out = []
    for rep in range(reps):
        rng = np.random.default_rng([1, rep])
        X = _covariates(rng, N, cfg.p)
        external = generate_external(cfg, rng)
        pred = X @ cfg.B_true @ cfg.gamma
        out.append(evaluate_methods({"geo": pred}, external, X)[0].acc_min)
    return float(np.mean(out))


def calibrate_lambda_seed(target=CALIBRATION_TARGET, width=0.05, K=3, p=5, scale=0.5,
                          max_seed=200):
    """First seed of scaled normal Lambda pairs whose GEO-oracle worst-case
    accuracy is within ``width`` of ``target``; returns ``(seed, L0, L1)``.

    Only the GEO baseline enters the screen, so the choice does not look at
    how any robust method performs.
    """
    for seed in range(max_seed):
        rng = np.random.default_rng(seed)
        L0 = scale * rng.standard_normal((K, p))
        L1 = scale * rng.standard_normal((K, p))
        try:
            value = oracle_geo_acc_min(L0, L1, gamma=(1.0,) * K)
        except ValueError:  # rank or sign screen failed
            continue
        if abs(value - target) <= width:
            return seed, L0, L1
    raise ValueError("no seed matched the calibration target")


def loading_recovery_error(config: SimConfig, reps=20, max_sweeps=None) -> np.ndarray:
    """``min_Q ||W_hat Q - W*||_F^2 / J`` over invertible ``Q`` for each replication."""
    errors = []
    for rep in range(reps):
        rng = replication_rng(config.seed, rep)
        data, truth = generate_dataset(config, rng)
        fit = fit_cjmle(data, FactorConfig(K=config.K, max_sweeps=max_sweeps or config.max_sweeps))
        Q = np.linalg.lstsq(fit.W, truth.loadings, rcond=None)[0]
        errors.append(float(np.sum((fit.W @ Q - truth.loadings) ** 2) / config.J))
    return np.array(errors)
