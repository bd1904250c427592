import math

import numpy as np
import pytest

from drift._numerics import simplex_qp
from drift.factor_model import FactorConfig, Reparam, ResponseDataset, apply_reparam, fit_cjmle, promax_rotate
from drift.latent_effects import factor_ite, fit_arm_regressions
from drift.maximin import (
    DriftStepError,
    XiMatrix,
    centered_second_moment,
    drift_from_factors,
    drift_predict,
    empirical_xi,
    factorized_geo_predict,
    itr_assign,
    obs_maximin,
    run_drift,
    solve_maximin,
    solve_maximin_ellipsoid,
)
from drift.on_target import OnTargetSet, Representation, observed_geo_evaluator, profiled_excess

from conftest import continuous_instance, make_dataset


def _identity_cov_factors(rng, N, K):
    """Factors whose centred covariance is exactly the identity."""
    raw = rng.standard_normal((N, K))
    raw -= raw.mean(axis=0)
    q, _ = np.linalg.qr(raw)
    return q * math.sqrt(N)


def test_analytic_anchor_ray_case(rng):
    U = _identity_cov_factors(rng, 120, 3)
    anchor = np.ones(3)
    ev = observed_geo_evaluator(U, U @ anchor, "continuous")
    sol = solve_maximin(np.eye(3), OnTargetSet(ev, 1.0))
    c = 1 - 1 / math.sqrt(3)
    np.testing.assert_allclose(sol.gamma_star, np.full(3, c), atol=1e-7)
    assert sol.objective == pytest.approx(4 - 2 * math.sqrt(3), abs=1e-8)
    # stationarity: 2 g + lam * 2 (g - a) = 0
    assert sol.lambda_star == pytest.approx(c / (1 - c), rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_kkt_conditions_hold(seed):
    rng = np.random.default_rng(seed)
    _, ev, Xi = continuous_instance(rng, K=3)
    delta = 0.4 * profiled_excess(ev, np.zeros(3))[0]
    sol = solve_maximin(Xi, OnTargetSet(ev, delta))
    _, _, grad, _ = ev.profile(sol.gamma_star)
    stationarity = 2 * Xi @ sol.gamma_star + sol.lambda_star * grad
    assert np.linalg.norm(stationarity) <= 1e-6 * max(1.0, np.linalg.norm(2 * Xi @ sol.gamma_star))
    assert abs(sol.constraint_residual) <= 1e-9
    assert sol.lambda_star > 0


def test_binary_solution_beats_feasible_samples(rng):
    U = rng.standard_normal((300, 2))
    o = (rng.random(300) < 1 / (1 + np.exp(-(U @ np.array([1.5, 0.5]))))).astype(float)
    ev = observed_geo_evaluator(U, o, "binary")
    Xi = np.array([[1.0, 0.3], [0.3, 0.5]])
    delta = 0.5 * profiled_excess(ev, np.zeros(2))[0]
    sol = solve_maximin(Xi, OnTargetSet(ev, delta))
    samples = ev.anchor.gamma + rng.uniform(-3, 3, size=(4000, 2))
    feasible = [g for g in samples if profiled_excess(ev, g)[0] <= delta]
    assert len(feasible) > 50
    assert sol.objective <= min(g @ Xi @ g for g in feasible) + 1e-9


def test_zero_radius_returns_anchor(rng):
    _, ev, Xi = continuous_instance(rng)
    sol = solve_maximin(Xi, OnTargetSet(ev, 0.0))
    np.testing.assert_array_equal(sol.gamma_star, ev.anchor.gamma)
    assert sol.lambda_star == math.inf


def test_large_radius_gives_null_solution(rng):
    _, ev, Xi = continuous_instance(rng)
    big = 2 * profiled_excess(ev, np.zeros(2))[0]
    sol = solve_maximin(Xi, OnTargetSet(ev, big))
    assert sol.interior
    np.testing.assert_array_equal(sol.gamma_star, 0.0)


@pytest.mark.parametrize("seed", range(8))
def test_dual_search_matches_ellipsoid_solver(seed):
    rng = np.random.default_rng(100 + seed)
    K = 2 + seed % 3
    U, ev, Xi = continuous_instance(rng, K=K)
    delta = rng.uniform(0.05, 0.9) * profiled_excess(ev, np.zeros(K))[0]
    a = solve_maximin(Xi, OnTargetSet(ev, delta))
    b = solve_maximin_ellipsoid(Xi, ev.anchor.gamma, centered_second_moment(U), delta)
    assert a.objective == pytest.approx(b.objective, abs=1e-8, rel=1e-7)
    np.testing.assert_allclose(a.gamma_star, b.gamma_star, atol=1e-5)


def test_ellipsoid_solver_handles_singular_xi(rng):
    Xi = np.diag([1.0, 0.0])
    sol = solve_maximin_ellipsoid(Xi, np.array([1.0, 1.0]), np.eye(2), 0.5)
    # the free direction costs nothing, so only the first coordinate shrinks
    assert sol.objective == pytest.approx((1 - math.sqrt(0.5)) ** 2, abs=1e-10)


def test_xi_repair_clamps_negative_eigenvalues():
    xi = XiMatrix(np.array([[1.0, 0.0], [0.0, -1e-9]]))
    assert xi.min_eigenvalue < 0
    assert np.linalg.eigvalsh(xi.repaired()).min() >= 0


def test_obs_maximin_matches_weight_grid(rng):
    items = [Representation(rng.standard_normal(2) + 1, 0.0) for _ in range(3)]
    Xi = np.array([[2.0, 0.5], [0.5, 1.0]])
    g, info = obs_maximin(Xi, items, return_info=True)
    w = np.linspace(0, 1, 801)
    a, b = np.meshgrid(w, w, indexing="ij")
    mask = a + b <= 1
    lam = np.stack([a[mask], b[mask], 1 - a[mask] - b[mask]], axis=1)
    A = np.array([it.gamma for it in items])
    pts = lam @ A
    best = np.min(np.einsum("ij,jk,ik->i", pts, Xi, pts))
    assert info["objective"] <= best + 1e-10
    assert info["objective"] >= best - 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_simplex_qp_ill_conditioned_hull(seed):
    # badly scaled points; away-step Frank-Wolfe alone stalls on several of these
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((30, 3)) * [0.2, 1.0, 5.0] + [0.3, 0.5, 0.2]
    M = P @ P.T
    lam, gap, _ = simplex_qp(M, np.zeros(30))
    assert gap <= 1e-8
    assert lam.min() >= 0 and lam.sum() == pytest.approx(1.0)
    grad = 2 * M @ lam
    support = lam > 0
    np.testing.assert_allclose(grad[support], grad.min(), atol=1e-7)


def test_obs_maximin_predictions_invariant_to_promax(rng):
    data = make_dataset(rng, N=160, J=12, K=2)
    fit = fit_cjmle(data, FactorConfig(K=2, max_sweeps=80))
    ite = factor_ite(fit_arm_regressions(fit.U, data.X, data.A))
    plain = data.X @ ite.B @ obs_maximin(empirical_xi(ite, data.X), list(fit.W))
    W_rot, R = promax_rotate(fit.W)
    U_rot = fit.U @ np.linalg.inv(R).T
    ite_rot = factor_ite(fit_arm_regressions(U_rot, data.X, data.A))
    rotated = data.X @ ite_rot.B @ obs_maximin(empirical_xi(ite_rot, data.X), list(W_rot))
    np.testing.assert_allclose(rotated, plain, atol=1e-6)


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(11)
    data = make_dataset(rng, N=200, J=12, K=2)
    fit = fit_cjmle(data, FactorConfig(K=2, max_sweeps=100))
    return data, fit


def test_pipeline_outputs(fitted):
    data, fit = fitted
    model = drift_from_factors(data, fit)
    assert model.delta > 0
    assert model.provenance["geo_source"] == "observed"
    tau = drift_predict(model, data.X)
    assert tau.shape == (data.N,)
    np.testing.assert_array_equal(itr_assign(model, data.X), (tau > 0).astype(int))
    assert itr_assign(model, data.X[0]) in (0, 1)
    assert np.isscalar(drift_predict(model, data.X[0]))


def test_pipeline_collapses_at_zero_radius(fitted):
    data, fit = fitted
    model = drift_from_factors(data, fit, delta=0.0)
    np.testing.assert_allclose(drift_predict(model, data.X), factorized_geo_predict(model, data.X), atol=1e-12)


def test_pipeline_unobserved_geo_and_dr(fitted):
    data, fit = fitted
    model = drift_from_factors(data, fit, geo="unobserved", method="dr", split_seed=1)
    assert model.provenance == {"geo_source": "minimax_center", "method": "dr"}
    assert model.ite.method == "dr_learner"


def test_pipeline_reparam_invariance(fitted):
    data, fit = fitted
    rng = np.random.default_rng(4)
    rep = Reparam(rng.standard_normal((2, 2)) + 2 * np.eye(2), rng.standard_normal(2))
    base = drift_from_factors(data, fit)
    moved = drift_from_factors(data, apply_reparam(fit, rep))
    np.testing.assert_allclose(drift_predict(moved, data.X), drift_predict(base, data.X), atol=1e-6)


def test_missing_geo_reported_as_step_two(fitted):
    data, fit = fitted
    no_geo = ResponseDataset(X=data.X, A=data.A, Y=data.Y, schema=data.schema)
    with pytest.raises(DriftStepError) as err:
        drift_from_factors(no_geo, fit, geo="observed")
    assert err.value.step == 2


def test_single_arm_reported_as_step_one(fitted):
    data, fit = fitted
    one_arm = ResponseDataset(X=data.X, A=np.ones(data.N), Y=data.Y, schema=data.schema, O=data.O)
    with pytest.raises(DriftStepError) as err:
        run_drift(one_arm, FactorConfig(K=2, max_sweeps=5))
    assert err.value.step == 1
