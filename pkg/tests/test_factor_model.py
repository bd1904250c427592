import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drift.factor_model import (
    FactorConfig,
    FactorFit,
    ItemSchema,
    Reparam,
    ResponseDataset,
    apply_reparam,
    cjmle_objective,
    fit_cjmle,
    init_factors,
    item_loss,
    item_loss_grad,
    natural_params,
    project_item,
    project_subject,
    promax_rotate,
    varimax_rotate,
)

from conftest import make_dataset

finite = st.floats(-30, 30, allow_nan=False)


# -- schema and dataset validation ---------------------------------------------

def test_ordinal_items_rejected_with_hint():
    with pytest.raises(ValueError, match="ordinal"):
        ItemSchema("q1", "ordinal")


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown kind"):
        ItemSchema("q1", "count")


def test_dataset_rejects_out_of_range_binary_item():
    Y = np.array([[0.0], [2.0], [1.0]])
    with pytest.raises(ValueError, match="y1"):
        ResponseDataset(X=np.ones((3, 1)), A=[0, 1, 0], Y=Y, schema=[ItemSchema("y1", "binary")])


def test_dataset_rejects_missing_values():
    Y = np.array([[0.0], [np.nan], [1.0]])
    with pytest.raises(ValueError, match="non-finite"):
        ResponseDataset(X=np.ones((3, 1)), A=[0, 1, 0], Y=Y, schema=[ItemSchema("y1", "continuous")])


def test_dataset_row_mismatch():
    with pytest.raises(ValueError, match="same number of rows"):
        ResponseDataset(X=np.ones((4, 1)), A=[0, 1, 0], Y=np.zeros((3, 1)),
                        schema=[ItemSchema("y1", "binary")])


def test_single_arm_flagged():
    d = ResponseDataset(X=np.ones((3, 1)), A=[1, 1, 1], Y=np.zeros((3, 1)),
                        schema=[ItemSchema("y1", "binary")])
    with pytest.raises(ValueError, match="both treatment arms"):
        d.require_both_arms()


# -- losses --------------------------------------------------------------------

@pytest.mark.parametrize("y,u", [(1.0, 0.0), (0.0, 2.0), (1.0, -3.5), (0.3, 1.2)])
def test_binary_loss_matches_direct_formula(y, u):
    expected = -(y * math.log(1 / (1 + math.exp(-u))) + (1 - y) * math.log(1 - 1 / (1 + math.exp(-u))))
    assert item_loss("binary", y, u) == pytest.approx(expected, rel=1e-12)


def test_binary_loss_tails_are_finite_and_linear():
    assert item_loss("binary", 1.0, -800.0) == pytest.approx(800.0)
    assert item_loss("binary", 0.0, 800.0) == pytest.approx(800.0)
    assert item_loss("binary", 1.0, 800.0) == pytest.approx(0.0, abs=1e-300)


def test_continuous_loss_is_squared_error():
    assert item_loss("continuous", 1.5, -0.5) == pytest.approx(4.0)
    assert item_loss_grad("continuous", 1.5, -0.5) == pytest.approx(-4.0)


def test_loss_rejects_bad_inputs():
    with pytest.raises(ValueError):
        item_loss("binary", 1.2, 0.0)
    with pytest.raises(ValueError):
        item_loss("continuous", np.inf, 0.0)
    with pytest.raises(ValueError):
        item_loss_grad("poisson", 1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(y=st.sampled_from([0.0, 1.0]) | st.floats(0, 1), u=finite, kind=st.sampled_from(["binary", "continuous"]))
def test_loss_gradient_matches_central_difference(y, u, kind):
    h = 1e-5 * max(1.0, abs(u))
    fd = (item_loss(kind, y, u + h) - item_loss(kind, y, u - h)) / (2 * h)
    g = item_loss_grad(kind, y, u)
    assert abs(fd - g) <= 1e-6 * max(abs(g), abs(fd), 1e-3)


@settings(max_examples=40, deadline=None)
@given(y=st.floats(0, 1), u=finite)
def test_binary_loss_nonnegative_and_convex(y, u):
    h = 1e-3
    f = item_loss("binary", y, u)
    assert f >= -1e-15
    assert item_loss("binary", y, u + h) + item_loss("binary", y, u - h) - 2 * f >= -1e-12


# -- projections ---------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(z=st.lists(st.floats(-100, 100), min_size=3, max_size=3), C=st.floats(1.1, 20))
def test_subject_projection_feasible_and_idempotent(z, C):
    p = project_subject(np.array(z), C)
    assert 1 + p @ p <= C * C * (1 + 1e-12)
    np.testing.assert_allclose(project_subject(p, C), p)


def test_subject_projection_keeps_interior_points():
    z = np.array([0.3, -0.2])
    np.testing.assert_array_equal(project_subject(z, 5.0), z)


def test_item_projection_radial():
    zeta, alpha = project_item(np.array([6.0]), np.array([[8.0, 0.0]]), 5.0)
    np.testing.assert_allclose(zeta, [3.0])
    np.testing.assert_allclose(alpha, [[4.0, 0.0]])


# -- CJMLE ---------------------------------------------------------------------

def test_default_radius_constant():
    assert FactorConfig(K=4).C == pytest.approx(10.0)


@pytest.mark.parametrize("kinds", ["binary", "continuous", "mixed"])
def test_cjmle_objective_monotone_and_feasible(rng, kinds):
    J = 10
    kind_list = {"binary": ["binary"] * J, "continuous": ["continuous"] * J,
                 "mixed": ["binary", "continuous"] * (J // 2)}[kinds]
    data = make_dataset(rng, N=100, J=J, kinds=kind_list)
    cfg = FactorConfig(K=2, max_sweeps=80)
    fit = fit_cjmle(data, cfg)
    trace = np.array(fit.objective_trace)
    assert np.all(np.diff(trace) <= 0)
    assert cjmle_objective(data, fit) == pytest.approx(trace[-1], rel=1e-12)
    assert np.all(1 + np.sum(fit.U ** 2, axis=1) <= cfg.C ** 2 * (1 + 1e-12))
    assert np.all(fit.zeta ** 2 + np.sum(fit.W ** 2, axis=1) <= cfg.C ** 2 * (1 + 1e-12))


def test_cjmle_recovers_continuous_low_rank_signal(rng):
    N, J, K = 200, 20, 2
    U = rng.standard_normal((N, K))
    W = rng.standard_normal((J, K))
    zeta = 0.5 * rng.standard_normal(J)
    Y = U @ W.T - zeta + 0.1 * rng.standard_normal((N, J))
    data = ResponseDataset(X=np.ones((N, 1)), A=np.arange(N) % 2, Y=Y,
                           schema=[ItemSchema(f"y{j}", "continuous") for j in range(J)])
    fit = fit_cjmle(data, FactorConfig(K=K, max_sweeps=2000, tol=1e-10))
    err = np.linalg.norm(natural_params(fit) - (U @ W.T - zeta)) / np.linalg.norm(U @ W.T)
    assert err < 0.05


def test_random_init_also_descends(rng):
    data = make_dataset(rng, N=80, J=8)
    fit = fit_cjmle(data, FactorConfig(K=2, init="random", seed=3, max_sweeps=50))
    assert np.all(np.diff(fit.objective_trace) <= 0)
    assert fit.objective_trace[-1] < fit.objective_trace[0]


def test_rank_deficient_start_falls_back_with_warning():
    N = 20
    col = (np.arange(N) % 2).astype(float)
    Y = np.column_stack([col, col, col])
    data = ResponseDataset(X=np.ones((N, 1)), A=col, Y=Y,
                           schema=[ItemSchema(f"y{j}", "binary") for j in range(3)])
    with pytest.warns(UserWarning, match="rank"):
        fit = init_factors(data, FactorConfig(K=2))
    assert fit.init_fallback


def test_too_few_items_for_k(rng):
    data = make_dataset(rng, N=40, J=2)
    with pytest.raises(ValueError):
        fit_cjmle(data, FactorConfig(K=3))


# -- reparameterisation and rotation -----------------------------------------

def _random_fit(rng, N=30, J=6, K=3):
    return FactorFit(U=rng.standard_normal((N, K)), W=rng.standard_normal((J, K)), zeta=rng.standard_normal(J))


def test_reparam_preserves_natural_parameters(rng):
    fit = _random_fit(rng)
    rep = Reparam(rng.standard_normal((3, 3)) + 3 * np.eye(3), rng.standard_normal(3))
    np.testing.assert_allclose(natural_params(apply_reparam(fit, rep)), natural_params(fit), atol=1e-10)


def test_reparam_composition(rng):
    fit = _random_fit(rng)
    r1 = Reparam(rng.standard_normal((3, 3)) + 3 * np.eye(3), rng.standard_normal(3))
    r2 = Reparam(rng.standard_normal((3, 3)) + 3 * np.eye(3), rng.standard_normal(3))
    two_step = apply_reparam(apply_reparam(fit, r1), r2)
    one_step = apply_reparam(fit, r1.then(r2))
    np.testing.assert_allclose(two_step.U, one_step.U, atol=1e-10)
    np.testing.assert_allclose(two_step.W, one_step.W, atol=1e-10)
    np.testing.assert_allclose(two_step.zeta, one_step.zeta, atol=1e-10)


def test_singular_reparam_rejected():
    with pytest.raises(ValueError):
        Reparam(np.array([[1.0, 2.0], [2.0, 4.0]]), np.zeros(2))


def _varimax_value(L):
    sq = L ** 2
    return np.sum(np.var(sq, axis=0))


def test_varimax_two_factor_matches_angle_search(rng):
    W = rng.standard_normal((12, 2))
    W_rot, R = varimax_rotate(W)
    np.testing.assert_allclose(R.T @ R, np.eye(2), atol=1e-12)
    angles = np.linspace(0, np.pi / 2, 20001)
    best = max(_varimax_value(W @ np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])) for t in angles)
    assert _varimax_value(W_rot) == pytest.approx(best, rel=1e-6)


def test_varimax_single_factor_is_identity(rng):
    W = rng.standard_normal((5, 1))
    W_rot, R = varimax_rotate(W)
    np.testing.assert_array_equal(R, np.eye(1))
    np.testing.assert_array_equal(W_rot, W)


def _promax_reference(W, m=4):
    # normalised varimax followed by the least-squares target fit, step by step
    h = np.sqrt((W ** 2).sum(axis=1))
    _, T = varimax_rotate(W / h[:, None])
    x = W @ T
    Q = x * np.abs(x) ** (m - 1)
    U, *_ = np.linalg.lstsq(x, Q, rcond=None)
    d = np.diag(np.linalg.inv(U.T @ U))
    U = U @ np.diag(np.sqrt(d))
    return x @ U, T @ U


def test_promax_matches_reference_recipe(rng):
    W = rng.standard_normal((15, 3))
    W_rot, R = promax_rotate(W)
    ref_W, ref_R = _promax_reference(W)
    np.testing.assert_allclose(W_rot, ref_W, atol=1e-10)
    np.testing.assert_allclose(R, ref_R, atol=1e-10)


def test_promax_factor_correlation_has_unit_diagonal(rng):
    W = rng.standard_normal((15, 3))
    _, R = promax_rotate(W)
    phi = np.linalg.inv(R.T @ R)
    np.testing.assert_allclose(np.diag(phi), 1.0, atol=1e-10)


def test_promax_simple_structure_recovered():
    # a clean oblique pattern should come back (up to column order and sign)
    pattern = np.zeros((12, 2))
    pattern[:6, 0] = 0.8
    pattern[6:, 1] = 0.7
    mix = np.array([[1.0, 0.4], [0.3, 1.0]])
    W = pattern @ mix
    W_rot, _ = promax_rotate(W)
    small = np.sort(np.abs(W_rot), axis=1)[:, 0]
    assert small.max() < 0.05
