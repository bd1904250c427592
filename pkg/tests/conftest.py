import numpy as np
import pytest

from drift.factor_model import ItemSchema, ResponseDataset
from drift.on_target import observed_geo_evaluator

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1][2:])):
            terminalreporter.write_line(line)


def continuous_instance(rng, N=200, K=2, noise=0.5):
    """Correlated factors, a squared-error GEO and a random PSD Xi."""
    mix = rng.standard_normal((K, K)) + 2 * np.eye(K)
    U = rng.standard_normal((N, K)) @ mix
    a = rng.standard_normal(K) + np.sign(rng.standard_normal(K))
    o = U @ a + 0.3 * rng.standard_normal() + noise * rng.standard_normal(N)
    ev = observed_geo_evaluator(U, o, "continuous")
    B = rng.standard_normal((K + 2, K))
    X = np.hstack([rng.standard_normal((300, K + 1)), np.ones((300, 1))])
    T = X @ B
    Xi = T.T @ T / 300
    return U, ev, Xi


def make_dataset(rng, N=120, J=12, K=2, kinds=None, geo=True):
    """Small synthetic study from a generalized factor model."""
    kinds = kinds or ["binary"] * J
    X = np.hstack([rng.standard_normal((N, 2)), np.ones((N, 1))])
    A = np.tile([0.0, 1.0], N // 2 + 1)[:N]
    rng.shuffle(A)
    L0 = rng.standard_normal((K, 3))
    L1 = rng.standard_normal((K, 3))
    Z = np.where(A[:, None] == 1, X @ L1.T, X @ L0.T) + rng.standard_normal((N, K))
    W = rng.standard_normal((J, K))
    M = Z @ W.T
    Y = np.empty((N, J))
    for j, kind in enumerate(kinds):
        if kind == "binary":
            Y[:, j] = rng.random(N) < 1 / (1 + np.exp(-M[:, j]))
        else:
            Y[:, j] = M[:, j] + 0.5 * rng.standard_normal(N)
    O = (rng.random(N) < 1 / (1 + np.exp(-Z.sum(axis=1)))).astype(float) if geo else None
    schema = [ItemSchema(f"y{j + 1}", k) for j, k in enumerate(kinds)]
    return ResponseDataset(X=X, A=A, Y=Y, schema=schema, O=O)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
