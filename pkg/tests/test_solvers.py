import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import lsq_linear

from deqmpi.errors import ConfigError, ShapeError
from deqmpi.solvers import (
    AdmmConfig, admm_preset, admm_reconstruct, art_lambda, art_reconstruct, hybrid_alpha1,
    proj_l2_ball, prox_hybrid, prox_l1, prox_tv, tv_value,
)

from conftest import toy_sm

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def tv1d_oracle(v, tau):
    """Exact 1-D TV prox through its dual, a box-constrained least squares.

    min_u ||v - D^T u||^2 with |u| <= tau, then x = v - D^T u.
    """
    n = v.size
    D = np.diff(np.eye(n), axis=0)
    u = lsq_linear(D.T, v, bounds=(-tau, tau), method="bvls", tol=1e-14).x
    return v - D.T @ u


# ---------------------------------------------------------------- projections and proxes

def test_proj_trivial():
    y = np.array([1.0, -2.0])
    np.testing.assert_array_equal(proj_l2_ball(y, y, 0.5), y)
    np.testing.assert_allclose(proj_l2_ball([3.0, 4.0], [0.0, 0.0], 1.0), [0.6, 0.8])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite),
       st.floats(0, 20))
def test_proj_ball_membership_and_idempotence(v, y, eps):
    p = proj_l2_ball(v, y, eps)
    assert np.linalg.norm(p - y) <= eps + 1e-12
    np.testing.assert_allclose(proj_l2_ball(p, y, eps), p, rtol=0, atol=1e-12)


def test_proj_batched_eps():
    v = np.array([[3.0, 4.0], [0.3, 0.4]])
    out = proj_l2_ball(v, np.zeros_like(v), np.array([1.0, 1.0]))
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.3, 0.4]])
    with pytest.raises(ShapeError):
        proj_l2_ball(np.ones(2), np.ones(3), 1.0)


def test_prox_l1_hand_values():
    np.testing.assert_allclose(prox_l1([2.0, -1.0, 0.3], 0.5, nonneg=True), [1.5, 0, 0])
    np.testing.assert_allclose(prox_l1([2.0, -1.0], 0.0, nonneg=True), [2.0, 0.0])
    np.testing.assert_allclose(prox_l1([2.0, -1.0], 0.0), [2.0, -1.0])


@pytest.mark.parametrize("nonneg", [False, True])
def test_prox_l1_vs_grid_search(nonneg):
    rng = np.random.default_rng(0)
    v = rng.uniform(-3, 3, 25)
    tau = 0.7
    out = prox_l1(v, tau, nonneg)
    lo = 0.0 if nonneg else -4.0
    grid = np.linspace(lo, 4.0, 2_000_001 if not nonneg else 1_000_001)
    for vi, oi in zip(v, out):
        obj = tau * np.abs(grid) + 0.5 * (grid - vi) ** 2
        best = obj.min()
        got = tau * abs(oi) + 0.5 * (oi - vi) ** 2
        assert got - best < 1e-6
        assert got <= best + 1e-12 or abs(grid[obj.argmin()] - oi) < 1e-5


def test_prox_tv_trivial():
    rng = np.random.default_rng(1)
    v = rng.random((5, 6))
    np.testing.assert_array_equal(prox_tv(v, 0.0), v)
    c = np.full((5, 6), 0.4)
    np.testing.assert_allclose(prox_tv(c, 1.0), c, atol=1e-15)


def test_prox_tv_step_edge_vs_oracle():
    v = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0])
    for tau in (0.1, 0.3, 1.0):
        got = prox_tv(v[:, None], tau, inner_iters=100)[:, 0]
        np.testing.assert_allclose(got, tv1d_oracle(v, tau), atol=1e-3)
        # the solver default of 20 sweeps is already close for small tau
    got = prox_tv(v[:, None], 0.1)[:, 0]
    np.testing.assert_allclose(got, tv1d_oracle(v, 0.1), atol=5e-3)


def test_prox_tv_noisy_column_vs_oracle():
    rng = np.random.default_rng(2)
    v = np.repeat([0.2, 1.0, 0.5], 4) + 0.05 * rng.standard_normal(12)
    got = prox_tv(v[:, None], 0.05, inner_iters=200)[:, 0]
    np.testing.assert_allclose(got, tv1d_oracle(v, 0.05), atol=1e-3)


def test_prox_tv_objective_non_increasing():
    rng = np.random.default_rng(3)
    v = rng.random((6, 7))
    hist = []
    out = prox_tv(v, 0.2, inner_iters=20, objective=hist)
    assert len(hist) == 20
    assert all(b <= a + 1e-15 for a, b in zip(hist, hist[1:]))
    assert 0.2 * tv_value(out) + 0.5 * np.sum((out - v) ** 2) <= hist[0] + 1e-12


def test_hybrid_extremes():
    rng = np.random.default_rng(4)
    v = rng.standard_normal((4, 5))
    np.testing.assert_array_equal(prox_hybrid(v, 0.3, 1.0), prox_l1(v, 0.3, nonneg=True))
    tv = np.maximum(prox_tv(v, 0.3), 0.0)
    np.testing.assert_array_equal(prox_hybrid(v, 0.3, 0.0), tv)


# ---------------------------------------------------------------- ADMM

def test_admm_config_validation():
    with pytest.raises(ConfigError):
        AdmmConfig(mu=-1.0).validate()
    with pytest.raises(ConfigError):
        AdmmConfig(alpha1=1.5).validate()
    with pytest.raises(ConfigError):
        AdmmConfig(epsilon=-0.1).validate()
    with pytest.raises(ConfigError):
        AdmmConfig(regularizer="tikhonov").validate()


def test_presets():
    assert admm_preset("paper-l1").mu == 250
    assert admm_preset("paper-tv").mu == 50
    assert admm_preset("paper-hyb").mu == 10
    assert [hybrid_alpha1(s) for s in (15, 25, 35)] == [0.1, 0.8, 0.9]
    assert [art_lambda(s) for s in (10, 25, 35)] == [10.0, 1.0, 0.1]
    with pytest.raises(ConfigError):
        admm_preset("paper-dip")


def test_admm_identity_system_recovers_image():
    rng = np.random.default_rng(5)
    x = rng.uniform(0.2, 1.0, 16)
    sm = toy_sm(np.vstack([np.eye(16), np.zeros((16, 16))]), (4, 4))
    y = sm.stacked @ x
    out = admm_reconstruct(sm, y, AdmmConfig("l1", mu=1e6, epsilon=0.0, n_iters=200))
    np.testing.assert_allclose(out.ravel(), x, atol=1e-3)


def test_admm_zero_data():
    sm = toy_sm(np.random.default_rng(6).standard_normal((10, 9)), (3, 3))
    out = admm_reconstruct(sm, np.zeros(10), AdmmConfig("l1", epsilon=0.0, n_iters=50))
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_admm_exact_on_invertible_system():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((6, 6)) + 3 * np.eye(6)
    x = rng.uniform(0.1, 1.0, 6)
    sm = toy_sm(A, (2, 3))
    out = admm_reconstruct(sm, A @ x, AdmmConfig("none", epsilon=0.0, n_iters=200))
    np.testing.assert_allclose(out.ravel(), x, atol=1e-4)


def test_admm_meets_constraint(small_sm):
    rng = np.random.default_rng(8)
    A = small_sm.stacked[:40] / np.abs(small_sm.stacked[:40]).max()
    sm = toy_sm(A, small_sm.grid)
    x = rng.uniform(0, 1, A.shape[1])
    y = A @ x + 0.05 * rng.standard_normal(40)
    eps = 0.05 * np.sqrt(40)
    out = admm_reconstruct(sm, y, AdmmConfig("l1", mu=5.0, epsilon=eps, n_iters=2000))
    assert np.linalg.norm(A @ out.ravel() - y) <= eps * 1.01


def test_admm_residuals_shrink(sm):
    from deqmpi.forward import emulate_measurement
    from deqmpi.phantoms import vessel_dataset

    x = vessel_dataset("test", 1)[0]
    y = emulate_measurement(sm, x, 25.0, seed=0)
    for name in ("paper-l1", "paper-tv", "paper-hyb"):
        _, st_ = admm_reconstruct(sm, y.data, admm_preset(name, 25.0), noise_std=y.noise_std,
                                  return_state=True)
        h = st_.history
        assert h[-1]["r0"] * 10 <= h[0]["r0"]
        assert h[-1]["r1"] * 10 <= h[0]["r1"]


def test_admm_batch_matches_single(sm):
    from deqmpi.forward import emulate_batch
    from deqmpi.phantoms import vessel_dataset

    X = vessel_dataset("val", 3).reshape(3, -1)
    Y, std = emulate_batch(sm.stacked, X, 30.0, np.random.default_rng(0))
    cfg = AdmmConfig("tv", mu=50.0, n_iters=20)
    batch = admm_reconstruct(sm, Y, cfg, noise_std=std)
    for i in range(3):
        one = admm_reconstruct(sm, Y[i], cfg, noise_std=std[i])
        np.testing.assert_allclose(batch[i], one, atol=1e-9)


def test_hybrid_admm_reduces_to_pure(sm):
    from deqmpi.forward import emulate_measurement
    from deqmpi.phantoms import vessel_dataset

    x = vessel_dataset("test", 1)[0]
    y = emulate_measurement(sm, x, 25.0, seed=0)
    kw = dict(mu=20.0, n_iters=15)
    l1 = admm_reconstruct(sm, y.data, AdmmConfig("l1", **kw), noise_std=y.noise_std)
    h1 = admm_reconstruct(sm, y.data, AdmmConfig("hybrid", alpha1=1.0, **kw), noise_std=y.noise_std)
    np.testing.assert_array_equal(l1, h1)
    tv = admm_reconstruct(sm, y.data, AdmmConfig("tv", **kw), noise_std=y.noise_std)
    h0 = admm_reconstruct(sm, y.data, AdmmConfig("hybrid", alpha1=0.0, **kw), noise_std=y.noise_std)
    np.testing.assert_array_equal(tv, h0)


def test_admm_output_nonnegative_and_shaped(sm):
    y = np.random.default_rng(9).standard_normal(sm.stacked.shape[0])
    out = admm_reconstruct(sm, y, AdmmConfig("l1", n_iters=5))
    assert out.shape == sm.grid
    assert out.min() >= 0


# ---------------------------------------------------------------- ART

def test_art_exact_solution():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    x = np.array([0.4, 0.7])
    out = art_reconstruct(A, A @ x, lam=0.0, n_iters=50)
    np.testing.assert_allclose(out, np.linalg.solve(A, A @ x), atol=1e-6)


def test_art_zero_data():
    A = np.random.default_rng(10).standard_normal((8, 4))
    np.testing.assert_array_equal(art_reconstruct(A, np.zeros(8), lam=1.0), 0.0)


def test_art_norm_decreases_with_lambda():
    rng = np.random.default_rng(11)
    A = rng.standard_normal((20, 8))
    y = A @ rng.uniform(0, 1, 8) + 0.1 * rng.standard_normal(20)
    norms = [np.linalg.norm(art_reconstruct(A, y, lam=lam, n_iters=30)) for lam in (0.01, 0.1, 1, 10, 100)]
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_art_skips_zero_rows():
    A = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    out = art_reconstruct(A, np.array([0.5, 0.0, 0.25]), lam=0.0, n_iters=5)
    np.testing.assert_allclose(out, [0.5, 0.25], atol=1e-12)
    assert np.all(np.isfinite(out))
