import numpy as np
import pytest

from deqmpi import gradcheck
from deqmpi.deq import (
    AndersonConfig, DeqModel, DeqProblem, TrainConfig, TrainingData, anderson_solve, deq_infer,
    deq_solve, e2e_infer, h_theta, implicit_backward, picard_solve, pretrain_lc, pretrain_rdn,
    train_deq, train_end2end, train_unrolled, unrolled_forward, unrolled_infer,
)
from deqmpi.errors import ConfigError, DivergenceError
from deqmpi.forward import ScannerConfig, discrepant_sm, emulate_measurement, simulate_sm
from deqmpi.linalg import TruncatedPinv
from deqmpi.metrics import psnr
from deqmpi.neural import (
    DataLayout, LcConfig, RdnConfig, ball_project, init_lc, lc_forward, lc_passthrough,
)
from deqmpi.phantoms import vessel_dataset
from deqmpi.solvers import AdmmConfig, admm_reconstruct

from conftest import toy_sm

TINY_RDN = RdnConfig(1, 4, 2, 4)
TINY_LC = LcConfig(1, 4, 3)


@pytest.fixture(scope="module")
def mini():
    """An 8x8 scanner with train/val vessel sets, small enough to train in seconds."""
    cfg = ScannerConfig(grid=(8, 8), n_angles=8, harmonics=(2, 6))
    sm = simulate_sm(cfg, 0)
    smr = discrepant_sm(sm, 2)
    tr = TrainingData(sm, smr, vessel_dataset("train", 64, grid=(8, 8)))
    va = TrainingData(sm, smr, vessel_dataset("val", 16, grid=(8, 8)))
    return sm, smr, tr, va


def toy_problem(seed=0, n=2, m=3, eps=0.5, y=None):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((2 * m, n))
    sm = toy_sm(A, (1, n))
    y = A @ rng.random(n) + 0.1 * rng.standard_normal(2 * m) if y is None else y
    return sm, DeqProblem.from_sm(sm, y[None], eps=eps)


# ---------------------------------------------------------------- Anderson

@pytest.mark.parametrize("dim", [1, 7, 50])
def test_anderson_affine(dim):
    res = anderson_solve(lambda v: 0.5 * v + 1.0, np.zeros(dim), AndersonConfig(tol=1e-10))
    np.testing.assert_allclose(res.x, 2.0, atol=1e-6)
    assert res.iters[0] <= 10
    assert res.converged[0]


@pytest.mark.parametrize("seed", range(5))
def test_anderson_beats_picard(seed):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((20, 20)))
    Q = Q @ np.diag(0.9 * rng.uniform(-1, 1, 20)) @ Q.T
    Q *= 0.9 / np.max(np.abs(np.linalg.eigvals(Q)))
    c = rng.standard_normal(20)

    def f(v):
        return Q @ v + c

    _, k_picard = picard_solve(f, np.zeros(20), tol=1e-4)
    res = anderson_solve(f, np.zeros(20), AndersonConfig(max_iters=1000))
    assert res.converged[0]
    assert res.iters[0] <= k_picard
    exact = np.linalg.solve(np.eye(20) - Q, c)
    # a relative step of 1e-4 bounds the error by about 1e-4 / (1 - 0.9)
    assert np.linalg.norm(res.x - exact) / np.linalg.norm(exact) < 2e-3


def test_anderson_identity_stops_at_once():
    x0 = np.arange(4.0)
    res = anderson_solve(lambda v: v, x0)
    assert res.iters[0] == 1 and res.converged[0]
    np.testing.assert_array_equal(res.x, x0)


def test_anderson_reports_nan():
    with pytest.raises(DivergenceError) as info:
        anderson_solve(lambda v: v * np.nan, np.ones(3))
    assert len(info.value.history) == 1
    res = anderson_solve(lambda X, idx: X * np.where(idx[:, None] == 0, np.nan, 0.5),
                         np.ones((2, 3)), on_nan="mask")
    assert res.diverged.tolist() == [True, False]


def test_anderson_history_consistent():
    res = anderson_solve(lambda v: 0.9 * v + 0.1, np.zeros(5), AndersonConfig(m=2))
    finals = res.residual
    assert np.all(np.isfinite(finals))
    assert res.converged[0] == (finals[0] < 1e-4)


def test_anderson_config_validation():
    with pytest.raises(ConfigError):
        AndersonConfig(m=0).validate()
    with pytest.raises(ConfigError):
        AndersonConfig(tol=0.0).validate()


# ---------------------------------------------------------------- fixed-point map

def test_h_theta_fixed_point_self_map():
    # zero-weight LC sends any input to the point of the eps-ball nearest the
    # origin; choosing y so that this point is A x* makes (x*, 0, 0) a fixed point
    rng = np.random.default_rng(1)
    A = rng.standard_normal((6, 2))
    x_star = rng.uniform(0.2, 1.0, 2)
    c = A @ x_star
    eps = 0.5
    y = c * (1 + eps / np.linalg.norm(c))
    sm = toy_sm(A, (1, 2))
    prob = DeqProblem.from_sm(sm, y[None], eps=eps)
    model = DeqModel.init(RdnConfig(1, 2, 1, 2), TINY_LC, zero=True)
    state = prob.join(x_star[None], np.zeros((1, 6)), np.zeros((1, 2)))
    np.testing.assert_allclose(h_theta(state, prob, model), state, rtol=0, atol=1e-10)


def test_h_theta_zero_stays_zero():
    _, prob = toy_problem(2, y=np.zeros(6))
    model = DeqModel.init(TINY_RDN, TINY_LC, zero=True)
    state = np.zeros((1, prob.dim))
    np.testing.assert_array_equal(h_theta(state, prob, model), 0.0)


def test_h_theta_moves_toward_ball(sm):
    x = vessel_dataset("test", 1)[0]
    y = emulate_measurement(sm, x, 30.0, seed=0)
    prob = DeqProblem.from_sm(sm, y.data[None], noise_std=y.noise_std)
    model = DeqModel.init(TINY_RDN, LcConfig(), mode="proj", seed=3)
    state = prob.join(np.full((1, prob.n), 2.0), np.zeros((1, prob.m2)), np.zeros((1, prob.n)))

    def gap(s):
        return np.linalg.norm(prob.fwd(prob.split(s)[0]) - prob.y)

    assert gap(h_theta(state, prob, model)) < gap(state)


def test_zero_network_iteration_is_classic_admm():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((10, 6))
    sm = toy_sm(A, (2, 3))
    y = A @ rng.random(6) + 0.05 * rng.standard_normal(10)
    prob = DeqProblem(A, y[None], eps=0.0, layout=DataLayout.of(sm), grid=(2, 3))
    model = DeqModel.init(RdnConfig(1, 2, 1, 2), LcConfig(), zero=True)
    state = np.zeros((1, prob.dim))
    seen = []
    admm_reconstruct(sm, y, AdmmConfig("none", epsilon=0.0, n_iters=30),
                     callback=lambda s: seen.append((s.x.copy(), s.d0.copy(), s.d1.copy())))
    for x, d0, d1 in seen:
        state = h_theta(state, prob, model)
        got = prob.split(state)
        for a, b in zip(got, (x, d0, d1)):
            np.testing.assert_allclose(a[0], b, rtol=0, atol=1e-8)


def test_zero_network_iteration_matches_admm_when_whitened():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((10, 6))
    sm = toy_sm(A, (2, 3))
    Y = rng.random((2, 6)) @ A.T + 0.05 * rng.standard_normal((2, 10))
    std = np.array([0.3, 4.0])
    prob = DeqProblem.from_sm(sm, Y, noise_std=std, eps=1.5)
    model = DeqModel.init(RdnConfig(1, 2, 1, 2), LcConfig(), mode="proj", zero=True)
    state = np.zeros((2, prob.dim))
    seen = []
    admm_reconstruct(sm, Y, AdmmConfig("none", epsilon=1.5, n_iters=20), noise_std=std,
                     callback=lambda s: seen.append(s.x.copy()))
    for x in seen:
        state = h_theta(state, prob, model)
        np.testing.assert_allclose(prob.split(state)[0], x, rtol=0, atol=1e-8)


# ---------------------------------------------------------------- inference

def test_deq_infer_zero_data():
    sm, _ = toy_problem(5)
    model = DeqModel.init(TINY_RDN, TINY_LC, zero=True)
    np.testing.assert_array_equal(deq_infer(sm, np.zeros(6), model, eps=0.5), 0.0)


def test_deq_infer_deterministic_and_batched(smr, sm):
    X = vessel_dataset("test", 3)
    ys = [emulate_measurement(sm, x, 30.0, seed=i) for i, x in enumerate(X)]
    Y = np.stack([y.data for y in ys])
    std = np.array([y.noise_std for y in ys])
    model = DeqModel.init(TINY_RDN, LcConfig(), seed=1)
    a = deq_infer(smr, Y, model, noise_std=std)
    b = deq_infer(smr, Y, model, noise_std=std)
    np.testing.assert_array_equal(a, b)
    one = deq_infer(smr, Y[1], model, noise_std=std[1])
    np.testing.assert_allclose(one, a[1], atol=1e-9)
    assert a.shape == (3,) + smr.grid and a.min() >= 0


def test_deq_infer_invariant_to_joint_rescaling(smr, sm):
    x = vessel_dataset("test", 1)[0]
    y = emulate_measurement(sm, x, 30.0, seed=0)
    model = DeqModel.init(TINY_RDN, LcConfig(), seed=2)
    eps = np.sqrt(sm.stacked.shape[0]) * y.noise_std
    base = psnr(deq_infer(smr, y.data, model, eps=eps), x)
    k = 7.5
    scaled = psnr(deq_infer(smr.replace(stacked=k * smr.stacked), k * y.data, model, eps=k * eps), x)
    assert abs(base - scaled) < 1e-6


def test_lc_ablated_toy_self_map():
    _, prob = toy_problem(6)
    model = DeqModel.init(TINY_RDN, TINY_LC, mode="proj", zero=True)
    res = deq_solve(prob, model, AndersonConfig(tol=1e-13, max_iters=2000))
    np.testing.assert_allclose(h_theta(res.x, prob, model), res.x, atol=1e-9)
    again = deq_solve(prob, model, AndersonConfig(tol=1e-13, max_iters=2000))
    np.testing.assert_array_equal(res.x, again.x)


# ---------------------------------------------------------------- implicit gradient

def test_scalar_implicit_gradient():
    # h(x; t) = 0.5 x + t has x* = 2t; the adjoint solve s = 0.5 s + b gives dx*/dt = 2
    res = anderson_solve(lambda s: 0.5 * s + 1.0, np.zeros(1), AndersonConfig(tol=1e-12))
    np.testing.assert_allclose(res.x * 1.0, 2.0, atol=1e-10)


def test_implicit_gradient_zero_for_zero_upstream():
    _, prob = toy_problem(7)
    model = DeqModel.init(TINY_RDN, TINY_LC, seed=3)
    res = deq_solve(prob, model)
    grads, _ = implicit_backward(res.x, prob, model, np.zeros_like(res.x))
    assert all(np.all(g == 0) for g in grads.values())


def test_implicit_gradient_vs_finite_differences():
    errs, skipped = gradcheck.implicit_suite(5)
    assert len(errs) == 5
    assert max(errs.values()) < 1e-3


# ---------------------------------------------------------------- pretraining

def test_pretrain_rdn_identity_fit():
    X = vessel_dataset("train", 32, grid=(8, 8))
    p = pretrain_rdn(X, 0.0, TrainConfig(epochs=50, batch_size=8, lr=3e-3), TINY_RDN)
    from deqmpi.neural import rdn_forward
    loss = np.mean(np.abs(rdn_forward(X, p, TINY_RDN) - X))
    assert loss < 0.01 * np.mean(np.abs(X))


def test_pretrain_rdn_denoises_and_is_seeded():
    from deqmpi.neural import rdn_forward
    X = vessel_dataset("train", 64, grid=(8, 8))
    cfg = TrainConfig(epochs=20, batch_size=8, lr=3e-3)
    p = pretrain_rdn(X, 0.1, cfg, TINY_RDN)
    q = pretrain_rdn(X, 0.1, cfg, TINY_RDN)
    for k in p:
        np.testing.assert_array_equal(p[k], q[k])
    V = vessel_dataset("val", 16, grid=(8, 8))
    noisy = V + 0.1 * np.random.default_rng(0).standard_normal(V.shape)
    den = rdn_forward(noisy, p, TINY_RDN)
    assert np.mean([psnr(d, v) for d, v in zip(den, V)]) > np.mean([psnr(n, v) for n, v in zip(noisy, V)])


def test_pretrain_lc_mimics_projection(mini):
    from deqmpi.deq import lc_pretrain_pairs
    _, smr, tr, va = mini
    cfg = TrainConfig(epochs=30, batch_size=8, lr=3e-3)
    p = pretrain_lc(tr, 0.05, 0.02, None, cfg, TINY_LC)
    layout = DataLayout.of(smr)
    eps = np.sqrt(smr.stacked.shape[0]) * 0.05
    yn, vn = lc_pretrain_pairs(va, np.arange(16), 35.0, 0.05, 0.02, np.random.default_rng(1), 0.05)
    target, _ = ball_project(vn, yn, eps)
    out = lc_forward(vn, yn, eps, p, TINY_LC, layout)
    assert np.mean(np.abs(out - target).sum(1)) < 0.1 * np.mean(np.abs(target).sum(1))
    q = pretrain_lc(tr, 0.05, 0.02, None, cfg, TINY_LC)
    for k in p:
        np.testing.assert_array_equal(p[k], q[k])


def test_pretrain_lc_noise_free_fits_identity(mini):
    from deqmpi.deq import lc_pretrain_pairs
    _, smr, tr, va = mini
    cfg = TrainConfig(epochs=30, batch_size=8, lr=1e-2)
    p = pretrain_lc(tr, 0.0, 0.0, 1e6, cfg, TINY_LC)
    yn, vn = lc_pretrain_pairs(va, np.arange(16), 35.0, 0.0, 0.0, np.random.default_rng(1), 0.05)
    out = lc_forward(vn, yn, 1e6, p, TINY_LC, DataLayout.of(smr))
    assert np.mean(np.abs(out - vn)) < 0.1 * np.mean(np.abs(vn))


# ---------------------------------------------------------------- training

def test_train_deq_loss_decreases(mini):
    from deqmpi.deq import JsonLog
    _, _, tr, va = mini
    log = JsonLog()
    model = DeqModel.init(TINY_RDN, TINY_LC, seed=0)
    model = DeqModel(model.params.subset("rdn.").merged(lc_passthrough(TINY_LC)), TINY_RDN, TINY_LC)
    train_deq(tr, model, TrainConfig(epochs=5, batch_size=4, lr=2e-3), val=va, log=log)
    recs = [r for r in log.records if r["stage"] == "train-deq"]
    assert len(recs) == 5
    assert recs[-1]["loss"] < recs[0]["loss"]
    assert all("val_psnr" in r for r in recs)


def test_train_deq_reproducible(mini):
    _, _, tr, _ = mini
    model = DeqModel.init(TINY_RDN, TINY_LC, seed=0)
    cfg = TrainConfig(epochs=0.25, batch_size=4)
    a = train_deq(tr, model, cfg)
    b = train_deq(tr, model, cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_unrolled_inference_matches_training_forward(mini):
    _, smr, tr, _ = mini
    model = DeqModel.init(TINY_RDN, TINY_LC, mode="proj", seed=0)
    model = train_unrolled(tr, model, 5, TrainConfig(epochs=0.25, batch_size=8))
    x = tr.images[:2].reshape(2, -1)
    rng = np.random.default_rng(0)
    Y, std = tr.emulate(np.arange(2), 35.0, rng)[1:]
    from deqmpi.deq import _normalize_eps
    prob = _normalize_eps(tr.problem(Y, std), model.data_scale)
    state = unrolled_forward(prob, model, 5, pinv=TruncatedPinv(smr.stacked, 1e-3))
    want = np.maximum(prob.split(state)[0], 0).reshape(2, 8, 8)
    got = unrolled_infer(smr, Y, model, 5, noise_std=std)
    np.testing.assert_array_equal(got, want)
    assert x.shape == (2, 64)


def test_end_to_end_nonnegative(mini):
    _, smr, tr, _ = mini
    p = train_end2end(tr, TrainConfig(epochs=1, batch_size=8), TINY_RDN)
    Y = np.random.default_rng(0).standard_normal((3, smr.stacked.shape[0]))
    assert e2e_infer(smr, Y, p, TINY_RDN).min() >= 0


def test_model_validation():
    with pytest.raises(ConfigError):
        DeqModel.init(TINY_RDN, TINY_LC, mode="other")
    with pytest.raises(ConfigError):
        TrainConfig(lr=0).validate()
