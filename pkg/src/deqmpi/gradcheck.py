"""Finite-difference checks of every hand-written gradient.

Errors are norm-wise, ``||fd - an|| / max(||fd||, ||an||)``, so entries that
are legitimately zero do not blow up the metric.
"""
from __future__ import annotations

import numpy as np

from .deq import AndersonConfig, DeqModel, DeqProblem, deq_solve, h_theta, implicit_backward
from .forward import SystemMatrix
from .neural import (
    DataLayout, LcConfig, RdnConfig, ball_project, ball_project_vjp, concat_fwd, concat_vjp,
    conv1d_fwd, conv1d_vjp, conv2d_fwd, conv2d_vjp, init_lc, init_rdn, lc_forward,
    lc_passthrough, lc_vjp, rdn_forward, rdn_vjp, relu_fwd, relu_vjp,
)

H_PRIMITIVE = 1e-4


def rel_err(fd, an):
    fd = np.ravel(fd)
    an = np.ravel(an)
    den = max(np.linalg.norm(fd), np.linalg.norm(an))
    return 0.0 if den == 0.0 else float(np.linalg.norm(fd - an) / den)


def fd_gradient(f, x, h=H_PRIMITIVE):
    """Entry-wise central differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return g


def _away_from_zero(rng, shape, gap=0.05):
    v = rng.uniform(gap, 1.0, shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def check_primitives(seed, backend=None):
    """Entry-wise FD of each primitive VJP on random small tensors."""
    rng = np.random.default_rng(seed)
    out = {}

    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    g = rng.standard_normal((2, 2, 4, 5))
    dx, dw, db = conv2d_vjp(g, x, w, backend)
    out["conv2d"] = max(
        rel_err(fd_gradient(lambda t: np.sum(conv2d_fwd(t, w, b, backend) * g), x), dx),
        rel_err(fd_gradient(lambda t: np.sum(conv2d_fwd(x, t, b, backend) * g), w), dw),
        rel_err(fd_gradient(lambda t: np.sum(conv2d_fwd(x, w, t, backend) * g), b), db),
    )

    x = rng.standard_normal((2, 3, 7, 2))
    w = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(4)
    g = rng.standard_normal((2, 4, 7, 2))
    dx, dw, db = conv1d_vjp(g, x, w, backend)
    out["conv1d"] = max(
        rel_err(fd_gradient(lambda t: np.sum(conv1d_fwd(t, w, b, backend) * g), x), dx),
        rel_err(fd_gradient(lambda t: np.sum(conv1d_fwd(x, t, b, backend) * g), w), dw),
        rel_err(fd_gradient(lambda t: np.sum(conv1d_fwd(x, w, t, backend) * g), b), db),
    )

    x = _away_from_zero(rng, (3, 4))
    g = rng.standard_normal((3, 4))
    out["relu"] = rel_err(fd_gradient(lambda t: np.sum(relu_fwd(t) * g), x), relu_vjp(g, x))

    a, c = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 3, 3))
    g = rng.standard_normal((2, 5, 3))
    ga, gc = concat_vjp(g, [2, 3])
    out["concat"] = max(
        rel_err(fd_gradient(lambda t: np.sum(concat_fwd([t, c]) * g), a), ga),
        rel_err(fd_gradient(lambda t: np.sum(concat_fwd([a, t]) * g), c), gc),
    )
    out["add"] = rel_err(fd_gradient(lambda t: np.sum((t + c[:, :2]) * g[:, :2]), a), g[:, :2])

    y = rng.standard_normal((2, 6))
    z = y + rng.standard_normal((2, 6))
    eps = np.array([0.5, 10.0])  # one sample outside the ball, one inside
    g = rng.standard_normal((2, 6))
    _, aux = ball_project(z, y, eps)
    gz = ball_project_vjp(g, aux)
    gy = g - gz
    out["ball_project"] = max(
        rel_err(fd_gradient(lambda t: np.sum(ball_project(t, y, eps)[0] * g), z), gz),
        rel_err(fd_gradient(lambda t: np.sum(ball_project(z, t, eps)[0] * g), y), gy),
    )
    return out


def _directional(f, p, d, h):
    return (f(p + h * d) - f(p - h * d)) / (2 * h)


def check_rdn(seed, cfg=RdnConfig(2, 3, 2, 2), h=1e-5, backend=None):
    """Input and per-tensor parameter directional derivatives of the RDN."""
    rng = np.random.default_rng(seed)
    params = init_rdn(cfg, seed=seed)
    for k in params:
        params.values[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
    v = rng.standard_normal((2, 5, 6))
    out, cache = rdn_forward(v, params, cfg, with_cache=True, backend=backend)
    g = rng.standard_normal(out.shape)
    gv, grads = rdn_vjp(g, cache, params, cfg, backend=backend)
    fds, ans = [], []
    d = rng.standard_normal(v.shape)
    fds.append(_directional(lambda t: np.sum(rdn_forward(t, params, cfg, backend=backend) * g), v, d, h))
    ans.append(np.sum(gv * d))
    for k in params:
        d = rng.standard_normal(params[k].shape)

        def f(t, k=k):
            q = params.copy()
            q.values[k] = t
            return np.sum(rdn_forward(v, q, cfg, backend=backend) * g)

        fds.append(_directional(f, params[k], d, h))
        ans.append(np.sum(grads[k] * d))
    return rel_err(fds, ans)


def check_lc(seed, cfg=LcConfig(1, 4, 3), h=1e-5, backend=None):
    """LC gradients w.r.t. v, y and parameters, inside and on the ball boundary."""
    rng = np.random.default_rng(seed)
    layout = DataLayout((4, 2), rng.permutation(8)[:6])
    params = init_lc(cfg, seed=seed)
    y = rng.standard_normal((2, 12))
    v = y + 0.3 * rng.standard_normal((2, 12))
    worst = 0.0
    for eps in (1e9, 0.5):
        out, cache = lc_forward(v, y, eps, params, cfg, layout, with_cache=True, backend=backend)
        g = rng.standard_normal(out.shape)
        gv, gy, grads = lc_vjp(g, cache, params, cfg, layout, backend=backend)

        def F(vv, yy, q):
            return np.sum(lc_forward(vv, yy, eps, q, cfg, layout, backend=backend) * g)

        fds, ans = [], []
        d = rng.standard_normal(v.shape)
        fds.append(_directional(lambda t: F(t, y, params), v, d, h))
        ans.append(np.sum(gv * d))
        d = rng.standard_normal(y.shape)
        fds.append(_directional(lambda t: F(v, t, params), y, d, h))
        ans.append(np.sum(gy * d))
        for k in params:
            d = rng.standard_normal(params[k].shape)

            def f(t, k=k):
                q = params.copy()
                q.values[k] = t
                return F(v, y, q)

            fds.append(_directional(f, params[k], d, h))
            ans.append(np.sum(grads[k] * d))
        worst = max(worst, rel_err(fds, ans))
    return worst


def implicit_case(seed, h=1e-6, backend=None):
    """Implicit gradient vs FD through the whole fixed-point solve on a toy.

    The toy is a 2-voxel, 3-frequency problem with a pass-through LC plus
    small weight noise, so a fixed point exists and the solve reaches 1e-12.
    Returns (rel_err, gradient norm); the norm lets callers skip toys whose
    true gradient vanishes, where FD only measures rounding noise.
    """
    rng = np.random.default_rng(seed)
    rdn, lc = RdnConfig(1, 2, 1, 2), LcConfig(1, 4, 3)
    n, m = 2, 3
    A = rng.standard_normal((2 * m, n))
    sm = SystemMatrix.from_matrix(A, (1, n))
    model = DeqModel(init_rdn(rdn, zero=True).merged(lc_passthrough(lc)), rdn, lc, "lc")
    for k in model.params:
        model.params.values[k] = model.params[k] + 0.05 * rng.standard_normal(model.params[k].shape)
    x_true = rng.random(n)
    y = A @ x_true + 0.1 * rng.standard_normal(2 * m)
    prob = DeqProblem.from_sm(sm, y[None], eps=0.5)
    cfg = AndersonConfig(tol=1e-12, max_iters=500)
    target = rng.random((1, n))

    def loss(mdl):
        res = deq_solve(prob, mdl, cfg, backend=backend)
        out = h_theta(res.x, prob, mdl, backend=backend)
        return 0.5 * np.sum((prob.split(out)[0] - target) ** 2), res

    _, res = loss(model)
    out = h_theta(res.x, prob, model, backend=backend)
    b = np.zeros_like(res.x)
    b[:, :n] = prob.split(out)[0] - target
    grads, _ = implicit_backward(res.x, prob, model, b, cfg, backend=backend)
    fds, ans = [], []
    for k in model.params:
        d = rng.standard_normal(model.params[k].shape)
        up, down = model.copy(), model.copy()
        up.params.values[k] = up.params[k] + h * d
        down.params.values[k] = down.params[k] - h * d
        fds.append((loss(up)[0] - loss(down)[0]) / (2 * h))
        ans.append(np.sum(grads[k] * d))
    return rel_err(fds, ans), float(np.linalg.norm(ans))


def implicit_suite(n_cases=20, start=0, min_norm=1e-6, backend=None):
    """First ``n_cases`` seeds from ``start`` with a non-vanishing gradient.

    Returns ({seed: rel_err}, [skipped seeds]).
    """
    errs, skipped = {}, []
    seed = start
    while len(errs) < n_cases:
        err, norm = implicit_case(seed, backend=backend)
        if norm < min_norm:
            skipped.append(seed)
        else:
            errs[seed] = err
        seed += 1
    return errs, skipped


def run_all(n_seeds=20, start=0, backend=None):
    """Max relative error per suite over ``n_seeds`` seeds."""
    report = {}
    for s in range(start, start + n_seeds):
        for name, e in check_primitives(s, backend).items():
            report[name] = max(report.get(name, 0.0), e)
        report["rdn"] = max(report.get("rdn", 0.0), check_rdn(s, backend=backend))
        report["lc"] = max(report.get("lc", 0.0), check_lc(s, backend=backend))
    errs, skipped = implicit_suite(n_seeds, start, backend=backend)
    report["implicit"] = max(errs.values())
    return report, skipped


THRESHOLDS = {"implicit": 1e-3}
DEFAULT_THRESHOLD = 1e-4


def passed(report):
    return all(v < THRESHOLDS.get(k, DEFAULT_THRESHOLD) for k, v in report.items())
