"""Deep-equilibrium reconstruction: fixed-point map, Anderson solver, training.

The fixed-point map acts on the state (x, d0, d1) of an ADMM iteration whose
data step is a learned consistency block (or a plain eps-ball projection)
and whose prior step is an RDN:

    z0 = LC(A x - d0, y)         z1 = RDN(x - d1)
    x+ = (I + A^T A)^-1 (A^T (z0 + d0) + z1 + d1)
    d0+ = d0 + z0 - A x+         d1+ = d1 + z1 - x+

All arrays are batched along the first axis. Each sample carries its own
whitening scale c, so the matrix it sees is c*A.
"""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field

import numpy as np

from .errors import BackwardDivergenceError, ConfigError, DivergenceError, ShapeError
from .forward import SystemMatrix, emulate_batch
from .linalg import NormalEig, TruncatedPinv
from .metrics import psnr
from .neural import (
    Adam, DataLayout, LcConfig, ParamStore, RdnConfig, ball_project, ball_project_vjp,
    init_lc, init_rdn, lc_forward, lc_vjp, rdn_forward, rdn_vjp,
)


# ---------------------------------------------------------------- configs

# noise std of the whitened data block during the iteration
DATA_SCALE = 0.05

@dataclass(frozen=True)
class AndersonConfig:
    m: int = 5
    beta: float = 1.0
    ridge: float = 1e-10
    max_iters: int = 25
    tol: float = 1e-4

    def validate(self):
        if self.m < 1:
            raise ConfigError("Anderson memory m must be >= 1")
        if not self.tol > 0:
            raise ConfigError("Anderson tol must be positive")
        if self.max_iters < 1:
            raise ConfigError("Anderson max_iters must be >= 1")
        if not 0 < self.beta <= 1:
            raise ConfigError("Anderson beta must lie in (0, 1]")
        return self


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    epochs: float = 1.0
    batch_size: int = 16
    snr_db: float = 35.0
    eps: float | None = None
    sigma1: float = 0.1
    sigma2: float = 0.05
    sigma3: float = 0.02
    seed: int = 0

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for k in ("sigma1", "sigma2", "sigma3"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        return self


# ---------------------------------------------------------------- model and problem

@dataclass
class DeqModel:
    """Network parameters plus the architecture needed to apply them.

    ``mode='lc'`` uses the learned consistency block; ``mode='proj'`` swaps in
    the unlearned eps-ball projection (no LC parameters are used).
    ``data_scale`` is the noise std of the data block in the units the
    iteration runs in; it sets the balance between the two penalty terms.
    """

    params: ParamStore
    rdn: RdnConfig = RdnConfig()
    lc: LcConfig = LcConfig()
    mode: str = "lc"
    data_scale: float = DATA_SCALE

    def __post_init__(self):
        if self.mode not in ("lc", "proj"):
            raise ConfigError(f"mode must be 'lc' or 'proj', got {self.mode!r}")
        if not self.data_scale > 0:
            raise ConfigError(f"data_scale must be positive, got {self.data_scale}")

    @classmethod
    def init(cls, rdn=RdnConfig(), lc=LcConfig(), mode="lc", seed=0, zero=False,
             data_scale=DATA_SCALE):
        params = init_rdn(rdn, seed=seed, zero=zero)
        if mode == "lc":
            params = params.merged(init_lc(lc, seed=seed + 1, zero=zero))
        return cls(params, rdn, lc, mode, data_scale)

    def with_params(self, params):
        return DeqModel(params, self.rdn, self.lc, self.mode, self.data_scale)

    def copy(self):
        return self.with_params(self.params.copy())


class DeqProblem:
    """A (batched) whitened inverse problem: matrix, data, scales and eps.

    ``y`` is raw data; ``scale`` (1 / noise std) whitens both it and the matrix.
    """

    def __init__(self, A, y, scale=None, eps=None, layout=None, grid=None, eig=None):
        self.A = np.asarray(A, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y = y[None] if y.ndim == 1 else y
        if self.y.shape[1] != self.A.shape[0]:
            raise ShapeError(f"data length {self.y.shape[1]} does not match {self.A.shape[0]} rows")
        b = self.y.shape[0]
        self.c = np.ones(b) if scale is None else np.broadcast_to(np.asarray(scale, float), (b,)).copy()
        # stored whitened, in the same units as fwd(x)
        self.y = self.y * self.c[:, None]
        eps = np.sqrt(self.A.shape[0]) if eps is None else eps
        self.eps = np.broadcast_to(np.asarray(eps, float), (b,)).copy()
        self.layout = layout
        self.grid = grid
        self.eig = NormalEig(self.A) if eig is None else eig

    @classmethod
    def from_sm(cls, sm: SystemMatrix, y, noise_std=None, eps=None, eig=None):
        scale = None if noise_std is None else 1.0 / np.asarray(noise_std, dtype=np.float64)
        return cls(sm.stacked, y, scale, eps, DataLayout.of(sm), tuple(sm.grid), eig)

    @property
    def batch(self):
        return self.y.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def m2(self):
        return self.A.shape[0]

    @property
    def dim(self):
        return 2 * self.n + self.m2

    def subset(self, idx):
        out = object.__new__(DeqProblem)
        out.A, out.layout, out.grid, out.eig = self.A, self.layout, self.grid, self.eig
        out.y, out.c, out.eps = self.y[idx], self.c[idx], self.eps[idx]
        return out

    def fwd(self, x):
        return (x @ self.A.T) * self.c[:, None]

    def adj(self, r):
        return (r @ self.A) * self.c[:, None]

    def solve(self, rhs):
        return self.eig.solve(rhs, self.c)

    def split(self, s):
        n, m2 = self.n, self.m2
        return s[:, :n], s[:, n:n + m2], s[:, n + m2:]

    def join(self, x, d0, d1):
        return np.concatenate([x, d0, d1], axis=1)

    def init_state(self, x0=None, pinv=None):
        """Least-squares start with zero multipliers."""
        if x0 is None:
            pinv = TruncatedPinv(self.A, 1e-3) if pinv is None else pinv
            # the pseudo-inverse is invariant to the per-sample scale
            x0 = pinv(self.y / self.c[:, None])
        return self.join(x0, np.zeros((self.batch, self.m2)), np.zeros((self.batch, self.n)))


# ---------------------------------------------------------------- fixed-point map

def h_theta(state, prob: DeqProblem, model: DeqModel, with_cache=False, backend=None):
    """One application of the fixed-point map to the flattened state (B, 2N+2M)."""
    x, d0, d1 = prob.split(state)
    v0 = prob.fwd(x) - d0
    if model.mode == "lc":
        z0, lc_cache = lc_forward(v0, prob.y, prob.eps, model.params, model.lc, prob.layout,
                                  backend=backend, with_cache=True)
    else:
        z0, lc_cache = ball_project(v0, prob.y, prob.eps)
    v1 = x - d1
    z1, rdn_cache = rdn_forward(v1, model.params, model.rdn, grid=prob.grid,
                                backend=backend, with_cache=True)
    xn = prob.solve(prob.adj(z0 + d0) + z1 + d1)
    d0n = d0 + z0 - prob.fwd(xn)
    d1n = d1 + z1 - xn
    out = prob.join(xn, d0n, d1n)
    if not with_cache:
        return out
    return out, {"lc": lc_cache, "rdn": rdn_cache}


def h_theta_vjp(g, cache, prob: DeqProblem, model: DeqModel, need_params=True, backend=None):
    """Pull ``g`` (B, 2N+2M) back through h_theta.

    Returns (grad wrt the input state, param grads dict). The linear solve is
    applied through the shared eigendecomposition, never materialized.
    """
    gx, gd0, gd1 = prob.split(g)
    g_xn = gx - prob.adj(gd0) - gd1
    g_rhs = prob.solve(g_xn)
    g_z0 = prob.fwd(g_rhs) + gd0
    g_z1 = g_rhs + gd1
    grads = {}
    if model.mode == "lc":
        g_v0, _, gp = lc_vjp(g_z0, cache["lc"], model.params, model.lc, prob.layout,
                             backend=backend, need_params=need_params)
        grads.update(gp)
    else:
        g_v0 = ball_project_vjp(g_z0, cache["lc"])
    g_v1, gp = rdn_vjp(g_z1, cache["rdn"], model.params, model.rdn, backend=backend,
                       need_params=need_params)
    grads.update(gp)
    g_v1 = g_v1.reshape(g_z1.shape)
    g_x = prob.adj(g_v0) + g_v1
    g_d0 = g_z0 - g_v0
    g_d1 = g_z1 - g_v1
    return prob.join(g_x, g_d0, g_d1), grads


# ---------------------------------------------------------------- Anderson

@dataclass
class AndersonResult:
    x: np.ndarray
    iters: np.ndarray
    converged: np.ndarray
    diverged: np.ndarray
    history: list = field(default_factory=list)

    @property
    def residual(self):
        """Final relative residual per sample."""
        out = np.full(len(self.iters), np.nan)
        for h in self.history:
            ok = ~np.isnan(h)
            out[ok] = h[ok]
        return out


def _mix_weights(G, ridge):
    """Anderson weights: min ||sum a_i G_i|| subject to sum a_i = 1, batched."""
    b, n, _ = G.shape
    H = np.einsum("bid,bjd->bij", G, G)
    scale = np.trace(H, axis1=1, axis2=2) / n
    H = H + (ridge * np.maximum(scale, 1e-300))[:, None, None] * np.eye(n)
    ones = np.ones((b, n, 1))
    try:
        w = np.linalg.solve(H, ones)[..., 0]
    except np.linalg.LinAlgError:
        w = np.stack([np.linalg.lstsq(Hi, np.ones(n), rcond=None)[0] for Hi in H])
    s = w.sum(axis=1, keepdims=True)
    bad = ~np.isfinite(s[:, 0]) | (np.abs(s[:, 0]) < 1e-300)
    w = np.where(bad[:, None], 0.0, w / np.where(bad[:, None], 1.0, s))
    w[bad, -1] = 1.0  # fall back to a plain fixed-point step
    return w


def anderson_solve(f, x0, cfg: AndersonConfig = AndersonConfig(), on_nan="raise", watch=None):
    """Anderson-accelerated fixed point of ``f``.

    ``x0`` of shape (D,) calls ``f(x)``; shape (B, D) calls ``f(X, idx)`` with
    only the rows ``idx`` still iterating, so converged samples are frozen.
    A sample stops when ``||f(x) - x|| / ||f(x)|| < tol``; its returned value
    is that last ``f(x)``. With ``on_nan='mask'`` samples hitting non-finite
    values are frozen and flagged instead of raising. ``watch`` (a slice) limits
    the stopping rule to part of the state; mixing always uses all of it.
    """
    cfg.validate()
    watch = slice(None) if watch is None else watch
    single = np.ndim(x0) == 1
    X0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    func = (lambda X, idx: np.atleast_2d(f(X[0]))) if single else f
    B, D = X0.shape
    m = cfg.m
    Xh = np.zeros((B, m, D))
    Fh = np.zeros((B, m, D))
    out = X0.copy()
    iters = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    diverged = np.zeros(B, dtype=bool)
    history = []
    active = np.arange(B)
    x = X0.copy()
    for k in range(cfg.max_iters):
        fx = func(x[active], active)
        iters[active] += 1
        res = np.full(B, np.nan)
        num = np.linalg.norm((fx - x[active])[:, watch], axis=1)
        den = np.linalg.norm(fx[:, watch], axis=1)
        rel = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
        res[active] = rel
        history.append(res)
        bad = ~np.all(np.isfinite(fx), axis=1) | ~np.isfinite(rel)
        if bad.any():
            if on_nan == "raise":
                raise DivergenceError(f"non-finite iterate at iteration {k + 1}", history)
            diverged[active[bad]] = True
        out[active] = fx
        slot = k % m
        Xh[active, slot] = x[active]
        Fh[active, slot] = fx
        done = (rel < cfg.tol) & ~bad
        converged[active[done]] = True
        keep = ~done & ~bad
        active = active[keep]
        if active.size == 0:
            break
        n = min(k + 1, m)
        G = Fh[active, :n] - Xh[active, :n]
        w = _mix_weights(G, cfg.ridge)
        mixed_f = np.einsum("bi,bid->bd", w, Fh[active, :n])
        if cfg.beta == 1.0:
            x[active] = mixed_f
        else:
            mixed_x = np.einsum("bi,bid->bd", w, Xh[active, :n])
            x[active] = cfg.beta * mixed_f + (1 - cfg.beta) * mixed_x
    res = AndersonResult(out[0] if single else out, iters, converged, diverged, history)
    return res


def picard_solve(f, x0, tol=1e-4, max_iters=1000):
    """Plain fixed-point iteration with the same stopping rule (reference)."""
    x = np.asarray(x0, dtype=np.float64)
    for k in range(1, max_iters + 1):
        fx = f(x)
        den = np.linalg.norm(fx)
        if np.linalg.norm(fx - x) <= tol * den or den == 0 and np.array_equal(fx, x):
            return fx, k
        x = fx
    return x, max_iters


# ---------------------------------------------------------------- inference

def _normalize_eps(prob: DeqProblem, scale=1.0):
    """Rescale each sample so its eps equals scale * sqrt(2M).

    The networks are trained in units where the noise std is ``scale`` and
    the data bound is scale * sqrt(2M); jointly rescaling (A, y, eps) maps any
    consistent input back to those units. eps of 0 or inf is left alone.
    """
    target = scale * np.sqrt(prob.m2)
    ok = np.isfinite(prob.eps) & (prob.eps > 0)
    k = np.where(ok, target / np.where(ok, prob.eps, 1.0), 1.0)
    prob.c = prob.c * k
    prob.y = prob.y * k[:, None]
    prob.eps = np.where(ok, target, prob.eps)
    return prob


def deq_solve(prob: DeqProblem, model: DeqModel, cfg: AndersonConfig = AndersonConfig(),
              on_nan="raise", init=None, pinv=None, backend=None):
    """Run the fixed-point solve; returns the AndersonResult over full states.

    Convergence is judged on the image block; the duals are mixed but not watched.
    """
    state0 = prob.init_state(pinv=pinv) if init is None else init

    def f(S, idx):
        return h_theta(S, prob.subset(idx), model, backend=backend)

    return anderson_solve(f, state0, cfg, on_nan=on_nan, watch=slice(0, prob.n))


def deq_infer(sm, y, model: DeqModel, cfg: AndersonConfig = AndersonConfig(), *, noise_std=None,
              eps=None, return_result=False, backend=None):
    """Reconstruct image(s) from measurement(s) ``y`` by the DEQ fixed point.

    ``y`` may be (2M,) or (B, 2M). Returns nonnegative image(s) on the grid.
    """
    single = np.ndim(y) == 1
    prob = DeqProblem.from_sm(sm, y, noise_std=noise_std, eps=eps)
    _normalize_eps(prob, model.data_scale)
    res = deq_solve(prob, model, cfg, backend=backend)
    x = np.maximum(prob.split(np.atleast_2d(res.x))[0], 0.0)
    x = x.reshape((-1,) + tuple(sm.grid))
    x = x[0] if single else x
    return (x, res) if return_result else x


# ---------------------------------------------------------------- implicit backward

def implicit_backward(state_star, prob: DeqProblem, model: DeqModel, b,
                      cfg: AndersonConfig = AndersonConfig(), backend=None, on_nan="raise"):
    """Parameter gradient of L(x_*) given b = dL/d(state) at the fixed point.

    Solves s = J^T s + b (J the state Jacobian of h at the fixed point) by
    Anderson iteration and returns (J_theta^T s as a dict, AndersonResult).
    Only the rows still iterating are re-linearized.
    """
    state_star = np.atleast_2d(state_star)
    b = np.atleast_2d(b)
    caches = {}

    def lin(idx):
        key = idx.tobytes()
        if key not in caches:
            caches.clear()
            sub = prob.subset(idx)
            _, cache = h_theta(state_star[idx], sub, model, with_cache=True, backend=backend)
            caches[key] = (sub, cache)
        return caches[key]

    def f(S, idx):
        sub, cache = lin(idx)
        g, _ = h_theta_vjp(S, cache, sub, model, need_params=False, backend=backend)
        return g + b[idx]

    try:
        res = anderson_solve(f, b.copy(), cfg, on_nan=on_nan)
    except DivergenceError as exc:
        raise BackwardDivergenceError(str(exc), exc.history) from exc
    s = np.atleast_2d(res.x)
    ok = ~res.diverged
    s = np.where(ok[:, None], s, 0.0)
    _, cache = h_theta(state_star, prob, model, with_cache=True, backend=backend)
    _, grads = h_theta_vjp(s, cache, prob, model, need_params=True, backend=backend)
    return grads, res


# ---------------------------------------------------------------- training helpers

class JsonLog:
    """Line-delimited JSON records, to a stream and/or kept in memory."""

    def __init__(self, stream=None, keep=True):
        self.stream = stream
        self.records = [] if keep else None

    def __call__(self, **rec):
        if self.records is not None:
            self.records.append(rec)
        if self.stream is not None:
            self.stream.write(json.dumps(rec, sort_keys=True) + "\n")
            self.stream.flush()


def _batches(n, batch_size, epochs, rng):
    """Yield (epoch, index array) over a shuffled dataset; fractional epochs allowed."""
    total = int(round(epochs * n))
    done = 0
    ep = 0
    while done < total:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if done >= total:
                return
            idx = order[start:start + batch_size][: total - done]
            done += idx.size
            yield ep, idx
        ep += 1


def _l1(pred, target):
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


@dataclass
class TrainingData:
    """Everything needed to emulate and reconstruct training measurements.

    ``sm_data`` generates measurements, ``sm_recon`` is the model used for
    reconstruction (they differ to avoid an inverse crime).
    """

    sm_data: SystemMatrix
    sm_recon: SystemMatrix
    images: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.eig = NormalEig(self.sm_recon.stacked)
        self.pinv = TruncatedPinv(self.sm_recon.stacked, 1e-3)

    def emulate(self, idx, snr_db, rng):
        X = self.images[idx].reshape(len(idx), -1)
        Y, std = emulate_batch(self.sm_data.stacked, X, snr_db, rng)
        return X, Y, std

    def problem(self, Y, std, eps=None):
        return DeqProblem.from_sm(self.sm_recon, Y, noise_std=std, eps=eps, eig=self.eig)


def _validate(data_val: TrainingData | None, infer, snr_db, seed):
    if data_val is None:
        return None
    rng = np.random.default_rng(seed)
    idx = np.arange(len(data_val.images))
    X, Y, std = data_val.emulate(idx, snr_db, rng)
    out = infer(data_val.problem(Y, std), data_val)
    return float(np.mean([psnr(o, x) for o, x in zip(out, X)]))


# ---------------------------------------------------------------- pretraining

def pretrain_rdn(images, sigma1, cfg: TrainConfig = TrainConfig(), rdn: RdnConfig = RdnConfig(),
                 init: ParamStore | None = None, log=None, backend=None):
    """Fit the RDN as a denoiser of images corrupted by N(0, sigma1^2) noise (l1 loss)."""
    cfg.validate()
    if sigma1 < 0:
        raise ConfigError("sigma1 must be nonnegative")
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else init_rdn(rdn, seed=cfg.seed)
    opt = Adam(cfg.lr, cfg.betas)
    log = log or JsonLog(keep=False)
    losses, cur = [], None
    for ep, idx in _batches(len(images), cfg.batch_size, cfg.epochs, rng):
        if cur is not None and ep != cur:
            log(stage="pretrain-rdn", epoch=cur, loss=float(np.mean(losses)))
            losses = []
        cur = ep
        xt = images[idx]
        xn = xt + sigma1 * rng.standard_normal(xt.shape)
        out, cache = rdn_forward(xn, params, rdn, with_cache=True, backend=backend)
        loss, g = _l1(out, xt)
        _, grads = rdn_vjp(g, cache, params, rdn, backend=backend)
        opt.step(params, grads)
        losses.append(loss)
    if losses:
        log(stage="pretrain-rdn", epoch=cur, loss=float(np.mean(losses)))
    return params


def lc_pretrain_pairs(data: TrainingData, idx, snr_db, sigma2, sigma3, rng, scale=1.0):
    """Whitened clean data with two noisy copies (y_n, v_n).

    The noise std is sigma times the RMS of the whitened clean data, so the
    sigmas are relative to the signal level. Everything is multiplied by
    ``scale`` (the iteration's data units).
    """
    X = data.images[idx].reshape(len(idx), -1)
    clean = X @ data.sm_data.stacked.T
    norms = np.linalg.norm(clean, axis=1)
    std = norms / 10 ** (snr_db / 20) / np.sqrt(clean.shape[1])
    yw = (X @ data.sm_recon.stacked.T) * (scale / std)[:, None]
    rms = np.sqrt(np.mean(yw * yw, axis=1, keepdims=True))
    yn = yw + sigma2 * rms * rng.standard_normal(yw.shape)
    vn = yw + sigma3 * rms * rng.standard_normal(yw.shape)
    return yn, vn


def pretrain_lc(data: TrainingData, sigma2, sigma3, eps=None, cfg: TrainConfig = TrainConfig(),
                lc: LcConfig = LcConfig(), init: ParamStore | None = None, log=None, backend=None,
                data_scale=DATA_SCALE):
    """Fit LC to mimic the eps-ball projection on noisy data pairs (l1 loss).

    ``eps`` is in unit-noise units (default sqrt(2M)); it is scaled by
    ``data_scale`` along with the data.
    """
    cfg.validate()
    if sigma2 < 0 or sigma3 < 0:
        raise ConfigError("sigma2 and sigma3 must be nonnegative")
    rng = np.random.default_rng(cfg.seed)
    layout = DataLayout.of(data.sm_recon)
    eps = np.sqrt(data.sm_recon.stacked.shape[0]) if eps is None else eps
    eps = eps * data_scale
    params = init.copy() if init is not None else init_lc(lc, seed=cfg.seed + 1)
    opt = Adam(cfg.lr, cfg.betas)
    log = log or JsonLog(keep=False)
    losses, cur = [], None
    for ep, idx in _batches(len(data.images), cfg.batch_size, cfg.epochs, rng):
        if cur is not None and ep != cur:
            log(stage="pretrain-lc", epoch=cur, loss=float(np.mean(losses)))
            losses = []
        cur = ep
        yn, vn = lc_pretrain_pairs(data, idx, cfg.snr_db, sigma2, sigma3, rng, data_scale)
        target, _ = ball_project(vn, yn, eps)
        out, cache = lc_forward(vn, yn, eps, params, lc, layout, with_cache=True, backend=backend)
        loss, g = _l1(out, target)
        _, _, grads = lc_vjp(g, cache, params, lc, layout, backend=backend)
        opt.step(params, grads)
        losses.append(loss)
    if losses:
        log(stage="pretrain-lc", epoch=cur, loss=float(np.mean(losses)))
    return params


# ---------------------------------------------------------------- DEQ training

def deq_batch_infer(prob: DeqProblem, model: DeqModel, cfg: AndersonConfig, pinv=None, backend=None):
    _normalize_eps(prob, model.data_scale)
    res = deq_solve(prob, model, cfg, on_nan="mask", pinv=pinv, backend=backend)
    return np.maximum(prob.split(res.x)[0], 0.0), res


def train_deq(data: TrainingData, model: DeqModel, cfg: TrainConfig = TrainConfig(),
              anderson: AndersonConfig = AndersonConfig(), val: TrainingData | None = None,
              log=None, backend=None):
    """Train through the fixed point with implicit differentiation.

    Per batch: emulate measurements at ``cfg.snr_db``, solve the fixed point,
    apply h once more to get the differentiable output, take an l1 loss on
    its image component, solve the adjoint fixed point and step ADAM.
    Samples whose forward or backward solve diverges are skipped and counted.
    """
    cfg.validate()
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr, cfg.betas)
    log = log or JsonLog(keep=False)
    stage = "train-deq" if model.mode == "lc" else "train-deq-nolc"
    stats = _EpochStats()
    for ep, idx in _batches(len(data.images), cfg.batch_size, cfg.epochs, rng):
        if stats.epoch is not None and ep != stats.epoch:
            _end_epoch(log, stage, stats, val, model, anderson, cfg, backend)
        stats.epoch = ep
        X, Y, std = data.emulate(idx, cfg.snr_db, rng)
        prob = _normalize_eps(data.problem(Y, std, cfg.eps), model.data_scale)
        res = deq_solve(prob, model, anderson, on_nan="mask", pinv=data.pinv, backend=backend)
        ok = ~res.diverged
        stats.diverged += int((~ok).sum())
        stats.unconverged += int((~res.converged & ok).sum())
        if not ok.any():
            continue
        keep = np.flatnonzero(ok)
        sub = prob.subset(keep)
        star = res.x[keep]
        out = h_theta(star, sub, model, backend=backend)
        loss, gx = _l1(sub.split(out)[0], X[keep])
        b = np.zeros_like(star)
        b[:, :sub.n] = gx
        grads, bres = implicit_backward(star, sub, model, b, anderson, backend=backend, on_nan="mask")
        if bres.diverged.any():
            stats.diverged += int(bres.diverged.sum())
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            stats.diverged += len(keep)
            continue
        opt.step(model.params, grads)
        stats.add(loss, len(keep), res.iters[keep])
    if stats.epoch is not None:
        _end_epoch(log, stage, stats, val, model, anderson, cfg, backend)
    return model


@dataclass
class _EpochStats:
    epoch: int | None = None
    loss_sum: float = 0.0
    count: int = 0
    diverged: int = 0
    unconverged: int = 0
    iters: list = field(default_factory=list)

    def add(self, loss, n, iters):
        self.loss_sum += loss * n
        self.count += n
        self.iters.extend(int(i) for i in iters)

    def reset(self):
        self.loss_sum, self.count, self.diverged, self.unconverged, self.iters = 0.0, 0, 0, 0, []


def _end_epoch(log, stage, stats, val, model, anderson, cfg, backend):
    def infer(prob, d):
        return deq_batch_infer(prob, model, anderson, pinv=d.pinv, backend=backend)[0]

    rec = dict(stage=stage, epoch=stats.epoch,
               loss=stats.loss_sum / max(stats.count, 1), samples=stats.count,
               skipped=stats.diverged, unconverged=stats.unconverged,
               mean_iters=float(np.mean(stats.iters)) if stats.iters else None)
    vp = _validate(val, infer, cfg.snr_db, cfg.seed + 7919)
    if vp is not None:
        rec["val_psnr"] = vp
    log(**rec)
    stats.reset()


# ---------------------------------------------------------------- unrolled and end-to-end

def unrolled_forward(prob: DeqProblem, model: DeqModel, n_it, with_caches=False, pinv=None,
                     backend=None):
    """``n_it`` applications of h from the least-squares start."""
    state = prob.init_state(pinv=pinv)
    caches = []
    for _ in range(n_it):
        if with_caches:
            nxt, cache = h_theta(state, prob, model, with_cache=True, backend=backend)
            caches.append(cache)
            state = nxt
        else:
            state = h_theta(state, prob, model, backend=backend)
    return (state, caches) if with_caches else state


def unrolled_infer(sm, y, model: DeqModel, n_it=5, *, noise_std=None, eps=None, backend=None):
    single = np.ndim(y) == 1
    prob = _normalize_eps(DeqProblem.from_sm(sm, y, noise_std=noise_std, eps=eps), model.data_scale)
    state = unrolled_forward(prob, model, n_it, backend=backend)
    x = np.maximum(prob.split(state)[0], 0.0).reshape((-1,) + tuple(sm.grid))
    return x[0] if single else x


def train_unrolled(data: TrainingData, model: DeqModel, n_it=5, cfg: TrainConfig = TrainConfig(),
                   val: TrainingData | None = None, log=None, backend=None):
    """Backpropagate through ``n_it`` unrolled iterations (no implicit step)."""
    cfg.validate()
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr, cfg.betas)
    log = log or JsonLog(keep=False)
    stats = _EpochStats()

    def infer(prob, d):
        _normalize_eps(prob, model.data_scale)
        return np.maximum(prob.split(unrolled_forward(prob, model, n_it, pinv=d.pinv,
                                                      backend=backend))[0], 0.0)

    def end():
        rec = dict(stage="train-unrolled", epoch=stats.epoch, loss=stats.loss_sum / max(stats.count, 1),
                   samples=stats.count)
        vp = _validate(val, infer, cfg.snr_db, cfg.seed + 7919)
        if vp is not None:
            rec["val_psnr"] = vp
        log(**rec)
        stats.reset()

    for ep, idx in _batches(len(data.images), cfg.batch_size, cfg.epochs, rng):
        if stats.epoch is not None and ep != stats.epoch:
            end()
        stats.epoch = ep
        X, Y, std = data.emulate(idx, cfg.snr_db, rng)
        prob = _normalize_eps(data.problem(Y, std, cfg.eps), model.data_scale)
        state, caches = unrolled_forward(prob, model, n_it, with_caches=True, pinv=data.pinv,
                                         backend=backend)
        loss, gx = _l1(prob.split(state)[0], X)
        g = np.zeros_like(state)
        g[:, :prob.n] = gx
        total = {}
        for cache in reversed(caches):
            g, grads = h_theta_vjp(g, cache, prob, model, backend=backend)
            for k, v in grads.items():
                total[k] = total[k] + v if k in total else v
        opt.step(model.params, total)
        stats.add(loss, len(idx), [n_it] * len(idx))
    if stats.epoch is not None:
        end()
    return model


def e2e_infer(sm, y, params: ParamStore, rdn: RdnConfig, *, pinv=None, backend=None):
    """End-to-end baseline: RDN applied to the least-squares image."""
    single = np.ndim(y) == 1
    Y = np.atleast_2d(y)
    pinv = TruncatedPinv(sm.stacked, 1e-3) if pinv is None else pinv
    xls = pinv(Y).reshape((-1,) + tuple(sm.grid))
    out = rdn_forward(xls, params, rdn, backend=backend)
    return out[0] if single else out


def train_end2end(data: TrainingData, cfg: TrainConfig = TrainConfig(), rdn: RdnConfig = RdnConfig(),
                  init: ParamStore | None = None, val: TrainingData | None = None, log=None,
                  backend=None):
    """Supervised RDN mapping the least-squares image to the ground truth."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else init_rdn(rdn, seed=cfg.seed)
    opt = Adam(cfg.lr, cfg.betas)
    log = log or JsonLog(keep=False)
    stats = _EpochStats()
    grid = tuple(data.sm_recon.grid)

    def infer(prob, d):
        xls = d.pinv(prob.y / prob.c[:, None]).reshape((-1,) + grid)
        return rdn_forward(xls, params, rdn, backend=backend).reshape(len(xls), -1)

    def end():
        rec = dict(stage="train-e2e", epoch=stats.epoch, loss=stats.loss_sum / max(stats.count, 1),
                   samples=stats.count)
        vp = _validate(val, infer, cfg.snr_db, cfg.seed + 7919)
        if vp is not None:
            rec["val_psnr"] = vp
        log(**rec)
        stats.reset()

    for ep, idx in _batches(len(data.images), cfg.batch_size, cfg.epochs, rng):
        if stats.epoch is not None and ep != stats.epoch:
            end()
        stats.epoch = ep
        X, Y, _ = data.emulate(idx, cfg.snr_db, rng)
        xls = data.pinv(Y).reshape((-1,) + grid)
        out, cache = rdn_forward(xls, params, rdn, with_cache=True, backend=backend)
        loss, g = _l1(out.reshape(len(idx), -1), X)
        _, grads = rdn_vjp(g, cache, params, rdn, backend=backend)
        opt.step(params, grads)
        stats.add(loss, len(idx), [])
    if stats.epoch is not None:
        end()
    return params


def stdout_log():
    return JsonLog(stream=sys.stdout, keep=True)
