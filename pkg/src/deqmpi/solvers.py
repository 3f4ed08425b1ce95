"""Hand-crafted-prior baselines: constrained ADMM (l1 / TV / hybrid) and ART.

ADMM solves  min R(x)  s.t.  ||Ax - y|| <= eps,  x >= 0  with the splitting
z0 = Ax, z1 = x. Inputs are expected in whitened units (unit noise std), in
which case ``eps = sqrt(len(y))`` is the natural bound. Batches of
measurements with per-sample whitening scales are supported throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import ConfigError, ShapeError
from .forward import Measurement, SystemMatrix
from .linalg import CholeskyFactor, NormalEig

REGULARIZERS = ("l1", "tv", "hybrid", "none")

TV_STEP = 0.249


def proj_l2_ball(v, y, eps):
    """Project ``v`` onto the closed ball of radius ``eps`` around ``y``.

    Works row-wise on batches; ``eps`` may be a scalar or one value per row.
    """
    v = np.asarray(v, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if v.shape != y.shape:
        raise ShapeError(f"proj_l2_ball: v {v.shape} and y {y.shape} differ")
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("eps must be nonnegative")
    r = v - y
    nrm = np.linalg.norm(r, axis=-1, keepdims=True)
    eps_k = eps[..., None] if eps.ndim else eps
    # shrink only rows that lie outside the ball
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(nrm > eps_k, eps_k / nrm, 1.0)
    return y + r * factor


def prox_l1(v, tau, nonneg=False):
    """Soft threshold, optionally followed by a clamp to the nonnegative orthant."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    out = v.copy() if tau == 0 else np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)
    if nonneg:
        np.maximum(out, 0.0, out=out)
    return out


def tv_value(img):
    """Isotropic total variation with forward differences."""
    img = np.asarray(img, dtype=np.float64)
    gx = np.diff(img, axis=1, append=img[:, -1:])
    gy = np.diff(img, axis=0, append=img[-1:, :])
    return float(np.sqrt(gx * gx + gy * gy).sum())


def prox_tv(v, tau, inner_iters=20, step=TV_STEP, objective=None, backend=None):
    """Isotropic TV prox of a 2-D image by projected dual gradient steps.

    The returned iterate is the best one seen, so the objective
    ``tau*TV(x) + 0.5*||x - v||^2`` never increases across iterations. Pass a
    list as ``objective`` to collect its best-so-far value per iteration.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"prox_tv expects a 2-D image, got shape {v.shape}")
    if tau == 0 or inner_iters == 0:
        return v.copy()
    kern = _backend.get(backend)
    return kern.tv_prox(np.ascontiguousarray(v), float(tau), int(inner_iters), float(step), objective)


def prox_hybrid(v, tau, alpha1, inner_iters=20, nonneg=True, backend=None):
    """l1 prox with weight alpha1*tau, then TV prox with (1-alpha1)*tau."""
    out = prox_l1(v, alpha1 * tau, nonneg=False)
    out = prox_tv(out, (1.0 - alpha1) * tau, inner_iters, backend=backend)
    if nonneg:
        np.maximum(out, 0.0, out=out)
    return out


@dataclass(frozen=True)
class AdmmConfig:
    regularizer: str = "l1"
    mu: float = 250.0
    alpha1: float = 1.0
    epsilon: float | None = None  # None: sqrt of the stacked data length
    n_iters: int = 200
    tv_inner_iters: int = 20
    nonneg: bool = True

    def validate(self):
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if not self.mu > 0:
            raise ConfigError(f"mu must be positive, got {self.mu}")
        if not 0.0 <= self.alpha1 <= 1.0:
            raise ConfigError(f"alpha1 must lie in [0, 1], got {self.alpha1}")
        if self.epsilon is not None and self.epsilon < 0:
            raise ConfigError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.n_iters < 0 or self.tv_inner_iters < 0:
            raise ConfigError("iteration counts must be nonnegative")
        return self

    @property
    def tau(self):
        return 1.0 / self.mu


def hybrid_alpha1(snr_db):
    """Cross-validated l1 weight of the hybrid prior per SNR band."""
    if snr_db < 20:
        return 0.1
    if snr_db < 30:
        return 0.8
    return 0.9


def art_lambda(snr_db):
    if snr_db < 15:
        return 10.0
    if snr_db < 35:
        return 1.0
    return 0.1


def admm_preset(name, snr_db=35.0):
    """Published ADMM settings by preset name ('paper-l1', 'paper-tv', 'paper-hyb')."""
    if name == "paper-l1":
        return AdmmConfig("l1", mu=250.0, alpha1=1.0, n_iters=200)
    if name == "paper-tv":
        return AdmmConfig("tv", mu=50.0, alpha1=0.0, n_iters=100)
    if name == "paper-hyb":
        return AdmmConfig("hybrid", mu=10.0, alpha1=hybrid_alpha1(snr_db), n_iters=100)
    raise ConfigError(f"unknown ADMM preset {name!r}")


@dataclass
class AdmmState:
    x: np.ndarray
    z0: np.ndarray
    z1: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    iter: int = 0
    history: list = field(default_factory=list)


def _unpack(sm, y):
    A = sm.stacked if isinstance(sm, SystemMatrix) else np.asarray(sm, dtype=np.float64)
    grid = sm.grid if isinstance(sm, SystemMatrix) else None
    data = y.data if isinstance(y, Measurement) else y
    data = np.asarray(data, dtype=np.float64)
    if data.shape[-1] != A.shape[0]:
        raise ShapeError(f"measurement length {data.shape[-1]} does not match {A.shape[0]} matrix rows")
    return A, grid, data


def _scales(noise_std, batch_shape):
    if noise_std is None:
        return np.ones(batch_shape) if batch_shape else 1.0
    s = 1.0 / np.asarray(noise_std, dtype=np.float64)
    return np.broadcast_to(s, batch_shape).copy() if batch_shape else float(s)


def _apply_prior(v, cfg, grid, backend):
    tau = cfg.tau
    if cfg.regularizer == "none":
        return np.maximum(v, 0.0) if cfg.nonneg else v.copy()
    if cfg.regularizer == "l1":
        return prox_l1(v, tau, nonneg=cfg.nonneg)
    if grid is None:
        raise ShapeError("TV priors need the image grid; pass a SystemMatrix")
    flat = v.reshape(-1, grid[0] * grid[1])
    out = np.empty_like(flat)
    for i, img in enumerate(flat):
        img = img.reshape(grid)
        if cfg.regularizer == "tv":
            r = prox_tv(img, tau, cfg.tv_inner_iters, backend=backend)
            if cfg.nonneg:
                np.maximum(r, 0.0, out=r)
        else:
            r = prox_hybrid(img, tau, cfg.alpha1, cfg.tv_inner_iters, cfg.nonneg, backend)
        out[i] = r.ravel()
    return out.reshape(v.shape)


def admm_reconstruct(sm, y, cfg: AdmmConfig = AdmmConfig(), *, noise_std=None,
                     state: AdmmState | None = None, callback=None, backend=None,
                     return_state=False):
    """Run exactly ``cfg.n_iters`` ADMM iterations.

    ``y`` may hold one measurement (2M,) or a batch (B, 2M). If ``noise_std``
    is given, each sample is whitened by it before solving; otherwise the
    inputs are taken as already whitened. Returns the nonnegative image(s),
    shaped to the grid when ``sm`` is a SystemMatrix, plus the final state
    when ``return_state`` is set. ``state.history`` records the primal
    residuals ``||z0 - A x||`` and ``||z1 - x||`` per iteration.
    """
    cfg.validate()
    A, grid, data = _unpack(sm, y)
    batch_shape = data.shape[:-1]
    c = _scales(noise_std, batch_shape)
    cc = c[..., None] if batch_shape else c
    yw = data * cc
    eps = cfg.epsilon if cfg.epsilon is not None else np.sqrt(A.shape[0])

    if batch_shape:
        eig = NormalEig(A)

        def solve(rhs):
            return eig.solve(rhs, c)
    else:
        chol = CholeskyFactor.of_normal(A, c)
        solve = chol.solve

    n = A.shape[1]
    if state is None:
        state = AdmmState(
            x=np.zeros(batch_shape + (n,)), z0=np.zeros_like(yw), z1=np.zeros(batch_shape + (n,)),
            d0=np.zeros_like(yw), d1=np.zeros(batch_shape + (n,)))
    x, d0, d1 = state.x.copy(), state.d0.copy(), state.d1.copy()
    z0, z1 = state.z0.copy(), state.z1.copy()
    for _ in range(cfg.n_iters):
        ax = (x @ A.T) * cc
        z0 = proj_l2_ball(ax - d0, yw, eps)
        z1 = _apply_prior(x - d1, cfg, grid, backend)
        x = solve(((z0 + d0) @ A) * cc + z1 + d1)
        ax = (x @ A.T) * cc
        d0 = d0 + z0 - ax
        d1 = d1 + z1 - x
        state.iter += 1
        state.history.append({
            "iter": state.iter,
            "r0": np.linalg.norm(z0 - ax, axis=-1),
            "r1": np.linalg.norm(z1 - x, axis=-1),
        })
        state.x, state.z0, state.z1, state.d0, state.d1 = x, z0, z1, d0, d1
        if callback is not None:
            callback(state)
    state.x, state.z0, state.z1, state.d0, state.d1 = x, z0, z1, d0, d1
    out = np.maximum(x, 0.0)
    if grid is not None:
        out = out.reshape(batch_shape + tuple(grid))
    return (out, state) if return_state else out


def art_reconstruct(sm, y, lam=1.0, n_iters=10, *, noise_std=None, lam_scale="trace",
                    nonneg=True, backend=None):
    """Tikhonov-regularized Kaczmarz (ART) with a nonnegativity clamp per sweep.

    Rows are visited in stacked order. With ``lam_scale='trace'`` the
    regularization weight is ``lam * ||A||_F^2 / N`` (in whitened units), so
    ``lam`` is relative to the mean curvature of the data term and the
    result does not depend on the overall scale of A and y.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if lam_scale not in ("trace", "none"):
        raise ConfigError(f"lam_scale must be 'trace' or 'none', got {lam_scale!r}")
    A, grid, data = _unpack(sm, y)
    batch_shape = data.shape[:-1]
    c = np.broadcast_to(_scales(noise_std, batch_shape), batch_shape)
    kern = _backend.get(backend)
    rows = data.reshape(-1, A.shape[0])
    scales = np.asarray(c, dtype=np.float64).reshape(-1)
    out = np.empty((rows.shape[0], A.shape[1]))
    for i, (yi, ci) in enumerate(zip(rows, scales)):
        Aw = A * ci
        lam_eff = lam * (np.einsum("ij,ij->", Aw, Aw) / A.shape[1] if lam_scale == "trace" else 1.0)
        x = np.zeros(A.shape[1])
        v = np.zeros(A.shape[0])
        out[i] = kern.kaczmarz_sweeps(Aw, yi * ci, x, v, float(lam_eff), int(n_iters), bool(nonneg))
    out = out.reshape(batch_shape + (A.shape[1],))
    if grid is not None:
        out = out.reshape(batch_shape + tuple(grid))
    return out


def art_preset(snr_db=35.0):
    return {"lam": art_lambda(snr_db), "n_iters": 10}


__all__ = [
    "AdmmConfig", "AdmmState", "admm_preset", "admm_reconstruct", "art_lambda", "art_preset",
    "art_reconstruct", "hybrid_alpha1", "proj_l2_ball", "prox_hybrid", "prox_l1", "prox_tv",
    "tv_value",
]
