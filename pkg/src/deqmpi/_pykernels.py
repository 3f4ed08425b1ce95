"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``DEQMPI_PURE_PYTHON=1`` is set. Signatures match the compiled module.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, kh, kw):
    b, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (B, C, H, W, kh, kw) -> (B*H*W, C*kh*kw)
    return cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * kh * kw)


def conv2d_forward(x, w, b):
    bsz, _, h, wd = x.shape
    o, c, kh, kw = w.shape
    cols = _im2col(x, kh, kw)
    out = cols @ w.reshape(o, c * kh * kw).T
    out += b
    return np.ascontiguousarray(out.reshape(bsz, h, wd, o).transpose(0, 3, 1, 2))


def conv2d_backward_input(g, w):
    # SAME padding with odd kernels: the adjoint is a correlation with the
    # flipped, channel-transposed kernel.
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return conv2d_forward(g, wt, np.zeros(wt.shape[0]))


def conv2d_backward_weight(x, g, kh, kw):
    o = g.shape[1]
    c = x.shape[1]
    cols = _im2col(x, kh, kw)
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return (gm.T @ cols).reshape(o, c, kh, kw)


def kaczmarz_sweeps(A, y, x, v, lam, n_sweeps, nonneg):
    """Regularized Kaczmarz on the augmented system [A, sqrt(lam) I]."""
    sq = np.sqrt(lam)
    norms = np.einsum("ij,ij->i", A, A)
    for _ in range(n_sweeps):
        for i in range(A.shape[0]):
            if norms[i] == 0.0:
                continue
            a = A[i]
            alpha = (y[i] - a @ x - sq * v[i]) / (norms[i] + lam)
            x += alpha * a
            v[i] += alpha * sq
        if nonneg:
            np.maximum(x, 0.0, out=x)
    return x


def _grad(x):
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:, :-1] = x[:, 1:] - x[:, :-1]
    gy[:-1, :] = x[1:, :] - x[:-1, :]
    return gx, gy


def _tv(x):
    gx, gy = _grad(x)
    return np.sqrt(gx * gx + gy * gy).sum()


def tv_prox(v, tau, n_iters, step, objective):
    """Dual projected gradient for isotropic TV, keeping the best primal iterate.

    ``objective`` is a list that receives the best-so-far objective after each
    iteration (pass ``None`` to skip).
    """
    px = np.zeros_like(v)
    py = np.zeros_like(v)
    x = v.copy()
    best = x
    best_obj = tau * _tv(v)
    t = step / tau
    for _ in range(n_iters):
        gx, gy = _grad(x)
        px += t * gx
        py += t * gy
        nrm = np.maximum(np.sqrt(px * px + py * py), 1.0)
        px /= nrm
        py /= nrm
        x = v + tau * _div(px, py)
        obj = tau * _tv(x) + 0.5 * np.sum((x - v) ** 2)
        if obj < best_obj:
            best_obj = obj
            best = x
        if objective is not None:
            objective.append(best_obj)
    return best


def _div(px, py):
    h, w = px.shape
    d = np.zeros_like(px)
    if w > 1:
        d[:, 0] = px[:, 0]
        d[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
        d[:, -1] = -px[:, -2]
    if h > 1:
        d[0, :] += py[0, :]
        d[1:-1, :] += py[1:-1, :] - py[:-2, :]
        d[-1, :] += -py[-2, :]
    return d
