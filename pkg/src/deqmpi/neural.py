"""Minimal reverse-mode tensor stack and the two network blocks.

Tensors are plain float64 arrays laid out (batch, channels, h, w). Every
forward primitive has a matching ``*_vjp`` that maps an upstream gradient to
input and parameter gradients. The networks keep what their backward pass
needs in an explicit cache instead of a tape.

RDN: a residual dense network used as the learned image prior.
LC: a small 1-D convolutional module over the (frequency, angle) data layout
followed by an eps-ball projection around the measured data.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import ConfigError, ShapeError


# ---------------------------------------------------------------- primitives

def conv2d_fwd(x, w, b, backend=None):
    """SAME-padded, stride-1 cross-correlation. x (B,C,H,W), w (O,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ShapeError("conv2d kernels must have odd size")
    return _backend.get(backend).conv2d_forward(x, w, b)


def conv2d_vjp(g, x, w, backend=None):
    """Gradients (dx, dw, db) of conv2d_fwd for upstream ``g``."""
    kern = _backend.get(backend)
    dx = kern.conv2d_backward_input(g, w)
    dw = kern.conv2d_backward_weight(x, g, w.shape[2], w.shape[3])
    db = g.sum(axis=(0, 2, 3))
    return dx, dw, db


def conv1d_fwd(x, w, b, backend=None):
    """Convolution along axis 2 only. x (B,C,F,P), w (O,C,K)."""
    if w.ndim != 3:
        raise ShapeError(f"conv1d weight must be (O,C,K), got {w.shape}")
    return conv2d_fwd(x, w[:, :, :, None], b, backend)


def conv1d_vjp(g, x, w, backend=None):
    dx, dw, db = conv2d_vjp(g, x, w[:, :, :, None], backend)
    return dx, dw[:, :, :, 0], db


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_vjp(g, x):
    # subgradient 0 at 0
    return g * (x > 0)


def concat_fwd(xs):
    return np.concatenate(xs, axis=1)


def concat_vjp(g, sizes):
    return np.split(g, np.cumsum(sizes)[:-1], axis=1)


def add_fwd(a, b):
    return a + b


def add_vjp(g):
    return g, g


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Ordered named parameter arrays with matching gradient slots."""

    def __init__(self, values=None):
        self.values = OrderedDict()
        self.grads = OrderedDict()
        for k, v in (values or {}).items():
            self[k] = v

    def __setitem__(self, name, value):
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self):
        return list(self.values)

    def items(self):
        return self.values.items()

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, grads):
        for k, g in grads.items():
            self.grads[k] += g

    def copy(self):
        return ParamStore({k: v.copy() for k, v in self.values.items()})

    def merged(self, other):
        out = self.copy()
        for k, v in other.items():
            if k in out:
                raise ConfigError(f"duplicate parameter name {k!r}")
            out[k] = v.copy()
        return out

    def subset(self, prefix):
        return ParamStore({k: v.copy() for k, v in self.values.items() if k.startswith(prefix)})

    def size(self):
        return sum(v.size for v in self.values.values())

    def to_vector(self):
        return np.concatenate([v.ravel() for v in self.values.values()]) if self.values else np.zeros(0)

    def from_vector(self, vec):
        out = ParamStore()
        pos = 0
        for k, v in self.values.items():
            out[k] = vec[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        return out

    def zeroed(self):
        return ParamStore({k: np.zeros_like(v) for k, v in self.values.items()})


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: ParamStore, grads=None):
        grads = params.grads if grads is None else grads
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params.values[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _he_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- RDN

@dataclass(frozen=True)
class RdnConfig:
    n_res: int = 4
    f_r: int = 12
    n_conv: int = 12
    f_s: int = 12
    kernel: int = 3

    def validate(self):
        for k in ("n_res", "f_r", "n_conv", "f_s", "kernel"):
            if getattr(self, k) < 1:
                raise ConfigError(f"RdnConfig.{k} must be >= 1")
        if self.kernel % 2 == 0:
            raise ConfigError("RdnConfig.kernel must be odd")
        return self


def rdn_shapes(cfg: RdnConfig, prefix="rdn."):
    k, fr, fs = cfg.kernel, cfg.f_r, cfg.f_s
    shapes = OrderedDict()
    shapes[prefix + "z0a"] = (fr, 1, k, k)
    shapes[prefix + "z0b"] = (fr, fr, k, k)
    for m in range(cfg.n_res):
        for l in range(cfg.n_conv):
            shapes[f"{prefix}m{m}.l{l}"] = (fs, fr + l * fs, k, k)
        shapes[f"{prefix}m{m}.out"] = (fr, fr + cfg.n_conv * fs, 1, 1)
    shapes[prefix + "fuse"] = (fr, cfg.n_res * fr, 1, 1)
    shapes[prefix + "out"] = (1, fr, k, k)
    return shapes


def init_rdn(cfg: RdnConfig = RdnConfig(), seed=0, prefix="rdn.", zero=False):
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = ParamStore()
    for name, shape in rdn_shapes(cfg, prefix).items():
        # the output conv starts at zero so a fresh RDN is ReLU(v)
        start_zero = zero or name == prefix + "out"
        p[name + ".w"] = np.zeros(shape) if start_zero else _he_uniform(rng, shape)
        p[name + ".b"] = np.zeros(shape[0])
    return p


def _as_images(v, grid):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 4:
        return v
    if v.ndim == 2 and grid is not None and v.shape[1] == grid[0] * grid[1]:
        return v.reshape(v.shape[0], 1, grid[0], grid[1])
    if v.ndim == 3:
        return v[:, None]
    raise ShapeError(f"cannot interpret {v.shape} as a batch of images")


def rdn_forward(v, params: ParamStore, cfg: RdnConfig = RdnConfig(), grid=None,
                prefix="rdn.", backend=None, with_cache=False):
    """Apply the RDN to images ``v`` of shape (B,H,W), (B,1,H,W) or (B,N) with ``grid``.

    Returns an array shaped like ``v`` (and the cache for ``rdn_vjp``).
    """
    shape_in = np.shape(v)
    x = _as_images(v, grid)
    P = params.values

    def conv(name, inp):
        return conv2d_fwd(inp, P[name + ".w"], P[name + ".b"], backend)

    a0 = conv(prefix + "z0a", x)
    h0 = relu_fwd(a0)
    u = conv(prefix + "z0b", h0)
    mods = []
    outs = []
    for m in range(cfg.n_res):
        feats = [u]
        pres = []
        for l in range(cfg.n_conv):
            pre = conv(f"{prefix}m{m}.l{l}", concat_fwd(feats))
            pres.append(pre)
            feats.append(relu_fwd(pre))
        u = conv(f"{prefix}m{m}.out", concat_fwd(feats)) + feats[0]
        mods.append((feats, pres))
        outs.append(u)
    fuse = conv(prefix + "fuse", concat_fwd(outs))
    pre_out = conv(prefix + "out", fuse) + x
    out = relu_fwd(pre_out).reshape(shape_in)
    if not with_cache:
        return out
    cache = dict(x=x, a0=a0, h0=h0, mods=mods, outs=outs, fuse=fuse, pre_out=pre_out, shape_in=shape_in)
    return out, cache


def rdn_vjp(g, cache, params: ParamStore, cfg: RdnConfig = RdnConfig(), prefix="rdn.",
            backend=None, need_params=True):
    """Backpropagate ``g`` through the RDN. Returns (grad wrt input, param grads dict)."""
    P = params.values
    grads = {}

    def back(name, gout, inp):
        dx, dw, db = conv2d_vjp(gout, inp, P[name + ".w"], backend) if need_params else (
            _backend.get(backend).conv2d_backward_input(gout, P[name + ".w"]), None, None)
        if need_params:
            grads[name + ".w"] = dw
            grads[name + ".b"] = db
        return dx

    x = cache["x"]
    g = np.asarray(g, dtype=np.float64).reshape(x.shape)
    g_pre = relu_vjp(g, cache["pre_out"])
    gx = g_pre.copy()
    g_fuse = back(prefix + "out", g_pre, cache["fuse"])
    sizes = [cfg.f_r] * cfg.n_res
    g_outs = concat_vjp(back(prefix + "fuse", g_fuse, concat_fwd(cache["outs"])), sizes)
    g_u = None
    for m in reversed(range(cfg.n_res)):
        feats, pres = cache["mods"][m]
        g_m = g_outs[m] if g_u is None else g_outs[m] + g_u
        sizes = [cfg.f_r] + [cfg.f_s] * cfg.n_conv
        g_feats = list(concat_vjp(back(f"{prefix}m{m}.out", g_m, concat_fwd(feats)), sizes))
        g_feats[0] = g_feats[0] + g_m  # residual path
        for l in reversed(range(cfg.n_conv)):
            g_p = relu_vjp(g_feats[l + 1], pres[l])
            parts = concat_vjp(back(f"{prefix}m{m}.l{l}", g_p, concat_fwd(feats[:l + 1])), sizes[:l + 1])
            for j, gp in enumerate(parts):
                g_feats[j] = g_feats[j] + gp
        g_u = g_feats[0]
    g_h0 = back(prefix + "z0b", g_u, cache["h0"])
    gx += back(prefix + "z0a", relu_vjp(g_h0, cache["a0"]), x)
    return gx.reshape(cache["shape_in"]), grads


# ---------------------------------------------------------------- LC

@dataclass(frozen=True)
class LcConfig:
    n_lc: int = 1
    f_lc: int = 8
    kernel: int = 5

    def validate(self):
        if self.n_lc < 0 or self.f_lc < 1:
            raise ConfigError("LcConfig needs n_lc >= 0 and f_lc >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("LcConfig.kernel must be a positive odd length")
        return self


@dataclass(frozen=True)
class DataLayout:
    """Where each complex data row sits in the (n_freq, n_angles) grid."""

    data_shape: tuple
    data_index: np.ndarray

    @classmethod
    def of(cls, sm):
        return cls(tuple(sm.data_shape), np.asarray(sm.data_index))

    @property
    def n_rows(self):
        return len(self.data_index)

    def scatter(self, v, y):
        """Stacked (B,2M) pair -> (B,4,F,P) channels [Re v, Im v, Re y, Im y]."""
        b = v.shape[0]
        m = self.n_rows
        F, P = self.data_shape
        grid = np.zeros((b, 4, F * P))
        grid[:, 0, self.data_index] = v[:, :m]
        grid[:, 1, self.data_index] = v[:, m:]
        grid[:, 2, self.data_index] = y[:, :m]
        grid[:, 3, self.data_index] = y[:, m:]
        return grid.reshape(b, 4, F, P)

    def gather(self, g):
        """(B,C,F,P) -> (B, C*M) stacking channel blocks, inverse of scatter per channel."""
        b, c = g.shape[:2]
        flat = g.reshape(b, c, -1)[:, :, self.data_index]
        return flat.reshape(b, c * self.n_rows)

    def scatter_grad(self, gz):
        """Adjoint of gather for a 2-channel output."""
        b = gz.shape[0]
        m = self.n_rows
        F, P = self.data_shape
        out = np.zeros((b, 2, F * P))
        out[:, 0, self.data_index] = gz[:, :m]
        out[:, 1, self.data_index] = gz[:, m:]
        return out.reshape(b, 2, F, P)


def lc_shapes(cfg: LcConfig, prefix="lc."):
    shapes = OrderedDict()
    c_in = 4
    for i in range(cfg.n_lc):
        shapes[f"{prefix}h{i}"] = (cfg.f_lc, c_in, cfg.kernel)
        c_in = cfg.f_lc
    shapes[prefix + "head"] = (2, c_in, cfg.kernel)
    return shapes


def init_lc(cfg: LcConfig = LcConfig(), seed=0, prefix="lc.", zero=False):
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = ParamStore()
    for name, shape in lc_shapes(cfg, prefix).items():
        p[name + ".w"] = np.zeros(shape) if zero else _he_uniform(rng, shape)
        p[name + ".b"] = np.zeros(shape[0])
    return p


def lc_passthrough(cfg: LcConfig = LcConfig(), prefix="lc."):
    """LC weights whose network returns ``v`` exactly (before the projection).

    Each hidden layer carries Re v and Im v as ReLU pairs (+t, -t); the head
    recombines them. Needs ``f_lc >= 4``.
    """
    cfg.validate()
    if cfg.f_lc < 4:
        raise ConfigError("pass-through LC needs f_lc >= 4")
    k = cfg.kernel // 2
    p = init_lc(cfg, prefix=prefix, zero=True)
    signs = [(0, 0, 1.0), (1, 0, -1.0), (2, 1, 1.0), (3, 1, -1.0)]
    for i in range(cfg.n_lc):
        w = p[f"{prefix}h{i}.w"]
        for out_ch, comp, sgn in signs:
            if i == 0:
                w[out_ch, comp, k] = sgn
            else:
                # keep the pair: pos channel from pos, neg from neg
                w[out_ch, out_ch, k] = 1.0
    head = p[prefix + "head.w"]
    if cfg.n_lc == 0:
        head[0, 0, k] = head[1, 1, k] = 1.0
    else:
        head[0, 0, k], head[0, 1, k] = 1.0, -1.0
        head[1, 2, k], head[1, 3, k] = 1.0, -1.0
    return p


def ball_project(z, y, eps):
    """Row-wise eps-ball projection; ``eps=inf`` passes ``z`` through."""
    r = z - y
    nrm = np.linalg.norm(r, axis=-1, keepdims=True)
    eps = np.asarray(eps, dtype=np.float64)
    eps_k = eps[..., None] if eps.ndim else eps
    outside = nrm > eps_k
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(outside, eps_k / nrm, 1.0)
    return y + r * scale, (r, nrm, outside, scale)


def ball_project_vjp(g, aux):
    """Gradient wrt the pre-projection residual r = z - y."""
    r, nrm, outside, scale = aux
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.where(outside, r / nrm, 0.0)
    radial = np.sum(rhat * g, axis=-1, keepdims=True)
    return np.where(outside, scale * (g - rhat * radial), g)


def lc_forward(v, y, eps, params: ParamStore, cfg: LcConfig, layout: DataLayout,
               prefix="lc.", backend=None, with_cache=False):
    """Learned consistency block on stacked data ``v``, ``y`` of shape (B, 2M)."""
    if np.any(np.asarray(eps) < 0):
        raise ConfigError("eps must be nonnegative")
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if v.shape != y.shape or v.shape[1] != 2 * layout.n_rows:
        raise ShapeError(f"lc_forward: v {v.shape}, y {y.shape}, layout has {layout.n_rows} rows")
    P = params.values
    h = layout.scatter(v, y)
    ins, pres = [], []
    for i in range(cfg.n_lc):
        ins.append(h)
        pre = conv1d_fwd(h, P[f"{prefix}h{i}.w"], P[f"{prefix}h{i}.b"], backend)
        pres.append(pre)
        h = relu_fwd(pre)
    zg = conv1d_fwd(h, P[prefix + "head.w"], P[prefix + "head.b"], backend)
    z = layout.gather(zg)
    out, aux = ball_project(z, y, eps)
    if not with_cache:
        return out
    return out, dict(ins=ins, pres=pres, last=h, aux=aux)


def lc_vjp(g, cache, params: ParamStore, cfg: LcConfig, layout: DataLayout, prefix="lc.",
           backend=None, need_params=True):
    """Returns (grad wrt v, grad wrt y, param grads dict)."""
    P = params.values
    grads = {}
    g = np.atleast_2d(g)
    gr = ball_project_vjp(g, cache["aux"])
    gy_direct = g - gr
    gz = layout.scatter_grad(gr)
    kern = _backend.get(backend)

    def back(name, gout, inp):
        w = P[name + ".w"]
        if need_params:
            dx, dw, db = conv1d_vjp(gout, inp, w, backend)
            grads[name + ".w"] = dw
            grads[name + ".b"] = db
            return dx
        return kern.conv2d_backward_input(gout, w[:, :, :, None])

    gh = back(prefix + "head", gz, cache["last"])
    for i in reversed(range(cfg.n_lc)):
        gh = back(f"{prefix}h{i}", relu_vjp(gh, cache["pres"][i]), cache["ins"][i])
    gin = layout.gather(gh)  # channels [Re v, Im v, Re y, Im y] -> (B, 4M)
    m2 = 2 * layout.n_rows
    gv = gin[:, :m2]
    gy = gin[:, m2:] + gy_direct
    return gv, gy, grads
