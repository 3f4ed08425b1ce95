# cython: language_level=3
"""Compiled hot kernels: im2col convolution over BLAS, Kaczmarz sweeps, TV prox.

Mirrors ``_pykernels`` exactly in signature and semantics.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _gemm(bint ta, bint tb, int m, int n, int k, double alpha,
                double* a, int lda, double* b, int ldb, double beta,
                double* c, int ldc) noexcept nogil:
    # row-major C[m,n] = alpha * op(A)[m,k] @ op(B)[k,n] + beta * C
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    dgemm(&cb, &ca, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef void _im2col(double* x, int c, int h, int w, int kh, int kw,
                  double* cols) noexcept nogil:
    cdef int ci, ky, kx, i, j, si, sj, row
    cdef int ph = kh // 2
    cdef int pw = kw // 2
    cdef int hw = h * w
    cdef double* dst
    cdef double* src
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                row = (ci * kh + ky) * kw + kx
                dst = cols + row * hw
                for i in range(h):
                    si = i + ky - ph
                    if si < 0 or si >= h:
                        memset(dst + i * w, 0, w * sizeof(double))
                        continue
                    src = x + (ci * h + si) * w
                    for j in range(w):
                        sj = j + kx - pw
                        if sj < 0 or sj >= w:
                            dst[i * w + j] = 0.0
                        else:
                            dst[i * w + j] = src[sj]


cdef void _col2im(double* cols, int c, int h, int w, int kh, int kw,
                  double* x) noexcept nogil:
    cdef int ci, ky, kx, i, j, si, sj, row
    cdef int ph = kh // 2
    cdef int pw = kw // 2
    cdef int hw = h * w
    cdef double* src
    cdef double* dst
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                row = (ci * kh + ky) * kw + kx
                src = cols + row * hw
                for i in range(h):
                    si = i + ky - ph
                    if si < 0 or si >= h:
                        continue
                    dst = x + (ci * h + si) * w
                    for j in range(w):
                        sj = j + kx - pw
                        if sj >= 0 and sj < w:
                            dst[sj] += src[i * w + j]


def conv2d_forward(x, w, b):
    cdef cnp.ndarray[cnp.float64_t, ndim=4] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] wa = np.ascontiguousarray(w, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ba = np.ascontiguousarray(b, dtype=np.float64)
    cdef int bsz = xa.shape[0], c = xa.shape[1], h = xa.shape[2], wd = xa.shape[3]
    cdef int o = wa.shape[0], kh = wa.shape[2], kw = wa.shape[3]
    cdef int ckk = c * kh * kw
    cdef int hw = h * wd
    cdef cnp.ndarray[cnp.float64_t, ndim=4] out = np.empty((bsz, o, h, wd))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] cols = np.empty((ckk, hw))
    cdef int bi, oi, p
    cdef double* op
    for bi in range(bsz):
        _im2col(&xa[bi, 0, 0, 0], c, h, wd, kh, kw, &cols[0, 0])
        for oi in range(o):
            op = &out[bi, oi, 0, 0]
            for p in range(hw):
                op[p] = ba[oi]
        _gemm(False, False, o, hw, ckk, 1.0, &wa[0, 0, 0, 0], ckk,
              &cols[0, 0], hw, 1.0, &out[bi, 0, 0, 0], hw)
    return out


def conv2d_backward_input(g, w):
    cdef cnp.ndarray[cnp.float64_t, ndim=4] ga = np.ascontiguousarray(g, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] wa = np.ascontiguousarray(w, dtype=np.float64)
    cdef int bsz = ga.shape[0], o = ga.shape[1], h = ga.shape[2], wd = ga.shape[3]
    cdef int c = wa.shape[1], kh = wa.shape[2], kw = wa.shape[3]
    cdef int ckk = c * kh * kw
    cdef int hw = h * wd
    cdef cnp.ndarray[cnp.float64_t, ndim=4] dx = np.zeros((bsz, c, h, wd))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dcols = np.empty((ckk, hw))
    cdef int bi
    for bi in range(bsz):
        _gemm(True, False, ckk, hw, o, 1.0, &wa[0, 0, 0, 0], ckk,
              &ga[bi, 0, 0, 0], hw, 0.0, &dcols[0, 0], hw)
        _col2im(&dcols[0, 0], c, h, wd, kh, kw, &dx[bi, 0, 0, 0])
    return dx


def conv2d_backward_weight(x, g, int kh, int kw):
    cdef cnp.ndarray[cnp.float64_t, ndim=4] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] ga = np.ascontiguousarray(g, dtype=np.float64)
    cdef int bsz = xa.shape[0], c = xa.shape[1], h = xa.shape[2], wd = xa.shape[3]
    cdef int o = ga.shape[1]
    cdef int ckk = c * kh * kw
    cdef int hw = h * wd
    cdef cnp.ndarray[cnp.float64_t, ndim=4] dw = np.zeros((o, c, kh, kw))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] cols = np.empty((ckk, hw))
    cdef int bi
    for bi in range(bsz):
        _im2col(&xa[bi, 0, 0, 0], c, h, wd, kh, kw, &cols[0, 0])
        _gemm(False, True, o, ckk, hw, 1.0, &ga[bi, 0, 0, 0], hw,
              &cols[0, 0], hw, 1.0, &dw[0, 0, 0, 0], ckk)
    return dw


def kaczmarz_sweeps(A, y, cnp.ndarray[cnp.float64_t, ndim=1] x,
                    cnp.ndarray[cnp.float64_t, ndim=1] v, double lam,
                    int n_sweeps, bint nonneg):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] aa = np.ascontiguousarray(A, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ya = np.ascontiguousarray(y, dtype=np.float64)
    cdef int m = aa.shape[0], n = aa.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] norms = np.einsum("ij,ij->i", aa, aa)
    cdef double sq = sqrt(lam)
    cdef double dot, alpha
    cdef int s, i, j
    cdef double* row
    for s in range(n_sweeps):
        for i in range(m):
            if norms[i] == 0.0:
                continue
            row = &aa[i, 0]
            dot = 0.0
            for j in range(n):
                dot += row[j] * x[j]
            alpha = (ya[i] - dot - sq * v[i]) / (norms[i] + lam)
            for j in range(n):
                x[j] += alpha * row[j]
            v[i] += alpha * sq
        if nonneg:
            for j in range(n):
                if x[j] < 0.0:
                    x[j] = 0.0
    return x


cdef double _tv_value(double* x, int h, int w) noexcept nogil:
    cdef double s = 0.0, gx, gy
    cdef int i, j
    for i in range(h):
        for j in range(w):
            gx = x[i * w + j + 1] - x[i * w + j] if j < w - 1 else 0.0
            gy = x[(i + 1) * w + j] - x[i * w + j] if i < h - 1 else 0.0
            s += sqrt(gx * gx + gy * gy)
    return s


def tv_prox(v, double tau, int n_iters, double step, objective):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] va = np.ascontiguousarray(v, dtype=np.float64)
    cdef int h = va.shape[0], w = va.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] px = np.zeros((h, w))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] py = np.zeros((h, w))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x = va.copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=2] best = va.copy()
    cdef double best_obj = tau * _tv_value(&va[0, 0], h, w)
    cdef double t = step / tau
    cdef double obj, gx, gy, nrm, d, r
    cdef int it, i, j
    for it in range(n_iters):
        for i in range(h):
            for j in range(w):
                gx = x[i, j + 1] - x[i, j] if j < w - 1 else 0.0
                gy = x[i + 1, j] - x[i, j] if i < h - 1 else 0.0
                px[i, j] += t * gx
                py[i, j] += t * gy
                nrm = sqrt(px[i, j] * px[i, j] + py[i, j] * py[i, j])
                if nrm > 1.0:
                    px[i, j] /= nrm
                    py[i, j] /= nrm
        obj = 0.0
        for i in range(h):
            for j in range(w):
                d = 0.0
                if w > 1:
                    if j == 0:
                        d = px[i, 0]
                    elif j == w - 1:
                        d = -px[i, w - 2]
                    else:
                        d = px[i, j] - px[i, j - 1]
                if h > 1:
                    if i == 0:
                        d += py[0, j]
                    elif i == h - 1:
                        d += -py[h - 2, j]
                    else:
                        d += py[i, j] - py[i - 1, j]
                x[i, j] = va[i, j] + tau * d
                r = x[i, j] - va[i, j]
                obj += 0.5 * r * r
        obj += tau * _tv_value(&x[0, 0], h, w)
        if obj < best_obj:
            best_obj = obj
            best[:, :] = x
        if objective is not None:
            objective.append(best_obj)
    return best
