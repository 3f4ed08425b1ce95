"""Dense linear-algebra kernels shared by the solvers and the DEQ engine.

Complex systems are handled by real stacking: an M x N complex matrix is
stored as the 2M x N real matrix ``[Re(A); Im(A)]`` and complex vectors as
``[Re; Im]``, so ``A.T`` is the adjoint for real images.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import FactorizationError, NumericError, ShapeError


def stack_complex(a):
    """Real-stack a complex array along its first axis."""
    a = np.asarray(a)
    return np.concatenate([a.real, a.imag], axis=0).astype(np.float64)


def unstack_complex(a):
    a = np.asarray(a)
    m = a.shape[0] // 2
    return a[:m] + 1j * a[m:]


def matvec(A, v):
    A = np.asarray(A, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if A.ndim != 2 or v.shape[-1] != A.shape[1]:
        raise ShapeError(f"matvec: matrix {A.shape} incompatible with vector {v.shape}")
    return v @ A.T if v.ndim > 1 else A @ v


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T equal to the factored matrix."""

    lower: np.ndarray

    @property
    def n(self):
        return self.lower.shape[0]

    @classmethod
    def of(cls, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ShapeError(f"cannot factor non-square matrix {matrix.shape}")
        try:
            lower = scipy.linalg.cholesky(matrix, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise FactorizationError(f"matrix is not symmetric positive definite: {exc}") from exc
        return cls(lower)

    @classmethod
    def of_normal(cls, A, scale=1.0):
        """Factor ``I + scale**2 * A.T @ A``."""
        A = np.asarray(A, dtype=np.float64)
        gram = (scale * scale) * (A.T @ A)
        gram[np.diag_indices_from(gram)] += 1.0
        return cls.of(gram)

    def reconstruct(self):
        return self.lower @ self.lower.T

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise ShapeError(f"cholesky_solve: factor of size {self.n}, rhs {b.shape}")
        return scipy.linalg.cho_solve((self.lower, True), b, check_finite=False)


def cholesky_solve(F, b):
    return F.solve(b)


class TruncatedPinv:
    """Truncated-SVD pseudo-inverse of A, cached for repeated application."""

    def __init__(self, A, rel_tol=1e-3):
        if not 0.0 < rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        A = np.asarray(A, dtype=np.float64)
        try:
            u, s, vt = np.linalg.svd(A, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"SVD did not converge: {exc}") from exc
        keep = s > rel_tol * s[0] if s.size and s[0] > 0 else np.zeros(s.shape, bool)
        self.rank = int(keep.sum())
        self.shape = A.shape
        self._u = u[:, keep]
        self._sinv = 1.0 / s[keep]
        self._vt = vt[keep]

    def __call__(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.shape[0]:
            raise ShapeError(f"pinv_apply: matrix {self.shape} incompatible with {y.shape}")
        coef = (y @ self._u) * self._sinv
        return coef @ self._vt


def pinv_apply(A, y, rel_tol=1e-3):
    return TruncatedPinv(A, rel_tol)(y)


def effective_rank(A, rel_tol=1e-3):
    s = np.linalg.svd(np.asarray(A, dtype=np.float64), compute_uv=False)
    return int((s > rel_tol * s[0]).sum())


class NormalEig:
    """Eigendecomposition of A.T @ A for solving ``(I + c**2 A.T A) x = b``.

    One decomposition serves any number of scales ``c``, which is what a
    batch with per-sample noise whitening needs.
    """

    def __init__(self, A):
        A = np.asarray(A, dtype=np.float64)
        try:
            lam, vecs = np.linalg.eigh(A.T @ A)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"eigendecomposition failed: {exc}") from exc
        self.lam = np.maximum(lam, 0.0)
        self.vecs = vecs

    @property
    def n(self):
        return self.vecs.shape[0]

    def solve(self, b, scale=1.0):
        """Solve for ``b`` of shape (N,) or (B, N); ``scale`` scalar or (B,)."""
        b = np.asarray(b, dtype=np.float64)
        if b.shape[-1] != self.n:
            raise ShapeError(f"normal solve: size {self.n}, rhs {b.shape}")
        scale = np.asarray(scale, dtype=np.float64)
        if scale.ndim:
            scale = scale[:, None]
        coef = (b @ self.vecs) / (1.0 + scale * scale * self.lam)
        return coef @ self.vecs.T
