"""Image-quality and noise-level metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSignalError, ShapeError


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x.ravel(), ref.ravel()


def measurement_snr(y_clean, y):
    """20 log10(||y_clean|| / ||y - y_clean||); +inf for noise-free data."""
    y, y_clean = _pair(y, y_clean)
    noise = np.linalg.norm(y - y_clean)
    if noise == 0.0:
        return float("inf")
    return float(20.0 * np.log10(np.linalg.norm(y_clean) / noise))


def psnr(x, ref):
    """Peak SNR in dB with the peak taken from the reference."""
    x, ref = _pair(x, ref)
    peak = np.abs(ref).max()
    if peak == 0.0:
        raise DegenerateSignalError("reference image is all zero")
    err = np.linalg.norm(x - ref)
    if err == 0.0:
        return float("inf")
    return float(20.0 * np.log10(np.sqrt(ref.size) * peak / err))


def ssim_terms(x, ref):
    """Whole-image statistics (mu_x, mu_r, var_x, var_r, cov, c1, c2)."""
    x, ref = _pair(x, ref)
    L = ref.max()
    if L <= 0.0:
        raise DegenerateSignalError("reference has no positive peak; SSIM range undefined")
    mx, mr = x.mean(), ref.mean()
    dx, dr = x - mx, ref - mr
    return (mx, mr, np.mean(dx * dx), np.mean(dr * dr), np.mean(dx * dr),
            (0.01 * L) ** 2, (0.03 * L) ** 2)


def ssim(x, ref):
    """Single-window SSIM over the whole image."""
    mx, mr, vx, vr, cov, c1, c2 = ssim_terms(x, ref)
    num = (2 * mx * mr + c1) * (2 * cov + c2)
    den = (mx * mx + mr * mr + c1) * (vx + vr + c2)
    return float(num / den)


@dataclass
class ScoreReport:
    psnr_db: np.ndarray
    ssim: np.ndarray

    @classmethod
    def of(cls, recons, refs):
        recons = np.asarray(recons)
        refs = np.asarray(refs)
        if recons.shape != refs.shape:
            raise ShapeError(f"{recons.shape} reconstructions vs {refs.shape} references")
        p = np.array([psnr(x, r) for x, r in zip(recons, refs)])
        s = np.array([ssim(x, r) for x, r in zip(recons, refs)])
        return cls(p, s)

    def summary(self):
        return {
            "n": int(self.psnr_db.size),
            "psnr_mean": float(np.mean(self.psnr_db)),
            "psnr_std": float(np.std(self.psnr_db)),
            "ssim_mean": float(np.mean(self.ssim)),
            "ssim_std": float(np.std(self.ssim)),
        }

    def records(self):
        return [{"index": i, "psnr_db": float(p), "ssim": float(s)}
                for i, (p, s) in enumerate(zip(self.psnr_db, self.ssim))]

    def row(self, label):
        s = self.summary()
        return (f"{label}\t{s['psnr_mean']:.2f}±{s['psnr_std']:.2f}"
                f"\t{100 * s['ssim_mean']:.1f}±{100 * s['ssim_std']:.1f}")
