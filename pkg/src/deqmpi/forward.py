"""Simulated FFL system matrices, resampling operators and data emulation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateSignalError, PreconditionError, ShapeError
from .linalg import stack_complex

MU0 = 4e-7 * np.pi
KB = 1.380649e-23
MAGNETITE_MS = 4.8e5  # saturation magnetization, A/m


@dataclass(frozen=True)
class ScannerConfig:
    grid: tuple = (13, 26)
    voxel_mm: float = 2.0
    n_angles: int = 16
    harmonics: tuple = (2, 11)  # inclusive range
    bins_per_harmonic: int = 3
    drive_mT: float = 9.0
    gradient_T_per_m: float = 0.5
    particle_nm: float = 25.0
    samples_per_period: int = 64
    drive_periods: int = 8
    shift_mm: float = 12.0
    temperature_K: float = 300.0
    gain_jitter: float = 0.02
    peak_row_snr: float = 150.0
    row_snr_threshold: float = 5.0

    def validate(self):
        h, w = self.grid
        if h < 2 or w < 2:
            raise ConfigError(f"grid must be at least 2x2, got {self.grid}")
        if self.n_angles < 2:
            raise ConfigError("n_angles must be >= 2")
        lo, hi = self.harmonics
        if lo < 1 or hi < lo:
            raise ConfigError(f"harmonic range {self.harmonics} is empty")
        if self.bins_per_harmonic < 1 or self.bins_per_harmonic % 2 == 0:
            raise ConfigError("bins_per_harmonic must be odd and positive")
        if self.bins_per_harmonic > self.drive_periods:
            raise ConfigError("bins_per_harmonic exceeds drive_periods; harmonic bands overlap")
        if self.gradient_T_per_m <= 0:
            raise ConfigError("selection gradient must be positive (degenerate geometry)")
        if self.drive_mT <= 0 or self.voxel_mm <= 0 or self.particle_nm <= 0:
            raise ConfigError("drive amplitude, voxel size and particle diameter must be positive")
        n_t = self.samples_per_period * self.drive_periods
        if self.drive_periods * hi + self.bins_per_harmonic // 2 >= n_t // 2:
            raise ConfigError("samples_per_period too small for the highest harmonic")
        if self.peak_row_snr <= 0:
            raise ConfigError("peak_row_snr must be positive")
        return self


@dataclass(frozen=True)
class SystemMatrix:
    """Real-stacked system matrix with its row bookkeeping.

    ``row_labels[i] = (harmonic, offset_bin, angle_index)`` for complex row i;
    ``data_index[i]`` is the flat position of row i in the
    ``data_shape = (n_freq, n_angles)`` layout used by the consistency block.
    """

    stacked: np.ndarray
    grid: tuple
    row_labels: np.ndarray
    row_snr: np.ndarray
    data_shape: tuple
    data_index: np.ndarray
    n_rows_total: int = 0

    def __post_init__(self):
        m2, n = self.stacked.shape
        if m2 % 2:
            raise ShapeError("stacked matrix must have an even row count")
        if n != self.grid[0] * self.grid[1]:
            raise ShapeError(f"matrix has {n} columns, grid {self.grid} needs {self.grid[0] * self.grid[1]}")
        if len(self.row_labels) != m2 // 2 or len(self.data_index) != m2 // 2:
            raise ShapeError("row_labels/data_index length must equal complex row count")

    @property
    def complex_rows(self):
        return self.stacked.shape[0] // 2

    @property
    def n_voxels(self):
        return self.stacked.shape[1]

    @property
    def complex(self):
        m = self.complex_rows
        return self.stacked[:m] + 1j * self.stacked[m:]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_matrix(cls, stacked, grid):
        """Wrap a bare stacked matrix; each complex row becomes its own frequency."""
        stacked = np.asarray(stacked, dtype=np.float64)
        m = stacked.shape[0] // 2
        labels = np.column_stack([np.arange(m), np.zeros(m, int), np.zeros(m, int)])
        cplx = stacked[:m] + 1j * stacked[m:]
        return cls(stacked, tuple(grid), labels, np.linalg.norm(cplx, axis=1),
                   (m, 1), np.arange(m), m)


@dataclass(frozen=True)
class Measurement:
    data: np.ndarray
    snr_db: float | None = None
    noise_std: float | None = None


def voxel_centers(grid, voxel_mm):
    """(N, 2) voxel centre coordinates in metres, columns (x, y), row-major order."""
    h, w = grid
    ys = (np.arange(h) - (h - 1) / 2) * voxel_mm * 1e-3
    xs = (np.arange(w) - (w - 1) / 2) * voxel_mm * 1e-3
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def langevin_deriv(xi):
    xi = np.clip(xi, -300.0, 300.0)
    small = np.abs(xi) < 1e-2
    xs = np.where(small, 1.0, xi)
    big = 1.0 / xs**2 - 1.0 / np.sinh(xs) ** 2
    x2 = xi * xi
    series = 1.0 / 3.0 - x2 / 15.0 + 2.0 * x2 * x2 / 189.0
    return np.where(small, series, big)


def _langevin_spectra(cfg, offsets):
    """Complex harmonic bins for point sources at normal offsets ``offsets`` (m).

    Returns an array (len(offsets), n_freq) ordered harmonic-major, offset-minor.
    """
    p = cfg.drive_periods
    n_t = cfg.samples_per_period * p
    t = np.arange(n_t) / n_t
    drive = cfg.drive_mT * 1e-3 / cfg.gradient_T_per_m
    shift = cfg.shift_mm * 1e-3
    s = drive * np.cos(2 * np.pi * p * t) + shift * np.cos(2 * np.pi * t)
    ds = -2 * np.pi * (p * drive * np.sin(2 * np.pi * p * t) + shift * np.sin(2 * np.pi * t))
    volume = np.pi / 6 * (cfg.particle_nm * 1e-9) ** 3
    kappa = MAGNETITE_MS * volume * cfg.gradient_T_per_m / (KB * cfg.temperature_K)
    # induced voltage ~ d/dt L(kappa * (u0 - s(t)))
    sig = -kappa * langevin_deriv(kappa * (offsets[:, None] - s[None, :])) * ds[None, :]
    spec = np.fft.rfft(sig, axis=1) / n_t
    half = cfg.bins_per_harmonic // 2
    lo, hi = cfg.harmonics
    bins = [p * k + j for k in range(lo, hi + 1) for j in range(-half, half + 1)]
    return spec[:, bins]


def simulate_sm(cfg: ScannerConfig = ScannerConfig(), seed=0) -> SystemMatrix:
    """Langevin point-source FFL system matrix with high-SNR row selection."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    h, w = cfg.grid
    n = h * w
    centers = voxel_centers(cfg.grid, cfg.voxel_mm)
    gains = 1.0 + cfg.gain_jitter * rng.uniform(-1.0, 1.0, size=n)
    lo, hi = cfg.harmonics
    half = cfg.bins_per_harmonic // 2
    harm_labels = [(k, j) for k in range(lo, hi + 1) for j in range(-half, half + 1)]
    n_freq = len(harm_labels)

    rows, labels, index = [], [], []
    for a in range(cfg.n_angles):
        phi = np.pi * a / cfg.n_angles
        offsets = centers[:, 0] * np.cos(phi) + centers[:, 1] * np.sin(phi)
        spec = _langevin_spectra(cfg, offsets) * gains[:, None]
        rows.append(spec.T)
        for f, (k, j) in enumerate(harm_labels):
            labels.append((k, j, a))
            index.append(f * cfg.n_angles + a)
    cplx = np.concatenate(rows, axis=0)
    norms = np.linalg.norm(cplx, axis=1)
    cplx *= cfg.peak_row_snr / norms.max()
    snr = norms * (cfg.peak_row_snr / norms.max())
    keep = snr > cfg.row_snr_threshold
    return SystemMatrix(
        stacked=stack_complex(cplx[keep]),
        grid=tuple(cfg.grid),
        row_labels=np.asarray(labels, dtype=np.int64)[keep],
        row_snr=snr[keep],
        data_shape=(n_freq, cfg.n_angles),
        data_index=np.asarray(index, dtype=np.int64)[keep],
        n_rows_total=len(labels),
    )


def box_downsample_matrix(grid_hi, s):
    """(N_lo, N_hi) operator averaging each s x s block of a row-major image."""
    h, w = grid_hi
    if s < 1 or h % s or w % s:
        raise ShapeError(f"grid {grid_hi} not divisible by factor {s}")
    dy = np.kron(np.eye(h // s), np.ones((1, s)) / s)
    dx = np.kron(np.eye(w // s), np.ones((1, s)) / s)
    return np.kron(dy, dx)


def cubic_kernel(d, a=-0.5):
    d = np.abs(np.asarray(d, dtype=np.float64))
    near = ((a + 2) * d - (a + 3)) * d * d + 1
    far = ((a * d - 5 * a) * d + 8 * a) * d - 4 * a
    return np.where(d <= 1, near, np.where(d < 2, far, 0.0))


def _cubic_1d(length, s, a=-0.5):
    out = np.zeros((length * s, length))
    for i in range(length * s):
        pos = (i + 0.5) / s - 0.5
        base = int(np.floor(pos))
        for tap in range(base - 1, base + 3):
            out[i, min(max(tap, 0), length - 1)] += cubic_kernel(pos - tap, a)
    return out


def bicubic_upsample_matrix(grid_lo, s, a=-0.5):
    """(s^2 N, N) separable bicubic interpolation with clamp-to-edge borders."""
    if s < 1 or int(s) != s:
        raise ShapeError("upsampling factor must be a positive integer")
    h, w = grid_lo
    return np.kron(_cubic_1d(h, s, a), _cubic_1d(w, s, a))


def discrepant_sm(sm: SystemMatrix, s: int) -> SystemMatrix:
    """Reconstruction-side SM mimicking a calibration box-sample mismatch.

    Each SM row, viewed as an image, is bicubically upsampled by ``s`` and box
    averaged back onto the original grid (the ``A U D`` round trip).
    """
    if s == 1:
        return sm
    h, w = sm.grid
    up = bicubic_upsample_matrix(sm.grid, s)
    down = box_downsample_matrix((h * s, w * s), s)
    round_trip = down @ up
    return sm.replace(stacked=sm.stacked @ round_trip.T)


def upsampled_sm(sm: SystemMatrix, s: int) -> SystemMatrix:
    """Bicubically interpolate every SM row onto an s-times finer grid."""
    if s < 2:
        raise ShapeError("upsampling factor must be >= 2")
    h, w = sm.grid
    up = bicubic_upsample_matrix(sm.grid, s)
    return sm.replace(stacked=sm.stacked @ up.T, grid=(h * s, w * s))


def noise_scale(clean_norm, snr_db):
    return clean_norm / 10.0 ** (snr_db / 20.0)


def emulate_measurement(sm: SystemMatrix, x, snr_db, seed=0) -> Measurement:
    """y = A x + n with n rescaled to hit ``snr_db`` exactly."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != sm.n_voxels:
        raise ShapeError(f"image has {x.size} voxels, system matrix expects {sm.n_voxels}")
    clean = sm.stacked @ x
    if np.isinf(snr_db) and snr_db > 0:
        return Measurement(clean, snr_db=float("inf"), noise_std=None)
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    norm = np.linalg.norm(clean)
    if norm == 0.0:
        raise DegenerateSignalError("noise-free data are all zero; SNR is undefined")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.shape)
    noise *= noise_scale(norm, snr_db) / np.linalg.norm(noise)
    std = np.linalg.norm(noise) / np.sqrt(noise.size)
    return Measurement(clean + noise, snr_db=float(snr_db), noise_std=float(std))


def emulate_batch(A, X, snr_db, rng):
    """Batched emulation. Returns (noisy data (B, 2M), per-sample noise std (B,))."""
    clean = X @ A.T
    norms = np.linalg.norm(clean, axis=1)
    if np.any(norms == 0):
        raise DegenerateSignalError("a batch image produced all-zero data")
    noise = rng.standard_normal(clean.shape)
    noise *= (noise_scale(norms, snr_db) / np.linalg.norm(noise, axis=1))[:, None]
    std = np.linalg.norm(noise, axis=1) / np.sqrt(clean.shape[1])
    return clean + noise, std


def whiten_to_unit_noise(sm: SystemMatrix, y: Measurement):
    if y.noise_std is None:
        raise PreconditionError("measurement carries no noise_std; cannot whiten")
    scale = 1.0 / y.noise_std
    return (sm.replace(stacked=sm.stacked * scale),
            Measurement(y.data * scale, snr_db=y.snr_db, noise_std=1.0))
