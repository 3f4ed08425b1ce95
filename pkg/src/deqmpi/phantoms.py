"""Procedural vessel and torus phantoms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError

# disjoint seed ranges for the dataset splits
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "vessel"
    grid: tuple = (13, 26)
    seed: int = 0
    n_branches: tuple = (1, 3)
    width_px: tuple = (1.0, 3.0)
    curvature: float = 0.25
    length_frac: tuple = (0.2, 0.5)
    blur_sigma: float = 0.5
    intensity: tuple = (0.5, 1.5)
    tube_diameter_mm: float = 4.0
    inner_diameter_mm: float = 1.0
    voxel_mm: float = 1.0
    center_offset_mm: tuple = (0.5, 0.5)
    supersample: int = 10


def _bezier(p0, p1, p2, n=200):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _border_point(rng, h, w):
    side = rng.integers(4)
    u = rng.uniform()
    if side == 0:
        return np.array([0.0, u * (w - 1)])
    if side == 1:
        return np.array([h - 1.0, u * (w - 1)])
    if side == 2:
        return np.array([u * (h - 1), 0.0])
    return np.array([u * (h - 1), w - 1.0])


def gen_vessel(spec: PhantomSpec) -> np.ndarray:
    """Random smooth tubes: quadratic Bezier paths rasterized, blurred, rescaled."""
    if spec.kind != "vessel":
        raise ConfigError(f"gen_vessel needs kind='vessel', got {spec.kind!r}")
    h, w = spec.grid
    if h < 8 or w < 8:
        raise ConfigError(f"vessel grid {spec.grid} too small (need >= 8 px per side)")
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.column_stack([yy.ravel(), xx.ravel()])
    img = np.zeros(h * w)
    n_branches = rng.integers(spec.n_branches[0], spec.n_branches[1] + 1)
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    width = rng.uniform(*spec.width_px)
    paths = []
    for b in range(n_branches):
        if b == 0:
            # trunk enters from the border and heads roughly inwards
            start = _border_point(rng, h, w)
            heading = np.arctan2(*(centre - start)) + rng.uniform(-0.8, 0.8)
            span = rng.uniform(*spec.length_frac) * np.hypot(h, w)
        else:
            # side branches sprout from an earlier path, thinner and shorter
            parent = paths[rng.integers(len(paths))]
            start = parent[rng.integers(len(parent) // 4, len(parent))]
            heading = rng.uniform(-np.pi, np.pi)
            span = 0.5 * rng.uniform(*spec.length_frac) * np.hypot(h, w)
            width = rng.uniform(spec.width_px[0], width)
        end = start + span * np.array([np.sin(heading), np.cos(heading)])
        end = np.clip(end, 0, [h - 1, w - 1])
        mid = 0.5 * (start + end) + rng.normal(scale=spec.curvature * span, size=2)
        path = _bezier(start, mid, end)
        paths.append(path)
        strength = rng.uniform(0.6, 1.0)
        dist = np.sqrt(((pix[:, None, :] - path[None, :, :]) ** 2).sum(-1)).min(axis=1)
        img = np.maximum(img, np.where(dist <= width / 2, strength, 0.0))
    img = img.reshape(h, w)
    if spec.blur_sigma > 0:
        img = gaussian_filter(img, spec.blur_sigma, mode="constant", truncate=2.0)
    peak = img.max()
    if peak <= 0:
        # the path missed every pixel centre; fall back to a single bright pixel
        img[h // 2, w // 2] = 1.0
        peak = 1.0
    return img * (rng.uniform(*spec.intensity) / peak)


def gen_torus(spec: PhantomSpec) -> np.ndarray:
    """Annulus rasterized on a supersampled grid and box-averaged to the voxel grid."""
    if spec.kind != "torus":
        raise ConfigError(f"gen_torus needs kind='torus', got {spec.kind!r}")
    h, w = spec.grid
    r_in = spec.inner_diameter_mm / 2
    r_out = (spec.inner_diameter_mm + spec.tube_diameter_mm) / 2
    cx, cy = spec.center_offset_mm
    half_w = w * spec.voxel_mm / 2
    half_h = h * spec.voxel_mm / 2
    if abs(cx) + r_out > half_w or abs(cy) + r_out > half_h:
        raise ConfigError("torus does not fit inside the field of view")
    s = spec.supersample
    fine = spec.voxel_mm / s
    ys = (np.arange(h * s) + 0.5) * fine - half_h
    xs = (np.arange(w * s) + 0.5) * fine - half_w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    r = np.hypot(xx - cx, yy - cy)
    ring = ((r >= r_in) & (r <= r_out)).astype(np.float64)
    return ring.reshape(h, s, w, s).mean(axis=(1, 3))


def torus_hole_index(spec: PhantomSpec):
    """(row, col) of the voxel containing the torus centre."""
    h, w = spec.grid
    cx, cy = spec.center_offset_mm
    col = int(np.floor((cx + w * spec.voxel_mm / 2) / spec.voxel_mm))
    row = int(np.floor((cy + h * spec.voxel_mm / 2) / spec.voxel_mm))
    return row, col


def generate(spec: PhantomSpec) -> np.ndarray:
    if spec.kind == "vessel":
        return gen_vessel(spec)
    if spec.kind == "torus":
        return gen_torus(spec)
    raise ConfigError(f"unknown phantom kind {spec.kind!r}")


def vessel_dataset(split, count, grid=(13, 26), start=0, **overrides):
    """Stack ``count`` vessel phantoms of ``split`` as an array (count, H, W)."""
    if split not in SPLIT_OFFSETS:
        raise ConfigError(f"unknown split {split!r}")
    base = SPLIT_OFFSETS[split]
    return np.stack([
        gen_vessel(PhantomSpec(kind="vessel", grid=tuple(grid), seed=base + start + i, **overrides))
        for i in range(count)
    ])
