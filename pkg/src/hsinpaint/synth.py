"""Synthetic ground truth: low-rank cubes, masks and Gaussian noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

__all__ = [
    "SynthSpec",
    "gen_lowrank_cube",
    "gen_mask",
    "centered_region",
    "add_gaussian_noise",
    "observe",
]


@dataclass(frozen=True)
class SynthSpec:
    rows: int = 32
    cols: int = 32
    bands: int = 16
    rank: int = 4
    abundance_smoothness: float = 4.0
    seed: int = 0
    noise_sigma: float = 0.12

    def __post_init__(self):
        if min(self.rows, self.cols, self.bands, self.rank) < 1:
            raise ValueError("dimensions and rank must be positive")
        if self.rank > min(self.bands, self.rows * self.cols):
            raise ValueError(
                f"rank {self.rank} infeasible for {self.rows}x{self.cols}x{self.bands}"
            )
        if self.abundance_smoothness < 0 or self.noise_sigma < 0:
            raise ValueError("smoothness and sigma must be non-negative")

    @property
    def dims(self):
        return (self.rows, self.cols, self.bands)


def gen_lowrank_cube(spec):
    """Sum of ``rank`` smooth abundance maps times non-negative spectra.

    The result is scaled so its maximum is 1; scaling preserves the rank.
    """
    rng = np.random.default_rng(spec.seed)
    width = 1 + 2 * int(round(spec.abundance_smoothness))
    maps = rng.random((spec.rank, spec.rows, spec.cols))
    if width > 1:
        maps = uniform_filter1d(maps, width, axis=1, mode="wrap")
        maps = uniform_filter1d(maps, width, axis=2, mode="wrap")
    lo = maps.min(axis=(1, 2), keepdims=True)
    hi = maps.max(axis=(1, 2), keepdims=True)
    maps = (maps - lo) / np.where(hi > lo, hi - lo, 1.0)
    spectra = rng.random((spec.rank, spec.bands))
    cube = np.einsum("kij,kb->ijb", maps, spectra)
    peak = cube.max()
    return cube / peak if peak > 0 else cube


def centered_region(dims, fraction):
    """A centred square ``(row, col, height, width)`` covering ~`fraction` of the image."""
    side = max(1, int(round(math.sqrt(fraction * dims[0] * dims[1]))))
    side = min(side, dims[0], dims[1])
    return ((dims[0] - side) // 2, (dims[1] - side) // 2, side, side)


def gen_mask(dims, kind="dead-region", *, region=None, fraction=0.0, seed=0):
    """Binary mask (1 = valid).  Missing sites are missing in every band.

    ``kind="dead-region"`` zeroes the rectangle ``region = (row, col, h, w)``;
    ``kind="random-pixels"`` zeroes ``floor(fraction * rows * cols)`` random
    spatial sites.
    """
    rows, cols, bands = dims
    spatial = np.ones((rows, cols), dtype=np.uint8)
    if kind == "dead-region":
        if region is None:
            raise ValueError("dead-region mask needs a region")
        r, c, h, w = region
        if r < 0 or c < 0 or h < 0 or w < 0 or r + h > rows or c + w > cols:
            raise ValueError(f"region {region} outside {rows}x{cols} image")
        spatial[r:r + h, c:c + w] = 0
    elif kind == "random-pixels":
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
        n = int(math.floor(fraction * rows * cols))
        rng = np.random.default_rng(seed)
        sites = rng.choice(rows * cols, size=n, replace=False)
        spatial.ravel()[sites] = 0
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    return np.repeat(spatial[:, :, None], bands, axis=2)


def add_gaussian_noise(cube, sigma, seed):
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    cube = np.asarray(cube, dtype=np.float64)
    if sigma == 0:
        return cube.copy()
    rng = np.random.default_rng(seed)
    return cube + sigma * rng.standard_normal(cube.shape)


def observe(clean, mask, sigma, seed):
    """Corrupted observation ``M x + n``, re-masked so dead voxels read 0."""
    noisy = add_gaussian_noise(np.where(mask.astype(bool), clean, 0.0), sigma, seed)
    return np.where(mask.astype(bool), noisy, 0.0)
