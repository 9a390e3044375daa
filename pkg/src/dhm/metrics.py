"""Image-quality metrics, synthetic scenes, and evaluation reports."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


class MetricsError(Exception):
    pass


def psnr(a, b, peak=1.0) -> float:
    """10 log10(peak^2 / MSE) over all voxels; +inf for identical inputs."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2 * sigma * sigma))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _ssim_band(a, b, peak, k1, k2, win):
    size = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view
    wa = view(a, (size, size))
    wb = view(b, (size, size))
    mu_a = np.tensordot(wa, win, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(wb, win, axes=([2, 3], [0, 1]))
    ex_aa = np.tensordot(wa * wa, win, axes=([2, 3], [0, 1]))
    ex_bb = np.tensordot(wb * wb, win, axes=([2, 3], [0, 1]))
    ex_ab = np.tensordot(wa * wb, win, axes=([2, 3], [0, 1]))
    var_a = ex_aa - mu_a * mu_a
    var_b = ex_bb - mu_b * mu_b
    cov = ex_ab - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak=1.0, window=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Structural similarity, computed per band then averaged.

    Local statistics use a Gaussian window over fully contained (valid)
    positions.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3:
        raise MetricsError(f"ssim expects 2-D or 3-D arrays, got {a.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise MetricsError(f"extents {a.shape[:2]} smaller than the "
                           f"{window}x{window} window")
    win = _gaussian_window(window, sigma)
    vals = [_ssim_band(a[:, :, i], b[:, :, i], peak, k1, k2, win)
            for i in range(a.shape[2])]
    return float(np.mean(vals))


def synth_dataset(count, height, width, bands, seed=0):
    """Smooth random scenes: Gaussian blobs with polynomial spectra.

    Every blob contributes a 2-D Gaussian footprint whose amplitude varies
    across bands as a low-order polynomial, so adjacent bands stay strongly
    correlated; each cube is normalized to [0, 1]. Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    grid_y, grid_x = np.mgrid[0:height, 0:width]
    band_pos = np.linspace(0.0, 1.0, bands)
    cubes = []
    for _ in range(count):
        cube = np.zeros((height, width, bands))
        for _ in range(int(rng.integers(4, 9))):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            sy = rng.uniform(height / 8, height / 3)
            sx = rng.uniform(width / 8, width / 3)
            foot = np.exp(-((grid_y - cy) ** 2 / (2 * sy * sy)
                            + (grid_x - cx) ** 2 / (2 * sx * sx)))
            coeff = rng.uniform(-1.0, 1.0, size=3)
            spectrum = (coeff[0] + coeff[1] * band_pos
                        + coeff[2] * band_pos ** 2)
            spectrum = 0.2 + np.abs(spectrum)
            cube += foot[:, :, None] * spectrum
        cube -= cube.min()
        peak = cube.max()
        if peak > 0:
            cube /= peak
        cubes.append(cube)
    return cubes


@dataclass
class EvalReport:
    scene_psnr: list = field(default_factory=list)
    scene_ssim: list = field(default_factory=list)
    runtime_s: float = 0.0
    config_fingerprint: str = ""

    @property
    def psnr_avg(self):
        vals = [v for v in self.scene_psnr if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("inf")

    @property
    def ssim_avg(self):
        return float(np.mean(self.scene_ssim)) if self.scene_ssim else 0.0

    def to_tsv(self):
        lines = ["scene\tpsnr_db\tssim"]
        for i, (p, s) in enumerate(zip(self.scene_psnr, self.scene_ssim)):
            lines.append(f"{i}\t{p:.4f}\t{s:.6f}")
        lines.append(f"avg\t{self.psnr_avg:.4f}\t{self.ssim_avg:.6f}")
        return "\n".join(lines) + "\n"

    def to_kv(self):
        lines = [
            f"scenes={len(self.scene_psnr)}",
            f"psnr_avg={self.psnr_avg:.6f}",
            f"ssim_avg={self.ssim_avg:.6f}",
            f"runtime_s={self.runtime_s:.3f}",
            f"config_fingerprint={self.config_fingerprint}",
        ]
        return "\n".join(lines) + "\n"


class Stopwatch:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0
        return False
