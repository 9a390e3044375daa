"""Coded-aperture snapshot measurement model.

A scene is a hyperspectral cube (H, W, bands) in [0, 1]. The disperser
translates band w right by ``shift_step * w`` onto a widened canvas of
W* = W + shift_step * (bands - 1) columns; the coded mask modulates every
band and the sensor sums them into a single (H, W*) measurement. All
operators here work on the shifted volume (H, W*, bands), where the sensing
matrix has the diagonal-Gram structure that the reconstruction exploits.
"""

from __future__ import annotations

import struct

import numpy as np


class CassiError(Exception):
    pass


class FileFormatError(CassiError):
    """Malformed binary file; carries the byte offset of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def shifted_width(width: int, bands: int, shift_step: int) -> int:
    return width + shift_step * (bands - 1)


def _check_cube(cube, what="cube"):
    cube = np.asarray(cube)
    if cube.ndim != 3 or min(cube.shape) < 1:
        raise CassiError(f"{what} must be a non-empty (H, W, bands) array, "
                         f"got shape {cube.shape}")
    if not np.all(np.isfinite(cube)):
        raise CassiError(f"{what} contains non-finite values")
    return cube


def shift_bands(cube: np.ndarray, shift_step: int) -> np.ndarray:
    """Translate band w right by shift_step * w onto a zero-filled canvas."""
    cube = _check_cube(cube)
    if shift_step < 0:
        raise CassiError(f"shift step must be >= 0, got {shift_step}")
    h, w, bands = cube.shape
    ws = shifted_width(w, bands, shift_step)
    out = np.zeros((h, ws, bands), dtype=cube.dtype)
    for k in range(bands):
        off = shift_step * k
        out[:, off:off + w, k] = cube[:, :, k]
    return out


def unshift_bands(shifted: np.ndarray, width: int, shift_step: int) -> np.ndarray:
    """Inverse of shift_bands on the occupied support."""
    shifted = np.asarray(shifted)
    h, ws, bands = shifted.shape
    if ws != shifted_width(width, bands, shift_step):
        raise CassiError(f"shifted width {ws} inconsistent with width {width}, "
                         f"bands {bands}, step {shift_step}")
    out = np.empty((h, width, bands), dtype=shifted.dtype)
    for k in range(bands):
        off = shift_step * k
        out[:, :, k] = shifted[:, off:off + width, k]
    return out


class SensingOperator:
    """Mask + dispersion sensing operator and its precomputed Gram diagonal.

    Treated as immutable: the shifted mask stack and the Gram diagonal are
    derived once from (mask, bands, shift_step); build a new operator to
    change any of them.
    """

    def __init__(self, mask, bands, shift_step):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim != 2 or min(mask.shape) < 1:
            raise CassiError(f"mask must be a 2-D array, got shape {mask.shape}")
        if mask.min() < 0.0 or mask.max() > 1.0:
            raise CassiError("mask values must lie in [0, 1]")
        if bands < 1:
            raise CassiError(f"band count must be >= 1, got {bands}")
        if shift_step < 0:
            raise CassiError(f"shift step must be >= 0, got {shift_step}")
        self.mask = mask
        self.bands = int(bands)
        self.shift_step = int(shift_step)
        self.height, self.width = mask.shape
        self.shifted_cols = shifted_width(self.width, self.bands, self.shift_step)
        stack = np.repeat(mask[:, :, None], self.bands, axis=2)
        self.mask_stack = shift_bands(stack, self.shift_step)
        self.psi = np.sum(self.mask_stack ** 2, axis=2)

    @property
    def shifted_shape(self):
        return (self.height, self.shifted_cols, self.bands)

    def _check_volume(self, x):
        x = np.asarray(x)
        if x.shape != self.shifted_shape:
            raise CassiError(f"volume shape {x.shape} does not match operator "
                             f"shape {self.shifted_shape}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Masked band sum: (H, W*, bands) -> (H, W*)."""
        x = self._check_volume(x)
        return np.sum(self.mask_stack * x, axis=2)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """Transpose map: (H, W*) -> (H, W*, bands); band w gets mask_w * y."""
        y = np.asarray(y)
        if y.shape != (self.height, self.shifted_cols):
            raise CassiError(f"measurement shape {y.shape} does not match "
                             f"({self.height}, {self.shifted_cols})")
        return self.mask_stack * y[:, :, None]

    def materialize_dense(self, cap: int = 4096) -> np.ndarray:
        """Dense sensing matrix on vectorized volumes; test oracle only.

        Rows index measurement pixels (row-major), columns index the shifted
        volume (row-major, band fastest).
        """
        n_pixels = self.height * self.shifted_cols
        n_entries = n_pixels * self.bands
        if n_entries > cap:
            raise CassiError(f"dense materialization of {n_entries} entries "
                             f"exceeds cap {cap}")
        dense = np.zeros((n_pixels, n_entries))
        ms = self.mask_stack.reshape(n_pixels, self.bands)
        for p in range(n_pixels):
            dense[p, p * self.bands:(p + 1) * self.bands] = ms[p]
        return dense


def normalized_adjoint_init(op: SensingOperator, y: np.ndarray,
                            floor: float = 1e-6) -> np.ndarray:
    """Gram-diagonal-normalized adjoint; the classic reconstruction baseline."""
    return op.adjoint(y / np.maximum(op.psi, floor))


def random_mask(height, width, rng, kind="binary"):
    """Coded mask: i.i.d. Bernoulli(0.5) by default, or uniform gray values."""
    if kind == "binary":
        return (rng.random((height, width)) < 0.5).astype(np.float64)
    if kind == "gray":
        return rng.random((height, width))
    raise CassiError(f"unknown mask kind {kind!r}")


def add_noise(y, model, rng=None, sigma=None, bit_depth=None):
    """Apply a measurement noise model; returns (noisy, metadata).

    ``gaussian`` adds i.i.d. zero-mean noise of the given sigma. ``shot``
    rescales to [0, 2**bit_depth - 1], draws Poisson counts per pixel, and
    rescales back (mean-preserving). ``none`` is the identity.
    """
    y = np.asarray(y, dtype=np.float64)
    if model == "none":
        return y.copy(), {"model": "none"}
    rng = rng or np.random.default_rng(0)
    if model == "gaussian":
        if sigma is None or sigma < 0:
            raise CassiError(f"gaussian noise needs sigma >= 0, got {sigma}")
        if sigma == 0:
            return y.copy(), {"model": "gaussian", "sigma": 0.0}
        return y + rng.normal(0.0, sigma, size=y.shape), \
            {"model": "gaussian", "sigma": float(sigma)}
    if model == "shot":
        if bit_depth is None or bit_depth < 1:
            raise CassiError(f"shot noise needs bit_depth >= 1, got {bit_depth}")
        peak = float(2 ** bit_depth - 1)
        top = max(float(y.max()), 1e-12)
        scale = peak / top
        counts = rng.poisson(np.clip(y, 0.0, None) * scale)
        return counts / scale, {"model": "shot", "bit_depth": int(bit_depth)}
    raise CassiError(f"unknown noise model {model!r}")


# ---------------------------------------------------------------------------
# binary file formats (little-endian)
#
#   HSC1: u32 H, u32 W, u32 bands, u8 dtype {0: f32, 1: f64},
#         band-major planar values
#   MSK1: u32 H, u32 W, f32 row-major values
#   MEA1: u32 H, u32 W*, f32 row-major values

_DTYPE_CODES = {0: np.float32, 1: np.float64}


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise FileFormatError(
                f"{self.path}: truncated while reading {what}", self.off)
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]

    def magic(self, expect):
        got = self.take(4, "magic")
        if got != expect:
            raise FileFormatError(
                f"{self.path}: bad magic {got!r}, expected {expect!r}", 0)


def write_cube(path, cube):
    cube = _check_cube(cube)
    h, w, bands = cube.shape
    code = 1 if cube.dtype == np.float64 else 0
    planes = np.ascontiguousarray(np.moveaxis(cube, 2, 0),
                                  dtype=_DTYPE_CODES[code])
    with open(path, "wb") as f:
        f.write(b"HSC1")
        f.write(struct.pack("<IIIB", h, w, bands, code))
        f.write(planes.astype("<f4" if code == 0 else "<f8").tobytes())


def read_cube(path):
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    r.magic(b"HSC1")
    h = r.u32("height")
    w = r.u32("width")
    bands = r.u32("band count")
    if min(h, w, bands) < 1:
        raise FileFormatError(f"{path}: zero extent in header", 4)
    code = r.u8("dtype code")
    if code not in _DTYPE_CODES:
        raise FileFormatError(f"{path}: unknown dtype code {code}", r.off - 1)
    itemsize = np.dtype(_DTYPE_CODES[code]).itemsize
    raw = r.take(h * w * bands * itemsize, "cube values")
    planes = np.frombuffer(raw, dtype="<f4" if code == 0 else "<f8")
    cube = np.moveaxis(planes.reshape(bands, h, w), 0, 2)
    return _check_cube(cube.astype(_DTYPE_CODES[code]), what=path)


def _write_plane(path, magic, plane):
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise CassiError(f"expected a 2-D array, got shape {plane.shape}")
    h, w = plane.shape
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", h, w))
        f.write(plane.astype("<f4").tobytes())


def _read_plane(path, magic):
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    r.magic(magic)
    h = r.u32("height")
    w = r.u32("width")
    if min(h, w) < 1:
        raise FileFormatError(f"{path}: zero extent in header", 4)
    raw = r.take(h * w * 4, "values")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)


def write_mask(path, mask):
    _write_plane(path, b"MSK1", mask)


def read_mask(path):
    return _read_plane(path, b"MSK1")


def write_measurement(path, y):
    _write_plane(path, b"MEA1", y)


def read_measurement(path):
    return _read_plane(path, b"MEA1")
