"""Hyperspectral cubes, masks, patch operators and the ``.hsic`` container.

Cubes are plain ``numpy`` arrays of shape ``(rows, cols, bands)``.  Masks
share that shape and hold 0 for a missing voxel and 1 for a valid one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "CubeFormatError",
    "PatchLayout",
    "load_cube",
    "save_cube",
    "load_mask",
    "save_mask",
    "load_matrix",
    "save_matrix",
    "apply_mask",
    "extract_patches",
    "assemble_patches",
    "patch_coverage",
    "matricize",
    "dematricize",
    "export_band_pgm",
]

MAGIC = b"HSIC"
VERSION = 1
DTYPE_F32 = 1
DTYPE_U8 = 2
DTYPE_F64 = 3
_DTYPES = {DTYPE_F32: "<f4", DTYPE_U8: "u1", DTYPE_F64: "<f8"}
# magic, version, dtype code, 8 reserved bytes -> 16-byte preamble
_PREAMBLE = struct.Struct("<4sHH8x")
_DIMS = struct.Struct("<III")
HEADER_SIZE = _PREAMBLE.size + _DIMS.size


class CubeFormatError(ValueError):
    """Raised when a cube container is malformed."""


def _check_cube(cube):
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"expected a (rows, cols, bands) array, got shape {cube.shape}")
    return cube


def _write(path, arr, code):
    rows, cols, bands = arr.shape
    # band-sequential payload: band, row, col
    payload = np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=_DTYPES[code])
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, code))
        fh.write(_DIMS.pack(rows, cols, bands))
        fh.write(payload.tobytes())


def _read(path):
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise CubeFormatError(f"{path}: truncated header")
    magic, version, code = _PREAMBLE.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CubeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CubeFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise CubeFormatError(f"{path}: unknown dtype code {code}")
    rows, cols, bands = _DIMS.unpack_from(raw, _PREAMBLE.size)
    dtype = np.dtype(_DTYPES[code])
    n = rows * cols * bands
    body = raw[HEADER_SIZE:]
    if len(body) != n * dtype.itemsize:
        raise CubeFormatError(
            f"{path}: header declares {rows}x{cols}x{bands} ({n} values) "
            f"but payload holds {len(body) / dtype.itemsize:g}"
        )
    data = np.frombuffer(body, dtype=dtype).reshape(bands, rows, cols)
    return code, data.transpose(1, 2, 0).copy()


def save_cube(cube, path, *, double=False):
    """Write a cube to a ``.hsic`` file (float32 payload unless `double`)."""
    cube = _check_cube(cube)
    if not np.all(np.isfinite(cube)):
        raise ValueError("cube contains non-finite values")
    _write(path, cube, DTYPE_F64 if double else DTYPE_F32)


def load_cube(path):
    """Read a ``.hsic`` file into a float64 array of shape (rows, cols, bands)."""
    code, data = _read(path)
    if code == DTYPE_U8:
        raise CubeFormatError(f"{path}: is a mask container, not a cube")
    data = data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise CubeFormatError(f"{path}: non-finite values in payload")
    return data


def save_mask(mask, path):
    mask = _check_cube(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    _write(path, mask, DTYPE_U8)


def load_mask(path):
    code, data = _read(path)
    if code != DTYPE_U8:
        raise CubeFormatError(f"{path}: expected u8 mask payload")
    if not np.all(data <= 1):
        raise CubeFormatError(f"{path}: mask entries must be 0 or 1")
    return data.astype(np.uint8)


def save_matrix(mat, path):
    """Store a 2-D matrix (e.g. a dictionary) as a rows x cols x 1 container in float64."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("expected a matrix")
    save_cube(mat[:, :, None], path, double=True)


def load_matrix(path):
    cube = load_cube(path)
    if cube.shape[2] != 1:
        raise CubeFormatError(f"{path}: matrix container must have bands=1")
    return cube[:, :, 0]


def apply_mask(cube, mask):
    """Elementwise ``mask * cube``; masked entries come out exactly 0."""
    cube = _check_cube(cube)
    mask = np.asarray(mask)
    if mask.shape != cube.shape:
        raise ValueError(f"mask shape {mask.shape} != cube shape {cube.shape}")
    return np.where(mask.astype(bool), cube, 0.0)


@dataclass(frozen=True)
class PatchLayout:
    """How patches are cut from a cube.

    ``per-band-slice`` takes each full band as one patch; ``spatial-sliding``
    slides a ``patch_rows x patch_cols`` window over every band.  Patch
    columns are ordered band-major, then window position in row-major order.
    """

    patch_rows: int
    patch_cols: int
    stride_rows: int = 1
    stride_cols: int = 1
    mode: str = "spatial-sliding"

    @classmethod
    def per_band(cls, rows, cols):
        return cls(rows, cols, rows, cols, "per-band-slice")

    @classmethod
    def sliding(cls, size, stride):
        return cls(size, size, stride, stride, "spatial-sliding")

    def validate(self, dims):
        rows, cols = dims[0], dims[1]
        if self.mode not in ("per-band-slice", "spatial-sliding"):
            raise ValueError(f"unknown patch mode {self.mode!r}")
        if min(self.patch_rows, self.patch_cols, self.stride_rows, self.stride_cols) < 1:
            raise ValueError("patch sizes and strides must be >= 1")
        if self.patch_rows > rows or self.patch_cols > cols:
            raise ValueError(
                f"patch {self.patch_rows}x{self.patch_cols} larger than image {rows}x{cols}"
            )
        if self.mode == "per-band-slice" and (self.patch_rows, self.patch_cols) != (rows, cols):
            raise ValueError("per-band-slice layout needs patch dims equal to the image dims")

    def positions(self, dims):
        """Top-left corners (row offsets, col offsets) of all windows."""
        self.validate(dims)
        return (_starts(dims[0], self.patch_rows, self.stride_rows),
                _starts(dims[1], self.patch_cols, self.stride_cols))

    @property
    def patch_dim(self):
        return self.patch_rows * self.patch_cols

    def n_patches(self, dims):
        r, c = self.positions(dims)
        return len(r) * len(c) * dims[2]


def _starts(n, p, s):
    starts = list(range(0, n - p + 1, s))
    if starts[-1] != n - p:
        starts.append(n - p)
    return np.array(starts)


def extract_patches(cube, layout):
    """Return the ``patch_dim x n_patches`` matrix of vectorised patches."""
    cube = _check_cube(cube)
    rs, cs = layout.positions(cube.shape)
    pr, pc = layout.patch_rows, layout.patch_cols
    win = np.lib.stride_tricks.sliding_window_view(cube, (pr, pc), axis=(0, 1))
    win = win[rs][:, cs]  # (nr, nc, bands, pr, pc)
    bands = cube.shape[2]
    win = win.transpose(2, 0, 1, 3, 4).reshape(bands * len(rs) * len(cs), pr * pc)
    return np.ascontiguousarray(win.T)


def assemble_patches(patches, layout, dims):
    """Adjoint of `extract_patches`: overlapping contributions are summed."""
    patches = np.asarray(patches)
    rs, cs = layout.positions(dims)
    rows, cols, bands = dims
    pr, pc = layout.patch_rows, layout.patch_cols
    npos = len(rs) * len(cs)
    if patches.shape != (pr * pc, bands * npos):
        raise ValueError(
            f"patch matrix {patches.shape} inconsistent with layout "
            f"({pr * pc}, {bands * npos})"
        )
    blocks = patches.T.reshape(bands, len(rs), len(cs), pr, pc)
    out = np.zeros((rows, cols, bands), dtype=np.result_type(patches, np.float64))
    for i, r in enumerate(rs):
        for j, c in enumerate(cs):
            out[r:r + pr, c:c + pc, :] += blocks[:, i, j].transpose(1, 2, 0)
    return out


def patch_coverage(layout, dims):
    """Number of patches covering each voxel (the diagonal of sum_i P_i^T P_i)."""
    rs, cs = layout.positions(dims)
    count = np.zeros(dims[:2])
    for r in rs:
        for c in cs:
            count[r:r + layout.patch_rows, c:c + layout.patch_cols] += 1
    if np.any(count == 0):
        raise ValueError("patch layout leaves voxels uncovered (stride larger than patch?)")
    return np.repeat(count[:, :, None], dims[2], axis=2)


def matricize(cube):
    """Reshape a cube to the ``bands x (rows*cols)`` matrix."""
    cube = _check_cube(cube)
    return cube.reshape(-1, cube.shape[2]).T


def dematricize(mat, dims):
    rows, cols, bands = dims
    mat = np.asarray(mat)
    if mat.shape != (bands, rows * cols):
        raise ValueError(f"matrix {mat.shape} does not match dims {dims}")
    return mat.T.reshape(rows, cols, bands)


def export_band_pgm(cube, band, path):
    """Write one band as an 8-bit binary PGM, min-max scaled."""
    img = _check_cube(cube)[:, :, band]
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.round((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
