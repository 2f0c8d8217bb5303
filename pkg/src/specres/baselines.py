"""Classical baselines: per-pixel spline upsampling and least-squares linear maps."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import WAVELENGTHS, HyperCube, RgbImage
from .errors import DataFormatError, ShapeError, SingularDesignError

# r, g, b sit at 700, 550, 450 nm; stored here in increasing wavelength order (b, g, r)
KNOT_WAVELENGTHS = np.array([450.0, 550.0, 700.0])

PROJECTION_MAGIC = b"PRJ1"
_PRJ_HEADER = struct.Struct("<4s2I")


def natural_cubic_spline(xk: np.ndarray, yk: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Natural cubic spline through knots ``(xk, yk)`` evaluated at ``x``.

    ``yk`` may carry trailing axes (one spline per column).  Outside the knot
    range the end-knot value is held constant.
    """
    xk = np.asarray(xk, dtype=np.float64)
    yk = np.asarray(yk, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = len(xk)
    if n < 2 or np.any(np.diff(xk) <= 0):
        raise ValueError("need at least two strictly increasing knots")
    h = np.diff(xk)
    # second derivatives m[0] = m[n-1] = 0
    m = np.zeros_like(yk)
    if n > 2:
        a = np.zeros((n - 2, n - 2))
        for i in range(n - 2):
            a[i, i] = 2.0 * (h[i] + h[i + 1])
            if i > 0:
                a[i, i - 1] = h[i]
            if i < n - 3:
                a[i, i + 1] = h[i + 1]
        slopes = np.diff(yk, axis=0) / h.reshape(-1, *([1] * (yk.ndim - 1)))
        m[1:-1] = np.linalg.solve(a, 6.0 * np.diff(slopes, axis=0).reshape(n - 2, -1)).reshape(slopes[1:].shape)

    xc = np.clip(x, xk[0], xk[-1])
    seg = np.clip(np.searchsorted(xk, xc, side="right") - 1, 0, n - 2)
    x0, x1, hs = xk[seg], xk[seg + 1], h[seg]
    shape = (-1,) + (1,) * (yk.ndim - 1)
    t0 = (x1 - xc).reshape(shape)
    t1 = (xc - x0).reshape(shape)
    hs = hs.reshape(shape)
    y0, y1 = yk[seg], yk[seg + 1]
    # interpolate from the nearer knot so knots and constant data come out exact
    lin = np.where(t1 <= t0, y0 + (y1 - y0) * (t1 / hs), y1 - (y1 - y0) * (t0 / hs))
    curve = m[seg] * t0 * (t0**2 - hs**2) / (6 * hs) + m[seg + 1] * t1 * (t1**2 - hs**2) / (6 * hs)
    return lin + curve


def spline_basis() -> np.ndarray:
    """(31, 3) matrix B with ``spectrum = B @ (r, g, b)``."""
    # the spline is linear in the knot values, so splining the identity gives the basis
    bgr = natural_cubic_spline(KNOT_WAVELENGTHS, np.eye(3), WAVELENGTHS)
    return bgr[:, ::-1]


def spline_upsample_pixel(rgb) -> np.ndarray:
    r, g, b = (float(v) for v in rgb)
    return natural_cubic_spline(KNOT_WAVELENGTHS, np.array([b, g, r]), WAVELENGTHS)


def spline_baseline(rgb: RgbImage | np.ndarray) -> HyperCube:
    data = np.asarray(rgb, dtype=np.float64)
    return HyperCube(np.tensordot(spline_basis(), data, axes=1))


# ---------------------------------------------------------------------------
# least squares


def _lstsq(design: np.ndarray, target: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(design, full_matrices=False)
    tol = s.max(initial=0.0) * max(design.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(s > tol))
    if rank < design.shape[1]:
        raise SingularDesignError(f"design matrix has rank {rank} < {design.shape[1]} columns")
    return vt.T @ ((u.T @ target) / s[:, None])


def _stack_pixels(cubes: Sequence, rgbs: Sequence) -> tuple[np.ndarray, np.ndarray]:
    if len(cubes) != len(rgbs) or not cubes:
        raise ShapeError("need equally many (non-zero) cubes and rgb images")
    spectra, colors = [], []
    for cube, rgb in zip(cubes, rgbs):
        c, r = np.asarray(cube, dtype=np.float64), np.asarray(rgb, dtype=np.float64)
        if c.shape[1:] != r.shape[1:]:
            raise ShapeError(f"cube {c.shape} and rgb {r.shape} are not pixel-aligned")
        spectra.append(c.reshape(c.shape[0], -1).T)
        colors.append(r.reshape(3, -1).T)
    return np.concatenate(spectra), np.concatenate(colors)


@dataclass
class FittedProjection:
    """Least-squares spectrum-to-rgb map, ``rgb ≈ matrixᵀ · spectrum``."""

    matrix: np.ndarray  # (bands, 3)
    residual_rms: float
    n_pixels: int


def fit_projection_matrix(cubes: Sequence, rgbs: Sequence) -> FittedProjection:
    spectra, colors = _stack_pixels(cubes, rgbs)
    m = _lstsq(spectra, colors)
    resid = spectra @ m - colors
    return FittedProjection(m, float(np.sqrt(np.mean(resid**2))), len(spectra))


def save_projection(proj: FittedProjection | np.ndarray, path: str | Path) -> None:
    m = proj.matrix if isinstance(proj, FittedProjection) else np.asarray(proj)
    with open(path, "wb") as fh:
        fh.write(_PRJ_HEADER.pack(PROJECTION_MAGIC, *m.shape))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_projection(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _PRJ_HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, rows, cols = _PRJ_HEADER.unpack_from(raw)
    if magic != PROJECTION_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if len(raw) != _PRJ_HEADER.size + 4 * rows * cols:
        raise DataFormatError(f"{path}: payload size does not match {rows}x{cols}")
    return np.frombuffer(raw, dtype="<f4", offset=_PRJ_HEADER.size).reshape(rows, cols).astype(np.float64)


@dataclass
class LinearReconstruction:
    """Affine rgb-to-spectrum regression used as the ``linreg`` baseline."""

    weights: np.ndarray  # (4, bands): r, g, b, intercept

    def __call__(self, rgb: RgbImage | np.ndarray) -> HyperCube:
        data = np.asarray(rgb, dtype=np.float64)
        spec = np.tensordot(self.weights[:3].T, data, axes=1) + self.weights[3][:, None, None]
        return HyperCube(np.clip(spec, 0.0, None))


def fit_linear_reconstruction(cubes: Sequence, rgbs: Sequence) -> LinearReconstruction:
    spectra, colors = _stack_pixels(cubes, rgbs)
    design = np.hstack([colors, np.ones((len(colors), 1))])
    return LinearReconstruction(_lstsq(design, spectra))
