"""Hyperspectral cubes, RGB images, their file formats, and a synthetic scene generator."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataFormatError, ShapeError

WAVELENGTHS = np.arange(400.0, 701.0, 10.0)
N_BANDS = len(WAVELENGTHS)
BAND_STEP_NM = 10.0

CUBE_MAGIC = b"HSC1"
_CUBE_HEADER = struct.Struct("<4s3I")

# synthetic material spectra: constant floor plus 2-4 Gaussian bumps
SYNTH_SIGMA_RANGE = (20.0, 60.0)
SYNTH_FLOOR_RANGE = (0.05, 0.3)
SYNTH_BRIGHTNESS_RANGE = (0.4, 1.0)
# |d/dλ exp(-(λ-μ)²/2σ²)| <= 1/(σ·sqrt(e)); bump weights are normalized to sum <= 1
SYNTH_SMOOTHNESS_BOUND = BAND_STEP_NM / (SYNTH_SIGMA_RANGE[0] * np.sqrt(np.e))


def _float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    return arr if arr.dtype in (np.float32, np.float64) else arr.astype(np.float32)


@dataclass
class HyperCube:
    """A (C, H, W) non-negative spectral image with per-band wavelengths in nm."""

    data: np.ndarray
    wavelengths: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.data = _float_array(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"cube data must be (C, H, W), got {self.data.shape}")
        if self.wavelengths is None:
            if self.data.shape[0] != N_BANDS:
                raise ShapeError(f"{self.data.shape[0]} bands need explicit wavelengths")
            self.wavelengths = WAVELENGTHS.copy()
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        if len(self.wavelengths) != self.bands:
            raise ShapeError(f"{len(self.wavelengths)} wavelengths for {self.bands} bands")
        if self.bands > 1 and not np.all(np.diff(self.wavelengths) > 0):
            raise ShapeError("wavelengths must be strictly increasing")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass
class RgbImage:
    """A (3, H, W) image in [0, 1], channels ordered r, g, b."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = _float_array(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ShapeError(f"rgb data must be (3, H, W), got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


# ---------------------------------------------------------------------------
# file formats


def write_hscube(cube: HyperCube, path: str | Path) -> None:
    c, h, w = cube.data.shape
    with open(path, "wb") as fh:
        fh.write(_CUBE_HEADER.pack(CUBE_MAGIC, c, h, w))
        fh.write(np.asarray(cube.wavelengths, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())


def hscube_file_size(c: int, h: int, w: int) -> int:
    return _CUBE_HEADER.size + 4 * c + 4 * c * h * w


def read_hscube(path: str | Path) -> HyperCube:
    raw = Path(path).read_bytes()
    if len(raw) < _CUBE_HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, c, h, w = _CUBE_HEADER.unpack_from(raw)
    if magic != CUBE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if len(raw) != hscube_file_size(c, h, w):
        raise DataFormatError(f"{path}: {len(raw)} bytes, header implies {hscube_file_size(c, h, w)}")
    off = _CUBE_HEADER.size
    wl = np.frombuffer(raw, dtype="<f4", count=c, offset=off)
    data = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=off + 4 * c).reshape(c, h, w)
    return HyperCube(data.astype(np.float32), wl.astype(np.float64))


def write_ppm(rgb: RgbImage | np.ndarray, path: str | Path) -> None:
    """Binary P6, maxval 255, byte = round(255 * v) after clipping to [0, 1]."""
    data = np.asarray(rgb, dtype=np.float64)
    _, h, w = data.shape
    q = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.transpose(1, 2, 0).tobytes())


def _ppm_tokens(raw: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataFormatError("malformed PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise DataFormatError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        values = [int(t) for t in tokens[1:]]
    except ValueError as exc:
        raise DataFormatError(f"malformed PPM header: {exc}") from None
    # exactly one whitespace byte separates maxval from the raster
    return values, pos + 1


def read_ppm(path: str | Path) -> RgbImage:
    raw = Path(path).read_bytes()
    (w, h, maxval), start = _ppm_tokens(raw, 4)
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise DataFormatError(f"{path}: unsupported PPM geometry {w}x{h} maxval {maxval}")
    payload = raw[start:start + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise DataFormatError(f"{path}: truncated PPM raster")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return RgbImage(arr.astype(np.float32) / np.float32(maxval))


def read_manifest(path: str | Path) -> list[tuple[Path, Path]]:
    """Return (cube_path, rgb_path) pairs; relative entries resolve against the manifest's folder."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read manifest {path}: {exc}") from None
    if not isinstance(entries, list):
        raise DataFormatError(f"{path}: manifest must be a JSON list")
    out = []
    for e in entries:
        try:
            out.append(((path.parent / e["cube_path"]), (path.parent / e["rgb_path"])))
        except (KeyError, TypeError):
            raise DataFormatError(f"{path}: entry {e!r} lacks cube_path/rgb_path") from None
    return out


def write_manifest(pairs: Sequence[tuple[str | Path, str | Path]], path: str | Path) -> None:
    entries = [{"cube_path": str(c), "rgb_path": str(r)} for c, r in pairs]
    Path(path).write_text(json.dumps(entries, indent=2) + "\n")


def load_pairs(manifest: str | Path) -> list[tuple[RgbImage, HyperCube]]:
    pairs = []
    for cube_path, rgb_path in read_manifest(manifest):
        cube, rgb = read_hscube(cube_path), read_ppm(rgb_path)
        if (cube.height, cube.width) != (rgb.height, rgb.width):
            raise DataFormatError(f"{cube_path} and {rgb_path} differ in size")
        pairs.append((rgb, cube))
    return pairs


# ---------------------------------------------------------------------------
# spectral response and projection


def default_response(sigma_nm: float = 40.0, centers=(700.0, 550.0, 450.0)) -> np.ndarray:
    """(31, 3) Gaussian r, g, b responses sampled at the band wavelengths, column-normalized."""
    resp = np.exp(-0.5 * ((WAVELENGTHS[:, None] - np.asarray(centers)[None, :]) / sigma_nm) ** 2)
    return resp / resp.sum(axis=0, keepdims=True)


def project_to_rgb(cube: HyperCube, response: np.ndarray | None = None, exposure: float = 1.0,
                   clip: bool = True) -> RgbImage:
    """Per-pixel ``rgb = responseᵀ · spectrum``, scaled by ``exposure`` and clamped to [0, 1]."""
    if response is None:
        response = default_response()
    response = np.asarray(response, dtype=np.float64)
    if cube.bands != response.shape[0]:
        raise ShapeError(f"cube has {cube.bands} bands, response expects {response.shape[0]}")
    rgb = np.tensordot(response.T, cube.data.astype(np.float64), axes=1) * exposure
    if clip:
        rgb = np.clip(rgb, 0.0, 1.0)
    return RgbImage(rgb)


# ---------------------------------------------------------------------------
# synthetic scenes


def random_material(rng: np.random.Generator) -> np.ndarray:
    """One smooth non-negative 31-band spectrum with values in (0, 1]."""
    k = rng.integers(2, 5)
    mu = rng.uniform(WAVELENGTHS[0], WAVELENGTHS[-1], k)
    sigma = rng.uniform(*SYNTH_SIGMA_RANGE, k)
    amp = rng.uniform(0.1, 1.0, k)
    floor = rng.uniform(*SYNTH_FLOOR_RANGE)
    bumps = np.exp(-0.5 * ((WAVELENGTHS[:, None] - mu) / sigma) ** 2)
    spec = (floor + bumps @ amp) / (floor + amp.sum())
    return spec * rng.uniform(*SYNTH_BRIGHTNESS_RANGE)


def _smooth_abundances(rng: np.random.Generator, h: int, w: int, n: int, smoothness: float) -> np.ndarray:
    fields = np.stack([gaussian_filter(rng.standard_normal((h, w)), smoothness, mode="wrap") for _ in range(n)])
    fields /= fields.std(axis=(1, 2), keepdims=True) + 1e-12
    logits = 3.0 * fields
    logits -= logits.max(axis=0, keepdims=True)
    ab = np.exp(logits)
    return ab / ab.sum(axis=0, keepdims=True)


def synth_scene(rng: np.random.Generator | int, height: int, width: int, n_materials: int,
                smoothness: float = 4.0, library: np.ndarray | None = None) -> HyperCube:
    """Linear mixture of ``n_materials`` spectra with spatially smooth simplex abundances.

    Materials are drawn fresh, or sampled from the rows of ``library`` (M, 31)
    when given.
    """
    if n_materials < 1:
        raise ValueError(f"n_materials must be >= 1, got {n_materials}")
    rng = np.random.default_rng(rng)
    if library is None:
        spectra = np.stack([random_material(rng) for _ in range(n_materials)])
    else:
        spectra = np.asarray(library)[rng.choice(len(library), n_materials, replace=len(library) < n_materials)]
    ab = _smooth_abundances(rng, height, width, n_materials, smoothness)
    cube = np.tensordot(spectra.T, ab, axes=1)
    return HyperCube(np.clip(cube, 0.0, 1.0).astype(np.float32))


def split_dataset(pairs: Sequence, ratio: float, seed: int):
    """Seeded disjoint split; the first part holds ``round(ratio * n)`` items."""
    if not pairs:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    n = len(pairs)
    order = np.random.default_rng(seed).permutation(n)
    k = int(round(ratio * n))
    return [pairs[i] for i in order[:k]], [pairs[i] for i in order[k:]]
