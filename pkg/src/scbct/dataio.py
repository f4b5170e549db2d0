"""Volumes on disk, phantoms, intensity normalization and point sampling.

A volume is stored as two files: ``name.vol`` (text header) and ``name.raw``
(little-endian float32, x-fastest). Normalized coordinates run from -1 to +1
between the outermost voxel centers along each axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class VolumeFormatError(ValueError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


@dataclass(frozen=True)
class Volume:
    data: np.ndarray  # (nx, ny, nz)
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive lengths, got {self.spacing_mm}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.shape, dtype=np.float64) * np.asarray(self.spacing_mm)

    def with_data(self, data) -> "Volume":
        return Volume(np.asarray(data), self.spacing_mm)


@dataclass(frozen=True)
class PointBatch:
    coords: np.ndarray  # (N, 3) in [-1, 1]
    gt_values: np.ndarray  # (N,)
    seed: int = 0

    def __len__(self):
        return len(self.coords)


# -- file format -------------------------------------------------------

def _paths(path):
    path = Path(path)
    if path.suffix == ".raw":
        path = path.with_suffix(".vol")
    elif path.suffix != ".vol":
        path = path.with_name(path.name + ".vol")
    return path, path.with_suffix(".raw")


def save_volume(volume: Volume, path) -> Path:
    hdr_path, raw_path = _paths(path)
    nx, ny, nz = volume.shape
    sx, sy, sz = volume.spacing_mm
    hdr_path.write_text(
        f"dims={nx} {ny} {nz}\n"
        f"spacing_mm={float(sx)!r} {float(sy)!r} {float(sz)!r}\n"
        "dtype=f32le\n"
        "order=x-fastest\n"
    )
    payload = np.asarray(volume.data, dtype="<f4").ravel(order="F")
    raw_path.write_bytes(payload.tobytes())
    return hdr_path


def load_volume(path) -> Volume:
    hdr_path, raw_path = _paths(path)
    if not hdr_path.exists():
        raise FileNotFoundError(hdr_path)
    header = {}
    for raw in hdr_path.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise VolumeFormatError(f"malformed header line {raw!r}")
        k, v = line.split("=", 1)
        header[k.strip()] = v.strip()
    for key in ("dims", "spacing_mm", "dtype", "order"):
        if key not in header:
            raise VolumeFormatError(f"header missing key '{key}'")
    try:
        dims = tuple(int(t) for t in header["dims"].split())
    except ValueError:
        raise VolumeFormatError(f"bad value for key 'dims': {header['dims']!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"bad value for key 'dims': {header['dims']!r}")
    try:
        spacing = tuple(float(t) for t in header["spacing_mm"].split())
    except ValueError:
        raise VolumeFormatError(f"bad value for key 'spacing_mm': {header['spacing_mm']!r}") from None
    if len(spacing) != 3 or min(spacing) <= 0:
        raise VolumeFormatError(f"bad value for key 'spacing_mm': {header['spacing_mm']!r}")
    if header["dtype"] != "f32le":
        raise VolumeFormatError(f"bad value for key 'dtype': {header['dtype']!r}")
    if header["order"] != "x-fastest":
        raise VolumeFormatError(f"bad value for key 'order': {header['order']!r}")

    payload = raw_path.read_bytes()
    expected = 4 * int(np.prod(dims))
    if len(payload) != expected:
        raise TruncatedVolumeError(
            f"{raw_path}: header says {dims} ({expected} bytes), payload has {len(payload)} bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float32)
    return Volume(data, spacing)


# -- intensity ---------------------------------------------------------

def normalize_volume(volume: Volume, lo: float, hi: float) -> Volume:
    if not hi > lo:
        raise ValueError(f"need hi > lo, got lo={lo}, hi={hi}")
    data = np.clip((volume.data - lo) / (hi - lo), 0.0, 1.0)
    return volume.with_data(data.astype(volume.data.dtype, copy=False))


def trilinear_sample(volume: Volume | np.ndarray, p) -> np.ndarray:
    """Trilinear interpolation at normalized coordinates ``p`` (..., 3).

    Out-of-range coordinates are clamped to the border.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    p = np.asarray(p, dtype=np.float64)
    dims = np.asarray(data.shape, dtype=np.float64)
    idx = (np.clip(p, -1.0, 1.0) + 1.0) * 0.5 * (dims - 1.0)
    i0 = np.floor(idx).astype(np.int64)
    i0 = np.minimum(i0, np.asarray(data.shape) - 2).clip(min=0)
    t = idx - i0
    # single-voxel axes have no neighbour to blend with
    t = np.where(dims > 1, t, 0.0)
    i1 = np.minimum(i0 + 1, np.asarray(data.shape) - 1)
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1, y1, z1 = i1[..., 0], i1[..., 1], i1[..., 2]
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    d = data.astype(np.float64, copy=False)
    c00 = d[x0, y0, z0] * (1 - tx) + d[x1, y0, z0] * tx
    c10 = d[x0, y1, z0] * (1 - tx) + d[x1, y1, z0] * tx
    c01 = d[x0, y0, z1] * (1 - tx) + d[x1, y0, z1] * tx
    c11 = d[x0, y1, z1] * (1 - tx) + d[x1, y1, z1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    return c0 * (1 - tz) + c1 * tz


def sample_points(volume: Volume, n_points: int, seed: int, strategy: str = "uniform") -> PointBatch:
    """Draw ``n_points`` training points and their ground-truth values.

    ``strategy="foreground"`` draws half the points from voxels above 0.05
    (jittered within the voxel) and half uniformly.
    """
    if n_points < 1:
        raise ValueError(f"need at least one point, got {n_points}")
    rng = np.random.default_rng(seed)
    # open interval keeps points strictly inside [-1, 1]^3
    lo = np.nextafter(-1.0, 0.0)
    if strategy == "uniform":
        coords = rng.uniform(lo, 1.0, size=(n_points, 3))
    elif strategy == "foreground":
        n_fg = n_points // 2
        fg = np.argwhere(volume.data > 0.05)
        coords = rng.uniform(lo, 1.0, size=(n_points, 3))
        if len(fg) and n_fg:
            pick = fg[rng.integers(0, len(fg), size=n_fg)]
            dims = np.asarray(volume.shape, dtype=np.float64)
            jitter = rng.uniform(-0.5, 0.5, size=(n_fg, 3))
            c = (pick + jitter) / np.maximum(dims - 1, 1) * 2 - 1
            coords[:n_fg] = np.clip(c, lo, np.nextafter(1.0, 0.0))
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    coords = np.where(coords >= 1.0, np.nextafter(1.0, 0.0), coords)
    return PointBatch(coords, trilinear_sample(volume, coords), int(seed))


def grid_coords(dims) -> np.ndarray:
    """Normalized coordinates of every voxel center, x-fastest flattened order."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1)


# -- phantoms ----------------------------------------------------------

def _centered_axes(size):
    c = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(c, c, c, indexing="ij")


def sphere_phantom(size: int, radius: float = 0.6, value: float = 1.0) -> np.ndarray:
    x, y, z = _centered_axes(size)
    return np.where(x**2 + y**2 + z**2 <= radius**2, value, 0.0).astype(np.float32)


def cube_phantom(size: int, half_width: float = 0.5, value: float = 1.0) -> np.ndarray:
    x, y, z = _centered_axes(size)
    inside = (np.abs(x) <= half_width) & (np.abs(y) <= half_width) & (np.abs(z) <= half_width)
    return np.where(inside, value, 0.0).astype(np.float32)


def shells_phantom(size: int, seed: int = 0) -> np.ndarray:
    """Nested ellipsoidal shells with a few small inclusions.

    Each draw varies radii, offsets, intensities and inclusion placement, so
    a seed range gives a small training population.
    """
    rng = np.random.default_rng(seed)
    x, y, z = _centered_axes(size)
    vol = np.zeros_like(x)

    def ellipsoid(center, radii):
        return (((x - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2
                + ((z - center[2]) / radii[2]) ** 2) <= 1.0

    body_r = rng.uniform(0.72, 0.88, size=3)
    body_c = rng.uniform(-0.05, 0.05, size=3)
    vol[ellipsoid(body_c, body_r)] = rng.uniform(0.25, 0.35)
    shell_r = body_r * rng.uniform(0.85, 0.9)
    vol[ellipsoid(body_c, shell_r)] = rng.uniform(0.55, 0.7)
    inner_r = shell_r * rng.uniform(0.8, 0.88)
    vol[ellipsoid(body_c, inner_r)] = rng.uniform(0.1, 0.2)
    core_r = inner_r * rng.uniform(0.35, 0.5)
    core_c = body_c + rng.uniform(-0.1, 0.1, size=3)
    vol[ellipsoid(core_c, core_r)] = rng.uniform(0.8, 1.0)
    for _ in range(int(rng.integers(2, 5))):
        r = rng.uniform(0.06, 0.12)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        c = body_c + direction * inner_r * rng.uniform(0.45, 0.8)
        vol[ellipsoid(c, (r, r, r))] = rng.uniform(0.4, 0.9)
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


PHANTOMS = ("sphere", "cube", "shells")


def make_phantom(kind: str, size: int, seed: int = 0, extent_mm: float = 409.6) -> Volume:
    if kind == "sphere":
        data = sphere_phantom(size)
    elif kind == "cube":
        data = cube_phantom(size)
    elif kind == "shells":
        data = shells_phantom(size, seed)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {PHANTOMS}")
    s = extent_mm / size
    return Volume(data, (s, s, s))


def shipped_phantom_path() -> Path:
    return Path(__file__).parent / "data" / "sphere32.vol"
