"""Cone-beam acquisition geometry and per-view point projection.

World frame: isocenter at the origin, gantry rotating about z. For a view at
angle ``a`` the world is rotated by ``-a`` about z; in that rotated frame the
source sits at ``(+sid, 0, 0)`` and the flat detector lies in the plane
``x = sid - sdd`` with its u axis along y and v axis along z.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

GEOM_KEYS = (
    "sid_mm", "sdd_mm", "det_px_u", "det_px_v", "det_mm_u", "det_mm_v",
    "vol_mm_x", "vol_mm_y", "vol_mm_z",
)


class DegenerateRayError(ValueError):
    """Raised when a query point coincides with the x-ray source."""


@dataclass(frozen=True)
class ScannerGeometry:
    source_to_isocenter_mm: float = 1000.0
    source_to_detector_mm: float = 1500.0
    detector_size_mm: tuple[float, float] = (614.4, 614.4)
    detector_pixels: tuple[int, int] = (256, 256)
    volume_extent_mm: tuple[float, float, float] = (409.6, 409.6, 409.6)

    def __post_init__(self):
        sid, sdd = self.source_to_isocenter_mm, self.source_to_detector_mm
        if not (sdd > sid > 0):
            raise ValueError(f"need source_to_detector > source_to_isocenter > 0, got {sdd}, {sid}")
        if min(self.detector_pixels) < 2:
            raise ValueError(f"detector_pixels must be >= 2, got {self.detector_pixels}")
        if min(self.detector_size_mm) <= 0:
            raise ValueError(f"detector_size_mm must be positive, got {self.detector_size_mm}")
        if min(self.volume_extent_mm) <= 0:
            raise ValueError(f"volume_extent_mm must be positive, got {self.volume_extent_mm}")
        if not np.isfinite(self.magnification):
            raise ValueError("magnification is not finite")

    @property
    def magnification(self) -> float:
        return self.source_to_detector_mm / self.source_to_isocenter_mm

    @property
    def pixel_size_mm(self) -> tuple[float, float]:
        return (self.detector_size_mm[0] / self.detector_pixels[0],
                self.detector_size_mm[1] / self.detector_pixels[1])

    def with_detector_pixels(self, n_u: int, n_v: int | None = None) -> "ScannerGeometry":
        """Same physical detector, resampled to a different pixel count."""
        return replace(self, detector_pixels=(int(n_u), int(n_v if n_v is not None else n_u)))

    def voxel_spacing(self, dims) -> np.ndarray:
        """Spacing of a grid with ``dims`` voxels filling the volume extent."""
        return np.asarray(self.volume_extent_mm, dtype=np.float64) / np.asarray(dims, dtype=np.float64)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "sid_mm": self.source_to_isocenter_mm,
            "sdd_mm": self.source_to_detector_mm,
            "det_px_u": self.detector_pixels[0],
            "det_px_v": self.detector_pixels[1],
            "det_mm_u": self.detector_size_mm[0],
            "det_mm_v": self.detector_size_mm[1],
            "vol_mm_x": self.volume_extent_mm[0],
            "vol_mm_y": self.volume_extent_mm[1],
            "vol_mm_z": self.volume_extent_mm[2],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScannerGeometry":
        missing = [k for k in GEOM_KEYS if k not in d]
        if missing:
            raise ValueError(f"geometry is missing keys: {', '.join(missing)}")
        extra = [k for k in d if k not in GEOM_KEYS]
        if extra:
            raise ValueError(f"unknown geometry keys: {', '.join(extra)}")
        return cls(
            source_to_isocenter_mm=float(d["sid_mm"]),
            source_to_detector_mm=float(d["sdd_mm"]),
            detector_size_mm=(float(d["det_mm_u"]), float(d["det_mm_v"])),
            detector_pixels=(int(d["det_px_u"]), int(d["det_px_v"])),
            volume_extent_mm=(float(d["vol_mm_x"]), float(d["vol_mm_y"]), float(d["vol_mm_z"])),
        )

    def save(self, path) -> None:
        lines = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in self.to_dict().items()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ScannerGeometry":
        return cls.from_dict(read_keyvalue(path))


def read_keyvalue(path) -> dict:
    """Parse a flat ``key=value`` file. Blank lines and ``#`` comments are skipped."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass(frozen=True)
class ViewAngleSet:
    angles_deg: tuple[float, ...]
    seed: int

    def __len__(self):
        return len(self.angles_deg)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.angles_deg, dtype=np.float64)


def sample_view_angles(m: int, seed: int, equiangular: bool = False) -> ViewAngleSet:
    """Draw ``m`` gantry angles in [0, 180) degrees, sorted ascending.

    ``equiangular=True`` gives ``180 * i / m`` instead of random draws.
    """
    if m < 1:
        raise ValueError(f"need at least one view, got M={m}")
    if equiangular:
        angles = 180.0 * np.arange(m) / m
    else:
        rng = np.random.default_rng(seed)
        angles = np.sort(rng.uniform(0.0, 180.0, size=m))
    return ViewAngleSet(tuple(float(a) for a in angles), int(seed))


def rotation_z(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_about_z(points, angle_deg: float) -> np.ndarray:
    """Rotate world points counter-clockwise by ``angle_deg`` about z."""
    return np.asarray(points, dtype=np.float64) @ rotation_z(angle_deg).T


def source_position(geom: ScannerGeometry, angle_deg: float) -> np.ndarray:
    return rotation_z(angle_deg) @ np.array([geom.source_to_isocenter_mm, 0.0, 0.0])


def project_point(geom: ScannerGeometry, angle_deg: float, p):
    """Project world points (mm) onto the detector of one view.

    Returns ``(uv, visible)`` where ``uv`` is ``(..., 2)`` in normalized
    detector coordinates ((0, 0) at the -u/-v corner) and ``visible`` flags
    hits that land on the detector in front of the source.
    """
    p = np.asarray(p, dtype=np.float64)
    q = p @ rotation_z(-angle_deg).T
    depth = geom.source_to_isocenter_mm - q[..., 0]
    at_source = (np.abs(depth) < 1e-12) & (np.abs(q[..., 1]) < 1e-12) & (np.abs(q[..., 2]) < 1e-12)
    if np.any(at_source):
        raise DegenerateRayError("query point coincides with the source position")
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = geom.source_to_detector_mm / depth
        u = q[..., 1] * scale / geom.detector_size_mm[0] + 0.5
        v = q[..., 2] * scale / geom.detector_size_mm[1] + 0.5
    uv = np.stack([u, v], axis=-1)
    visible = (depth > 0) & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    return uv, visible


def normalized_to_world(points, geom: ScannerGeometry, dims) -> np.ndarray:
    """Map normalized [-1, 1] coordinates to world mm.

    -1/+1 land on the outermost voxel centers of a ``dims`` grid that fills
    ``geom.volume_extent_mm``.
    """
    half = 0.5 * (np.asarray(dims, dtype=np.float64) - 1.0) * geom.voxel_spacing(dims)
    return np.asarray(points, dtype=np.float64) * half


def max_chord_mm(geom: ScannerGeometry) -> float:
    """Longest straight path through the volume box (its diagonal)."""
    return float(np.linalg.norm(geom.volume_extent_mm))
