"""Forward projection (DRR line integrals) and voxel-driven backprojection.

Detector images are ``(n_v, n_u)`` arrays: rows run along v, columns along u,
so a C-order ravel is u-fastest.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .dataio import Volume
from .geometry import (
    ScannerGeometry, ViewAngleSet, project_point, rotation_z, source_position,
)

BACKPROJECT_WEIGHTINGS = ("none", "fdk", "adjoint")


@dataclass(frozen=True)
class ProjectionSet:
    images: np.ndarray  # (M, n_v, n_u) float32 line integrals
    angles_deg: np.ndarray  # (M,)

    def __post_init__(self):
        if self.images.ndim != 3 or len(self.images) != len(self.angles_deg):
            raise ValueError(
                f"need (M, n_v, n_u) images matching {len(self.angles_deg)} angles, got {self.images.shape}")

    def __len__(self):
        return len(self.angles_deg)


def detector_pixel_centers(geom: ScannerGeometry, angle_deg: float) -> np.ndarray:
    """World positions (mm) of every detector pixel center, shape (n_v, n_u, 3)."""
    n_u, n_v = geom.detector_pixels
    su, sv = geom.detector_size_mm
    u = ((np.arange(n_u) + 0.5) / n_u - 0.5) * su
    v = ((np.arange(n_v) + 0.5) / n_v - 0.5) * sv
    vv, uu = np.meshgrid(v, u, indexing="ij")
    x = np.full_like(uu, geom.source_to_isocenter_mm - geom.source_to_detector_mm)
    local = np.stack([x, uu, vv], axis=-1)
    return local @ rotation_z(angle_deg).T


def _ray_box(origin, directions, half):
    """Slab-method entry/exit parameters for rays against the box [-half, half]."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t1 = (-half - origin) * inv
        t2 = (half - origin) * inv
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    parallel = directions == 0
    inside = np.abs(origin) <= half
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_near = np.max(np.minimum(t1, t2), axis=-1)
    t_far = np.min(np.maximum(t1, t2), axis=-1)
    return np.maximum(t_near, 0.0), t_far


def default_step_mm(volume: Volume) -> float:
    return 0.5 * float(min(volume.spacing_mm))


def render_drr(volume: Volume, geom: ScannerGeometry, angle_deg: float,
               step_mm: float | None = None) -> np.ndarray:
    """Line integrals of attenuation from the source to every detector pixel.

    Uniform ray marching with midpoint samples and trilinear interpolation
    (border-clamped inside the volume box, zero outside it).
    """
    if step_mm is None:
        step_mm = default_step_mm(volume)
    if step_mm <= 0:
        raise ValueError(f"step_mm must be positive, got {step_mm}")
    spacing = np.asarray(volume.spacing_mm, dtype=np.float64)
    dims = np.asarray(volume.shape, dtype=np.float64)
    half = 0.5 * dims * spacing

    src = source_position(geom, angle_deg)
    pix = detector_pixel_centers(geom, angle_deg).reshape(-1, 3)
    dirs = pix - src
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t0, t1 = _ray_box(src, dirs, half)
    length = np.where(t1 > t0, t1 - t0, 0.0)

    n_steps = np.ceil(length / step_mm).astype(np.int64)
    hit = np.flatnonzero(n_steps > 0)
    out = np.zeros(len(pix), dtype=np.float64)
    if len(hit) == 0:
        return out.reshape(geom.detector_pixels[1], geom.detector_pixels[0]).astype(np.float32)

    data = np.asarray(volume.data, dtype=np.float64)
    ds = length[hit] / n_steps[hit]
    start = src + dirs[hit] * t0[hit, None]
    d_hit = dirs[hit]
    nh = n_steps[hit]
    center = 0.5 * (dims - 1.0)
    acc = np.zeros(len(hit))
    for k in range(int(nh.max())):
        active = np.flatnonzero(nh > k)
        pos = start[active] + d_hit[active] * ((k + 0.5) * ds[active])[:, None]
        idx = pos / spacing + center
        acc[active] += map_coordinates(data, idx.T, order=1, mode="nearest", prefilter=False)
    out[hit] = acc * ds
    return out.reshape(geom.detector_pixels[1], geom.detector_pixels[0]).astype(np.float32)


def voxel_centers_world(shape, spacing_mm) -> np.ndarray:
    """World coordinates (mm) of voxel centers, shape (nx, ny, nz, 3)."""
    axes = [(np.arange(n) - 0.5 * (n - 1)) * s for n, s in zip(shape, spacing_mm)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def sample_image(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup in a detector image at normalized (u, v), border-clamped."""
    n_v, n_u = image.shape
    cols = uv[..., 0] * n_u - 0.5
    rows = uv[..., 1] * n_v - 0.5
    coords = np.stack([rows.ravel(), cols.ravel()])
    vals = map_coordinates(np.asarray(image, dtype=np.float64), coords, order=1,
                           mode="nearest", prefilter=False)
    return vals.reshape(uv.shape[:-1])


def backproject(image: np.ndarray, geom: ScannerGeometry, angle_deg: float,
                shape, spacing_mm, weighting: str = "none") -> np.ndarray:
    """Smear one detector image back over a voxel grid.

    ``weighting``:
      * ``"none"``    plain bilinear lookup at each voxel's projection
      * ``"fdk"``     inverse-square weight ``(sid / depth)**2``
      * ``"adjoint"`` voxel volume * magnification**2 / (pixel area * cos(obliquity)),
        which makes this the discrete adjoint of :func:`render_drr`
    Voxels whose projection misses the detector get zero.
    """
    image = np.asarray(image)
    n_u, n_v = geom.detector_pixels
    if image.shape != (n_v, n_u):
        raise ValueError(f"image shape {image.shape} does not match detector (n_v, n_u)=({n_v}, {n_u})")
    if weighting not in BACKPROJECT_WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    pts = voxel_centers_world(shape, spacing_mm)
    uv, visible = project_point(geom, angle_deg, pts)
    vals = sample_image(image, np.where(visible[..., None], uv, 0.5))
    vals = np.where(visible, vals, 0.0)
    if weighting == "none":
        return vals
    q = pts @ rotation_z(-angle_deg).T
    depth = geom.source_to_isocenter_mm - q[..., 0]
    if weighting == "fdk":
        return vals * (geom.source_to_isocenter_mm / depth) ** 2
    sdd = geom.source_to_detector_mm
    u_mm = (uv[..., 0] - 0.5) * geom.detector_size_mm[0]
    v_mm = (uv[..., 1] - 0.5) * geom.detector_size_mm[1]
    cos_obl = sdd / np.sqrt(sdd**2 + u_mm**2 + v_mm**2)
    pu, pv = geom.pixel_size_mm
    voxel_volume = float(np.prod(spacing_mm))
    return vals * voxel_volume * (sdd / depth) ** 2 / (pu * pv * cos_obl)


def simulate_projections(volume: Volume, geom: ScannerGeometry, angles,
                         step_mm: float | None = None) -> ProjectionSet:
    if isinstance(angles, ViewAngleSet):
        angles = angles.as_array()
    angles = np.asarray(angles, dtype=np.float64)
    images = np.stack([render_drr(volume, geom, a, step_mm) for a in angles])
    return ProjectionSet(images, angles)


# -- on-disk projection sets --------------------------------------------

def save_projections(proj: ProjectionSet, directory, geom: ScannerGeometry | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "angles.txt").write_text("".join(f"{float(a)!r}\n" for a in proj.angles_deg))
    for i, img in enumerate(proj.images):
        (d / f"view_{i:04d}.raw").write_bytes(np.asarray(img, dtype="<f4").tobytes(order="C"))
    if geom is not None:
        geom.save(d / "geom.cfg")
    return d


def load_projections(directory, geom: ScannerGeometry) -> ProjectionSet:
    d = Path(directory)
    angles = np.array([float(t) for t in (d / "angles.txt").read_text().split()])
    n_u, n_v = geom.detector_pixels
    images = []
    for i in range(len(angles)):
        raw = (d / f"view_{i:04d}.raw").read_bytes()
        if len(raw) != 4 * n_u * n_v:
            raise ValueError(
                f"view_{i:04d}.raw has {len(raw)} bytes; geometry expects {n_u}x{n_v} float32")
        images.append(np.frombuffer(raw, dtype="<f4").reshape(n_v, n_u))
    return ProjectionSet(np.stack(images).astype(np.float32), angles)
