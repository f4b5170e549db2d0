"""Classical reconstructions used as comparison rows: FDK and SART."""
from __future__ import annotations

import numpy as np

from .dataio import Volume
from .geometry import ScannerGeometry
from .projector import ProjectionSet, backproject, render_drr


def ramp_kernel_response(n: int, spacing: float, hann: bool = False) -> np.ndarray:
    """Frequency response of the discrete Ram-Lak filter for length-``n`` rows.

    Built from the band-limited spatial kernel on a zero-padded power-of-two
    grid (at least 2n) so the DC term is correct and there is no wrap-around.
    """
    size = 1 << int(np.ceil(np.log2(max(2 * n, 2))))
    k = np.arange(size)
    k = np.where(k < size // 2, k, k - size)
    h = np.zeros(size)
    h[k == 0] = 1.0 / (4.0 * spacing**2)
    odd = (k % 2) == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    resp = np.real(np.fft.fft(h)) * spacing
    if hann:
        freqs = np.fft.fftfreq(size)
        resp *= 0.5 * (1.0 + np.cos(2 * np.pi * freqs))
    return resp


def ramp_filter_rows(image: np.ndarray, spacing: float, hann: bool = False) -> np.ndarray:
    """Apply the ramp filter along u (the last axis) of a (n_v, n_u) image."""
    n = image.shape[-1]
    resp = ramp_kernel_response(n, spacing, hann)
    padded = np.zeros(image.shape[:-1] + (len(resp),))
    padded[..., :n] = image
    return np.real(np.fft.ifft(np.fft.fft(padded, axis=-1) * resp, axis=-1))[..., :n]


def fdk_reconstruct(projections: ProjectionSet, geom: ScannerGeometry, shape,
                    spacing_mm=None, hann: bool = False) -> Volume:
    """Feldkamp-Davis-Kress reconstruction over a half scan.

    Cosine weighting, row-wise ramp filtering on the isocenter-scaled
    detector, inverse-square weighted backprojection, scaled by pi / M.
    No short-scan redundancy weights are applied.
    """
    if spacing_mm is None:
        spacing_mm = tuple(geom.voxel_spacing(shape))
    m = len(projections)
    if m < 1:
        raise ValueError("need at least one projection")
    n_u, n_v = geom.detector_pixels
    pu, pv = geom.pixel_size_mm
    mag = geom.magnification
    u = ((np.arange(n_u) + 0.5) / n_u - 0.5) * geom.detector_size_mm[0]
    v = ((np.arange(n_v) + 0.5) / n_v - 0.5) * geom.detector_size_mm[1]
    sdd = geom.source_to_detector_mm
    cos_w = sdd / np.sqrt(sdd**2 + u[None, :] ** 2 + v[:, None] ** 2)

    vol = np.zeros(tuple(shape))
    for image, angle in zip(projections.images, projections.angles_deg):
        filtered = ramp_filter_rows(np.asarray(image, dtype=np.float64) * cos_w, pu / mag, hann)
        vol += backproject(filtered, geom, float(angle), shape, spacing_mm, weighting="fdk")
    vol *= np.pi / m
    return Volume(vol.astype(np.float32), tuple(float(s) for s in spacing_mm))


def sart_reconstruct(projections: ProjectionSet, geom: ScannerGeometry, shape,
                     spacing_mm=None, iterations: int = 10, relaxation: float = 0.5,
                     step_mm: float | None = None, callback=None) -> Volume:
    """Simultaneous algebraic reconstruction, one view per sub-iteration.

    Per view: residual = measured - forward(current), divided by the ray
    lengths through the volume box (forward projection of ones), spread back
    by bilinear lookup at each voxel's projection, relaxed and clamped at 0.
    ``callback(iteration, volume_data)`` runs after every full sweep.
    """
    if not 0.0 < relaxation <= 1.0:
        raise ValueError(f"relaxation must lie in (0, 1], got {relaxation}")
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    if spacing_mm is None:
        spacing_mm = tuple(geom.voxel_spacing(shape))
    spacing_mm = tuple(float(s) for s in spacing_mm)
    x = np.zeros(tuple(shape))
    if iterations == 0:
        return Volume(x.astype(np.float32), spacing_mm)

    ones = Volume(np.ones(tuple(shape)), spacing_mm)
    ray_len = []
    for angle in projections.angles_deg:
        r = render_drr(ones, geom, float(angle), step_mm).astype(np.float64)
        ray_len.append(np.where(r < 1e-8, 1.0, r))

    for it in range(iterations):
        for image, angle, length in zip(projections.images, projections.angles_deg, ray_len):
            current = render_drr(Volume(x, spacing_mm), geom, float(angle), step_mm)
            resid = (np.asarray(image, dtype=np.float64) - current) / length
            x += relaxation * backproject(resid, geom, float(angle), shape, spacing_mm, weighting="none")
            np.maximum(x, 0.0, out=x)
        if callback is not None:
            callback(it + 1, x)
    return Volume(x.astype(np.float32), spacing_mm)
