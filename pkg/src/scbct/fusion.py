"""Per-point feature querying across views and scales.

For each query point and pyramid level: bilinear lookup at the point's
projection in every view, elementwise max over views, then concatenation of
the levels in pyramid order.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .encoder2d import PYRAMID_CHANNELS
from .geometry import ScannerGeometry, normalized_to_world, project_point

FUSED_DIM = sum(PYRAMID_CHANNELS)
assert FUSED_DIM == 464


class FusionDiagnostics:
    """Counts query points that project outside every detector."""

    def __init__(self):
        self.invisible_points = 0

    def reset(self):
        self.invisible_points = 0


diagnostics = FusionDiagnostics()


def bilinear_sample_feature(fmap: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample ``fmap`` (C, H, W) or (M, C, H, W) at normalized ``uv``.

    ``uv`` is (N, 2) or (M, N, 2) in [0, 1]^2 with cell centers at
    ((i + 0.5) / W, (j + 0.5) / H). Returns (N, C) or (M, N, C); outside
    queries are clamped to the border.
    """
    single = fmap.ndim == 3
    if single:
        fmap, uv = fmap[None], uv[None]
    grid = (uv * 2.0 - 1.0).to(fmap.dtype)[:, :, None, :]  # (M, N, 1, 2)
    out = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="border", align_corners=False)
    out = out[..., 0].transpose(1, 2)  # (M, N, C)
    return out[0] if single else out


def fuse_views_max(per_view: torch.Tensor) -> torch.Tensor:
    """Elementwise max over the leading (view) axis.

    Ties send the gradient to the lowest view index.
    """
    if per_view.shape[0] == 0:
        raise ValueError("cannot fuse zero views")
    # argmax returns the first maximal index, which fixes the tie rule
    idx = torch.argmax(per_view.detach(), dim=0, keepdim=True)
    return torch.gather(per_view, 0, idx)[0]


def concat_scales(*features: torch.Tensor, channels=PYRAMID_CHANNELS) -> torch.Tensor:
    if len(features) != len(channels):
        raise ValueError(f"expected {len(channels)} scale features, got {len(features)}")
    for s, (f, c) in enumerate(zip(features, channels), 1):
        if f.shape[-1] != c:
            raise ValueError(f"scale {s} feature has {f.shape[-1]} channels, expected {c}")
    return torch.cat(features, dim=-1)


def project_to_views(points, geom: ScannerGeometry, angles, grid_dims):
    """Normalized query points -> (M, N, 2) detector coordinates and (M, N) visibility."""
    world = normalized_to_world(points, geom, grid_dims)
    uvs, vis = zip(*(project_point(geom, float(a), world) for a in np.asarray(angles)))
    return np.stack(uvs), np.stack(vis)


def fuse_pyramids(pyramids, uv: torch.Tensor, scales=(1, 2, 3, 4)) -> torch.Tensor:
    """Fused (N, sum C_s) features for one scan from precomputed view coordinates."""
    parts = []
    for s in scales:
        per_view = bilinear_sample_feature(pyramids[s - 1], uv)
        parts.append(fuse_views_max(per_view))
    return torch.cat(parts, dim=-1)


def query_point_features(pyramids, geom: ScannerGeometry, angles, points, grid_dims,
                         scales=(1, 2, 3, 4)) -> torch.Tensor:
    """Project, sample, max-fuse and concatenate features for (N, 3) points.

    ``pyramids`` is the encoder output for one scan: four tensors (M, C_s, H_s, W_s).
    Row i of the result belongs to point i.
    """
    if len(pyramids[0]) != len(angles):
        raise ValueError(f"{len(pyramids[0])} encoded views but {len(angles)} angles")
    coords = getattr(points, "coords", points)
    uv, vis = project_to_views(coords, geom, angles, grid_dims)
    diagnostics.invisible_points += int(np.count_nonzero(~vis.any(axis=0)))
    uv = torch.as_tensor(np.nan_to_num(uv, nan=0.5), dtype=pyramids[0].dtype)
    return fuse_pyramids(pyramids, uv, scales)
