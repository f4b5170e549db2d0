"""Neighbor-aware point transformer.

Points carry their fused image features; a learnable positional encoding of
the coordinates is added once, then ``layers`` blocks of multi-head attention
restricted to each point's k nearest neighbours refine the features. The
attention logits get an additive log-Gaussian distance bias, so with equal
query/key terms closer neighbours always win.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.spatial import cKDTree


class DegenerateNeighborhoodError(ValueError):
    """Every neighbour of some point was excluded (all adjacency weights zero)."""


@dataclass
class PointTransformerConfig:
    layers: int = 2
    k: int = 3
    heads: int = 4
    model_dim: int = 256
    sigma: float = 0.1
    ffn_dim: int = 512
    pe_hidden: int = 128
    norm: str = "prenorm"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by {self.heads} heads")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.norm not in ("prenorm", "postnorm"):
            raise ValueError(f"norm must be 'prenorm' or 'postnorm', got {self.norm!r}")


@dataclass(frozen=True)
class NeighborGraph:
    indices: np.ndarray  # (N, k) int64, column 0 is the point itself
    distances: np.ndarray  # (N, k) float64, ascending per row


def pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def knn(points, k: int) -> NeighborGraph:
    """Exact self-inclusive k-nearest neighbours.

    Each row is the point itself followed by its k-1 closest other points;
    equal distances are ordered by ascending index.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = len(pts)
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rows = np.arange(n)
    if k == 1:
        return NeighborGraph(rows[:, None].copy(), np.zeros((n, 1)))

    tree = cKDTree(pts)
    kq = min(k + 1, n)
    _, cand = tree.query(pts, k=kq)
    cand = np.asarray(cand).reshape(n, kq)
    d = pairwise_distance(pts[cand], pts[:, None, :])
    d[cand == rows[:, None]] = -1.0  # self sorts first
    # lexsort: last key is primary -> (distance, index)
    order = np.lexsort((cand, d), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)

    # a tie across the k-th boundary means the tree's pick may be arbitrary
    boundary = d[:, k - 1]
    if kq > k:
        suspect = np.flatnonzero(d[:, k] <= boundary * (1 + 1e-9) + 1e-300)
    else:
        suspect = np.empty(0, dtype=np.int64)
    idx = cand[:, :k].copy()
    dist = d[:, :k].copy()
    for i in suspect:
        r = boundary[i] * (1 + 1e-9) + 1e-300
        near = np.asarray(tree.query_ball_point(pts[i], r), dtype=np.int64)
        dn = pairwise_distance(pts[near], pts[i])
        dn[near == i] = -1.0
        o = np.lexsort((near, dn))[:k]
        idx[i], dist[i] = near[o], dn[o]
    dist[:, 0] = 0.0
    return NeighborGraph(idx, dist)


def gaussian_weights(distances, sigma: float):
    """Adjacency weights exp(-d^2 / (2 sigma^2))."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if isinstance(distances, torch.Tensor):
        return torch.exp(-distances**2 / (2.0 * sigma**2))
    d = np.asarray(distances, dtype=np.float64)
    return np.exp(-d**2 / (2.0 * sigma**2))


def log_weight_bias(weights) -> torch.Tensor:
    """log(w) with zero weights mapped to -inf (neighbour excluded)."""
    w = torch.as_tensor(weights)
    if bool((w < 0).any()):
        raise ValueError("adjacency weights must be non-negative")
    bias = torch.log(w)
    if bool(torch.isinf(bias).all(dim=-1).any()):
        raise DegenerateNeighborhoodError("a point has no neighbour with positive weight")
    return bias


class PositionalEncoding(nn.Module):
    """Two-layer ReLU map from 3D coordinates to the feature width."""

    def __init__(self, out_dim: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(3, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, points):
        return self.fc2(torch.relu(self.fc1(points)))


class NeighborAttention(nn.Module):
    """Multi-head attention over each point's neighbour list.

    ``forward`` returns the output projection of the attended values (the
    residual is added by the enclosing layer) and the (N, heads, k) weights.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"feature dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, indices, bias):
        n, d = x.shape
        h, dk = self.heads, d // self.heads
        idx = torch.as_tensor(indices, dtype=torch.long, device=x.device)
        q = self.q(x).view(n, h, dk)
        key = self.k(x)[idx].view(n, -1, h, dk)
        val = self.v(x)[idx].view(n, -1, h, dk)
        scores = torch.einsum("nhd,nkhd->nhk", q, key) / math.sqrt(dk)
        scores = scores + bias.to(x.dtype)[:, None, :]
        attn = torch.softmax(scores, dim=-1)
        out = torch.einsum("nhk,nkhd->nhd", attn, val).reshape(n, d)
        return self.proj(out), attn


def neighbor_attention(features, graph: NeighborGraph, weights, heads: int,
                       module: NeighborAttention | None = None):
    """features + NeighborAttention(features); returns (output, attention)."""
    if features.shape[-1] % heads:
        raise ValueError(f"feature dim {features.shape[-1]} not divisible by {heads} heads")
    if module is None:
        module = NeighborAttention(features.shape[-1], heads).to(features.dtype)
    out, attn = module(features, graph.indices, log_weight_bias(weights))
    return features + out, attn


class PointTransformerLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, norm: str = "prenorm"):
        super().__init__()
        self.prenorm = norm == "prenorm"
        self.norm1 = nn.LayerNorm(dim)
        self.attn = NeighborAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))

    def forward(self, x, indices, bias):
        if self.prenorm:
            x = x + self.attn(self.norm1(x), indices, bias)[0]
            return x + self.ffn(self.norm2(x))
        x = self.norm1(x + self.attn(x, indices, bias)[0])
        return self.norm2(x + self.ffn(x))


class PointTransformer(nn.Module):
    def __init__(self, cfg: PointTransformerConfig | None = None, in_dim: int = 464):
        super().__init__()
        cfg = cfg or PointTransformerConfig()
        self.cfg = cfg
        self.pe = PositionalEncoding(in_dim, cfg.pe_hidden)
        self.in_proj = nn.Linear(in_dim, cfg.model_dim)
        self.layers = nn.ModuleList(
            PointTransformerLayer(cfg.model_dim, cfg.heads, cfg.ffn_dim, cfg.norm)
            for _ in range(cfg.layers))
        self.out_proj = nn.Linear(cfg.model_dim, in_dim)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        # the positional encoding sees raw coordinates; fan-in init keeps it from vanishing
        for m in (self.pe.fc1, self.pe.fc2):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))

    def graph(self, points) -> tuple[NeighborGraph, torch.Tensor]:
        pts = points.detach().cpu().numpy() if isinstance(points, torch.Tensor) else np.asarray(points)
        g = knn(pts, self.cfg.k)
        bias = log_weight_bias(torch.from_numpy(gaussian_weights(g.distances, self.cfg.sigma)))
        return g, bias

    def forward(self, points, fused, graph=None):
        """Refine (N, in_dim) fused features of (N, 3) points."""
        if graph is None:
            graph = self.graph(points)
        g, bias = graph
        pts = torch.as_tensor(points, dtype=fused.dtype)
        x = self.in_proj(fused + self.pe(pts))
        idx = torch.from_numpy(g.indices)
        for layer in self.layers:
            x = layer(x, idx, bias)
        return self.out_proj(x)

    def forward_chunked(self, points, fused, chunk: int = 65536):
        """Same result as :meth:`forward`, evaluated layer by layer in row chunks.

        The neighbour graph spans all points, so chunk boundaries do not
        change any neighbourhood.
        """
        g, bias = self.graph(points)
        idx = torch.from_numpy(g.indices)
        pts = torch.as_tensor(points, dtype=fused.dtype)
        n = len(fused)
        x = torch.cat([self.in_proj(fused[s:s + chunk] + self.pe(pts[s:s + chunk]))
                       for s in range(0, n, chunk)])
        for layer in self.layers:
            x = torch.cat([_layer_rows(layer, x, idx, bias, s, min(s + chunk, n))
                           for s in range(0, n, chunk)])
        return torch.cat([self.out_proj(x[s:s + chunk]) for s in range(0, n, chunk)])


def _layer_rows(layer: PointTransformerLayer, x, idx, bias, start, stop):
    """Evaluate ``layer`` for rows [start, stop) of x, reading neighbours globally."""
    rows_idx = idx[start:stop]
    need = torch.unique(torch.cat([torch.arange(start, stop), rows_idx.reshape(-1)]))
    remap = torch.full((len(x),), -1, dtype=torch.long)
    remap[need] = torch.arange(len(need))
    local_idx = remap[rows_idx]
    xs = x[need]
    own = remap[torch.arange(start, stop)]
    att = layer.attn
    b = bias[start:stop]
    if layer.prenorm:
        h = layer.norm1(xs)
        out = _attend_rows(att, h, own, local_idx, b)
        y = x[start:stop] + out
        return y + layer.ffn(layer.norm2(y))
    out = _attend_rows(att, xs, own, local_idx, b)
    y = layer.norm1(x[start:stop] + out)
    return layer.norm2(y + layer.ffn(y))


def _attend_rows(att: NeighborAttention, xs, own, local_idx, bias):
    n, d = len(own), xs.shape[-1]
    h, dk = att.heads, d // att.heads
    q = att.q(xs[own]).view(n, h, dk)
    kv_k = att.k(xs)
    kv_v = att.v(xs)
    key = kv_k[local_idx].view(n, -1, h, dk)
    val = kv_v[local_idx].view(n, -1, h, dk)
    scores = torch.einsum("nhd,nkhd->nhk", q, key) / math.sqrt(dk) + bias.to(xs.dtype)[:, None, :]
    out = torch.einsum("nhk,nkhd->nhd", torch.softmax(scores, dim=-1), val).reshape(n, d)
    return att.proj(out)
