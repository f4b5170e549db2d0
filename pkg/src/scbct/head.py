"""Per-point attenuation head and the point regression loss."""
from __future__ import annotations

import torch
import torch.nn as nn


class AttenuationHead(nn.Module):
    """Conv1d(k=1) -> BatchNorm -> ReLU -> Conv1d(k=1) -> sigmoid.

    Accepts (N, D) or (B, N, D) features and returns (N,) or (B, N) values
    strictly inside (0, 1).
    """

    def __init__(self, in_dim: int = 464, hidden: int = 128, momentum: float = 0.1):
        super().__init__()
        self.in_dim = in_dim
        self.conv1 = nn.Conv1d(in_dim, hidden, 1)
        self.bn = nn.BatchNorm1d(hidden, momentum=momentum)
        self.conv2 = nn.Conv1d(hidden, 1, 1)

    def forward(self, features):
        single = features.ndim == 2
        if single:
            features = features[None]
        if features.shape[-1] != self.in_dim:
            raise ValueError(f"head expects {self.in_dim}-dim features, got {features.shape[-1]}")
        x = features.transpose(1, 2)  # (B, D, N)
        x = self.conv2(torch.relu(self.bn(self.conv1(x))))[:, 0]
        # keep the result representable strictly inside (0, 1) at saturation
        eps = torch.finfo(x.dtype).eps / 2
        out = torch.sigmoid(x).clamp(eps, 1.0 - eps)
        return out[0] if single else out


def predict_attenuation(head: AttenuationHead, features):
    return head(features)


def mse_loss(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(gt.shape)}")
    return torch.mean((pred - gt) ** 2)
