"""Point-wise weights, the pooled normal regression, and training losses."""
from __future__ import annotations

import torch
import torch.nn as nn

GAMMA_SIN = 0.1
GAMMA_WT = 1.0
DELTA_FLOOR = 0.0025
DELTA_SCALE = 0.3
# keeps c + sigmoid strictly inside (c, c + 1) in float32
LOGIT_CLAMP = 15.0


class NormalHead(nn.Module):
    def __init__(self, dim=128, weight_floor=0.01):
        super().__init__()
        mid = max(1, dim // 2)
        self.weight_floor = weight_floor
        self.phi = nn.Sequential(nn.Linear(dim, mid), nn.ReLU(), nn.Linear(mid, 1))
        self.mapping = nn.Sequential(nn.Linear(dim, mid), nn.ReLU(), nn.Linear(mid, 3))

    def point_weights(self, surface):
        logits = self.phi(surface).squeeze(-1).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        return self.weight_floor + torch.sigmoid(logits)

    def predict_normal(self, surface, weights):
        """Returns ``(unit normals B x 3, degenerate mask B)``.

        Rows where the mapping outputs an exact zero vector cannot be
        normalised; they are flagged and set to +z.
        """
        pooled = (weights.unsqueeze(-1) * surface).max(dim=-2).values
        raw = self.mapping(pooled)
        norm = raw.norm(dim=-1, keepdim=True)
        degenerate = norm.squeeze(-1) == 0
        if degenerate.any():
            fallback = torch.zeros_like(raw)
            fallback[..., 2] = 1.0
            raw = torch.where(degenerate.unsqueeze(-1), fallback, raw)
            norm = torch.where(degenerate.unsqueeze(-1), torch.ones_like(norm), norm)
        return raw / norm, degenerate

    def forward(self, surface):
        w = self.point_weights(surface)
        n, _ = self.predict_normal(surface, w)
        return n, w


def sin_loss(n_hat, n_gt):
    """``|n_hat x n_gt|`` per row; blind to the sign of either vector."""
    return torch.linalg.norm(torch.linalg.cross(n_hat, n_gt, dim=-1), dim=-1)


def weight_targets(coords, n_gt, floor=DELTA_FLOOR, scale=DELTA_SCALE):
    """Target weights from distances to the ground-truth tangent plane.

    ``coords``: ... x M x 3 (aligned frame, query at the origin);
    ``n_gt``: ... x 3. Returns ``(w_hat ... x M, delta ...)``.
    """
    d = torch.abs(torch.einsum("...mi,...i->...m", coords, n_gt))
    delta = torch.clamp(scale * (d * d).mean(dim=-1), min=floor)
    return torch.exp(-(d * d) / delta.unsqueeze(-1)), delta


def weight_loss(w, w_hat):
    return ((w_hat - w) ** 2).mean(dim=-1)


def total_loss(l_sin, l_wt, gamma_sin=GAMMA_SIN, gamma_wt=GAMMA_WT):
    return gamma_sin * l_sin + gamma_wt * l_wt
