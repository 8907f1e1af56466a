"""Hierarchical patch features with attention-driven fusion across scales.

Scales are nested prefixes of the distance-ordered patch: ``N``, ``N/2``
and ``N/4`` rows. Each fusion stage condenses scale ``s`` into a global
vector and injects it into the first ``N_{s+1}`` rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def knn(coords: torch.Tensor, k: int) -> torch.Tensor:
    """Indices (batch x M x k) of the k nearest rows by ascending distance, self excluded."""
    m = coords.shape[-2]
    if k >= m:
        raise ValueError(f"k={k} must be smaller than the {m} points")
    d = torch.cdist(coords, coords)
    d.diagonal(dim1=-2, dim2=-1).fill_(float("inf"))
    return d.topk(k, dim=-1, largest=False, sorted=True).indices


def gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``x``: B x N x D, ``idx``: B x M x k  ->  B x M x k x D."""
    b, m, k = idx.shape
    flat = idx.reshape(b, m * k, 1).expand(-1, -1, x.shape[-1])
    return torch.gather(x, 1, flat).reshape(b, m, k, x.shape[-1])


class EdgeLayer(nn.Module):
    """``max_j relu(W_c x_i + W_n (x_j - x_i) + b)`` over the k neighbours j.

    Computed as ``relu(W' x_i + b + max_j W_n x_j)`` with ``W' = W_c - W_n``,
    which is exact because relu is monotone.
    """

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.center = nn.Linear(in_dim, out_dim)
        self.neighbor = nn.Linear(in_dim, out_dim, bias=False)

    def forward(self, x, idx):
        nb = gather_rows(self.neighbor(x), idx).max(dim=2).values
        return F.relu(self.center(x) + nb)


class DenseBlock(nn.Module):
    def __init__(self, in_dim, growth, n_layers=2):
        super().__init__()
        self.layers = nn.ModuleList(EdgeLayer(in_dim + i * growth, growth) for i in range(n_layers))
        self.out_dim = in_dim + n_layers * growth

    def forward(self, x, idx):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=-1), idx))
        return torch.cat(feats, dim=-1)


class ScaleEncoder(nn.Module):
    """Densely connected per-point transforms with k-neighbour aggregation."""

    def __init__(self, in_dim, out_dim, growth=32, n_blocks=2, n_layers=2):
        super().__init__()
        blocks, trans = [], []
        dim = in_dim
        for _ in range(n_blocks):
            block = DenseBlock(dim, growth, n_layers)
            blocks.append(block)
            trans.append(nn.Linear(block.out_dim, out_dim))
            dim = out_dim
        self.blocks = nn.ModuleList(blocks)
        self.trans = nn.ModuleList(trans)
        self.out_dim = out_dim

    def forward(self, x, idx):
        if x.shape[1] != idx.shape[1]:
            raise ValueError(f"{x.shape[1]} feature rows but {idx.shape[1]} neighbour rows")
        for block, tr in zip(self.blocks, self.trans):
            x = F.relu(tr(block(x, idx)))
        return x


def encode_scale(encoder: ScaleEncoder, x: torch.Tensor, coords: torch.Tensor, k: int) -> torch.Tensor:
    if x.shape[-2] != coords.shape[-2]:
        raise ValueError(f"{x.shape[-2]} input rows but {coords.shape[-2]} coordinates")
    return encoder(x, knn(coords, k))


@dataclass
class AttentionState:
    q: torch.Tensor       # B x N_s x D
    v: torch.Tensor       # B x N_s x D
    a: torch.Tensor       # B x N_s, sums to 1 over points


def softmax_scores(q: torch.Tensor) -> torch.Tensor:
    """Softmax over points for each channel, averaged over channels."""
    return torch.softmax(q, dim=-2).mean(dim=-1)


def max_scores(q: torch.Tensor) -> torch.Tensor:
    """Per-point maximum over channels of the point-softmax (max-fusion variant)."""
    return torch.softmax(q, dim=-2).max(dim=-1).values


def attention_scores(features, q_proj, v_proj, reduce=softmax_scores) -> AttentionState:
    q = q_proj(features)
    v = v_proj(features)
    return AttentionState(q, v, reduce(q))


def weighted_global(state: AttentionState, psi=None, lam=None) -> torch.Tensor:
    """``psi(v^T a) * lam`` with identity ``psi`` and unit ``lam`` by default."""
    g = torch.einsum("...nd,...n->...d", state.v, state.a)
    if psi is not None:
        g = psi(g)
    if lam is not None:
        g = g * lam
    return g


def fuse_scale(global_vec, features, n_next, theta) -> torch.Tensor:
    """``theta([global : F_i])`` for the first ``n_next`` rows of ``features``."""
    if n_next > features.shape[-2]:
        raise ValueError(f"cannot keep {n_next} of {features.shape[-2]} rows")
    if global_vec.shape[:-1] != features.shape[:-2]:
        raise ValueError("global vector and features disagree on batch shape")
    sliced = features[..., :n_next, :]
    dup = global_vec.unsqueeze(-2).expand(*sliced.shape[:-1], global_vec.shape[-1])
    return theta(torch.cat([dup, sliced], dim=-1))


class FusionStage(nn.Module):
    """One hierarchical fusion step ``F_s -> F_{s+1}``.

    mode ``attention``: mean-of-softmax scores with learnable gate (init 0.1).
    mode ``max``: plain point-wise max of ``F_s`` as the global vector.
    mode ``eq18max``: channel-max of the softmax scores, no gate.
    """

    def __init__(self, in_dim, out_dim, global_dim=128, mode="attention", lam_init=0.1):
        super().__init__()
        self.mode = mode
        if mode in ("attention", "eq18max"):
            self.q_proj = nn.Linear(in_dim, in_dim)
            self.v_proj = nn.Linear(in_dim, in_dim)
            self.psi = nn.Sequential(nn.Linear(in_dim, global_dim), nn.ReLU(), nn.Linear(global_dim, global_dim))
            gdim = global_dim
        elif mode == "max":
            gdim = in_dim
        else:
            raise ValueError(f"unknown fusion mode {mode!r}")
        if mode == "attention":
            self.lam = nn.Parameter(torch.tensor(lam_init))
        self.theta = nn.Sequential(nn.Linear(gdim + in_dim, out_dim), nn.ReLU(),
                                   nn.Linear(out_dim, out_dim), nn.ReLU())

    def global_vector(self, features):
        if self.mode == "max":
            return features.max(dim=-2).values
        reduce = softmax_scores if self.mode == "attention" else max_scores
        state = attention_scores(features, self.q_proj, self.v_proj, reduce)
        return weighted_global(state, self.psi, self.lam if self.mode == "attention" else None)

    def forward(self, features, n_next):
        return fuse_scale(self.global_vector(features), features, n_next, self.theta)


def max_fuse(features, n_next, theta) -> torch.Tensor:
    return fuse_scale(features.max(dim=-2).values, features, n_next, theta)


def relative_positions(coords: torch.Tensor, k: int) -> torch.Tensor:
    """Per point: k rows of ``(neighbour - point, distance)``; B x M x k x 4."""
    idx = knn(coords, k)
    rel = gather_rows(coords, idx) - coords.unsqueeze(2)
    return torch.cat([rel, rel.norm(dim=-1, keepdim=True)], dim=-1)


class LocalCode(nn.Module):
    def __init__(self, c_c=64, k=16, hidden=32):
        super().__init__()
        self.k = k
        self.embed = nn.Sequential(nn.Linear(4, hidden), nn.ReLU(), nn.Linear(hidden, c_c), nn.ReLU())

    def forward(self, coords):
        return self.embed(relative_positions(coords, self.k))


@dataclass
class FeatureHierarchy:
    scales: list[int]
    features: list[torch.Tensor]
    fused_G: torch.Tensor      # B x M x C_G
    local_C: torch.Tensor      # B x M x k x C_C


class FeatureEncoder(nn.Module):
    def __init__(self, patch_size=700, c_g=128, c_c=64, k=16, fusion="attention",
                 widths=(64, 128), growth=32, n_blocks=2, n_layers=2):
        super().__init__()
        if patch_size % 4:
            raise ValueError("patch size must be divisible by 4")
        self.scales = [patch_size, patch_size // 2, patch_size // 4]
        self.k = k
        w1, w2 = widths
        self.enc1 = ScaleEncoder(3, w1, growth, n_blocks, n_layers)
        self.fuse1 = FusionStage(w1, w2, c_g, fusion)
        self.enc2 = ScaleEncoder(w2, w2, growth, n_blocks, n_layers)
        self.fuse2 = FusionStage(w2, c_g, c_g, fusion)
        self.local = LocalCode(c_c, k)

    def forward(self, coords) -> FeatureHierarchy:
        n1, n2, n3 = self.scales
        if coords.shape[-2] != n1:
            raise ValueError(f"expected {n1}-point patches, got {coords.shape[-2]}")
        f1 = encode_scale(self.enc1, coords, coords, self.k)
        f2 = self.fuse1(f1, n2)
        f2 = encode_scale(self.enc2, f2, coords[:, :n2], self.k)
        g = self.fuse2(f2, n3)
        c = self.local(coords[:, :n3])
        return FeatureHierarchy(self.scales, [f1, f2], g, c)
