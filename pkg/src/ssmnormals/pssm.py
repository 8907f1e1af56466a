"""Patch-wise state space modelling: tokenisation and the Mamba block chain.

Token order is the patch row order, i.e. ascending distance to the query
point, so the scan runs outward from the query.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SUPPORTED_DEPTHS
from .errors import ConfigError, UnsupportedModeError

# tokens processed per slab in the inference-only scan; bounds peak memory
SCAN_CHUNK = 256


@dataclass
class SSMParameters:
    """Discretised SSM parameters with a diagonal state matrix per channel.

    Time-invariant: ``A_bar``, ``B_bar`` and ``C`` are ``E x S``.
    Selective: ``A_bar``/``B_bar`` are ``... x L x E x S`` and ``C`` is ``... x L x S``.
    """

    A_bar: torch.Tensor
    B_bar: torch.Tensor
    C: torch.Tensor
    selective: bool = False
    delta: torch.Tensor | None = None

    @classmethod
    def time_invariant(cls, A, B, C, delta=1.0):
        """Zero-order hold on continuous ``A`` (E x S) with one step size per channel."""
        delta = torch.as_tensor(delta, dtype=A.dtype)
        if delta.dim() == 1:
            delta = delta[:, None]
        return cls(torch.exp(delta * A), delta * B, C, False, delta)

    @classmethod
    def discretize(cls, A, B, C, delta):
        """Selective parameters from per-token ``delta`` (... x L x E) and ``B``, ``C`` (... x L x S)."""
        dA = torch.exp(delta.unsqueeze(-1) * A)
        dB = delta.unsqueeze(-1) * B.unsqueeze(-2)
        return cls(dA, dB, C, True, delta)


def ssm_scan(params: SSMParameters, x: torch.Tensor) -> torch.Tensor:
    """Run ``h_t = A_bar h_{t-1} + B_bar x_t``, ``y_t = C h_t`` from ``h_0 = 0``.

    ``x`` is ``... x L x E``; returns the same shape.
    """
    L = x.shape[-2]
    h = torch.zeros(x.shape[:-2] + params.B_bar.shape[-2:], dtype=x.dtype, device=x.device)
    ys = []
    for t in range(L):
        if params.selective:
            a, b, c = params.A_bar[..., t, :, :], params.B_bar[..., t, :, :], params.C[..., t, None, :]
        else:
            a, b, c = params.A_bar, params.B_bar, params.C
        h = a * h + b * x[..., t, :, None]
        ys.append((h * c).sum(-1))
    return torch.stack(ys, dim=-2)


def ssm_kernel(params: SSMParameters, length: int) -> torch.Tensor:
    """Global convolution kernel ``(C B, C A B, ..., C A^{L-1} B)`` as ``L x E``."""
    if params.selective:
        raise UnsupportedModeError("token-dependent parameters have no convolution kernel; use ssm_scan")
    ones = torch.ones_like(params.A_bar).unsqueeze(0)
    powers = torch.cat([ones, params.A_bar.unsqueeze(0).expand(length - 1, -1, -1)]).cumprod(0)
    return torch.einsum("les,es,es->le", powers, params.B_bar, params.C)


def ssm_conv(params: SSMParameters, x: torch.Tensor) -> torch.Tensor:
    """Causal convolution of ``x`` (... x L x E) with the SSM kernel, via FFT."""
    L = x.shape[-2]
    kernel = ssm_kernel(params, L)
    n = 2 * L
    spec = torch.fft.rfft(x, n=n, dim=-2) * torch.fft.rfft(kernel, n=n, dim=0)
    return torch.fft.irfft(spec, n=n, dim=-2)[..., :L, :]


class _SelectiveScan(torch.autograd.Function):
    """Selective scan with a hand-written reverse-time backward pass.

    Autograd through a Python loop over time slices is quadratic in L
    (every slice allocates a full-size gradient buffer); this keeps it linear.
    """

    @staticmethod
    def forward(ctx, u, delta, A, B, C):
        dA = (delta.unsqueeze(-1) * A).exp_()
        H = (delta * u).unsqueeze(-1) * B.unsqueeze(2)
        for t in range(1, u.shape[1]):
            H[:, t].addcmul_(dA[:, t], H[:, t - 1])
        ctx.save_for_backward(u, delta, A, B, C, H, dA)
        return (H @ C.unsqueeze(-1)).squeeze(-1)

    @staticmethod
    def backward(ctx, gy):
        u, delta, A, B, C, H, dA = ctx.saved_tensors
        L = u.shape[1]
        gH = gy.unsqueeze(-1) * C.unsqueeze(2)
        for t in range(L - 2, -1, -1):
            gH[:, t].addcmul_(dA[:, t + 1], gH[:, t + 1])
        gC = (gy.unsqueeze(-2) @ H).squeeze(-2)
        du = delta * u
        gB = (du.unsqueeze(-2) @ gH).squeeze(-2)
        gHB = (gH @ B.unsqueeze(-1)).squeeze(-1)
        # d/d(dA_t) = gH_t * h_{t-1}; fold in d(dA)/d(delta A) = dA
        gdA = torch.empty_like(H)
        gdA[:, 0].zero_()
        torch.mul(gH[:, 1:], H[:, :-1], out=gdA[:, 1:]).mul_(dA[:, 1:])
        gA = torch.einsum("blds,bld->ds", gdA, delta)
        gdelta = torch.einsum("blds,ds->bld", gdA, A).addcmul_(gHB, u)
        gu = gHB * delta
        return gu, gdelta, gA, gB, gC


def selective_scan(u, delta, A, B, C):
    """Selective SSM over ``u`` (batch x L x D).

    ``delta``: batch x L x D step sizes; ``A``: D x S continuous (negative)
    state matrix; ``B``, ``C``: batch x L x S. Returns batch x L x D.
    """
    if torch.is_grad_enabled() and any(t.requires_grad for t in (u, delta, A, B, C)):
        return _SelectiveScan.apply(u, delta, A, B, C)
    out = torch.empty_like(u)
    h = u.new_zeros(u.shape[0], u.shape[2], A.shape[1])
    for s in range(0, u.shape[1], SCAN_CHUNK):
        sl = slice(s, s + SCAN_CHUNK)
        dA = torch.exp(delta[:, sl].unsqueeze(-1) * A)
        dBu = (delta[:, sl] * u[:, sl]).unsqueeze(-1) * B[:, sl].unsqueeze(2)
        Cs = C[:, sl]
        for t in range(dA.shape[1]):
            h = torch.addcmul(dBu[:, t], dA[:, t], h)
            out[:, s + t] = torch.einsum("bds,bs->bd", h, Cs[:, t])
    return out


class MambaBlock(nn.Module):
    """Pre-norm Mamba block with a residual connection.

    ``T' = DWConv(Linear(LN(T)))``; ``s = Linear(SSM(silu(T')) * silu(Linear(LN(T))))``;
    output ``T + s``. The SSM adds the usual ``D`` skip term.
    """

    def __init__(self, dim, state_dim=16, conv_width=4, expand=2, dt_rank=None,
                 dt_min=1e-3, dt_max=1e-1, zero_init_output=False):
        super().__init__()
        inner = expand * dim
        self.dim, self.inner, self.state_dim = dim, inner, state_dim
        self.dt_rank = dt_rank or max(1, math.ceil(dim / 16))
        self.norm = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, 2 * inner)
        self.conv = nn.Conv1d(inner, inner, conv_width, groups=inner, padding=conv_width - 1)
        self.x_proj = nn.Linear(inner, self.dt_rank + 2 * state_dim, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, inner)
        self.A_log = nn.Parameter(torch.log(torch.arange(1, state_dim + 1, dtype=torch.float32)).repeat(inner, 1))
        self.D = nn.Parameter(torch.ones(inner))
        self.out_proj = nn.Linear(inner, dim)

        dt = torch.exp(torch.rand(inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
        if zero_init_output:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)

    def mix(self, x):
        """The gated SSM branch ``s`` (batch x L x dim)."""
        L = x.shape[1]
        xs, z = self.in_proj(self.norm(x)).chunk(2, dim=-1)
        xs = self.conv(xs.transpose(1, 2))[..., :L].transpose(1, 2)
        xs = F.silu(xs)
        dt, B, C = self.x_proj(xs).split([self.dt_rank, self.state_dim, self.state_dim], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        A = -torch.exp(self.A_log)
        y = selective_scan(xs, delta, A, B, C) + xs * self.D
        return self.out_proj(y * F.silu(z))

    def forward(self, x):
        return x + self.mix(x)


class PointwiseResBlock(nn.Module):
    """Per-token residual MLP; replaces the Mamba block when sequence mixing is disabled."""

    def __init__(self, dim, hidden=None, zero_init_output=False):
        super().__init__()
        hidden = hidden or 2 * dim
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        if zero_init_output:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return x + self.fc2(F.silu(self.fc1(self.norm(x))))


class BlockChain(nn.Module):
    """``depth`` residual sequence blocks applied in order."""

    def __init__(self, dim, depth=7, mamba=True, state_dim=16, conv_width=4, expand=2,
                 zero_init_output=False):
        super().__init__()
        if depth not in SUPPORTED_DEPTHS:
            raise ConfigError(f"chain depth must be one of {SUPPORTED_DEPTHS}, got {depth}")
        if mamba:
            blocks = [MambaBlock(dim, state_dim, conv_width, expand, zero_init_output=zero_init_output)
                      for _ in range(depth)]
        else:
            blocks = [PointwiseResBlock(dim, zero_init_output=zero_init_output) for _ in range(depth)]
        self.blocks = nn.ModuleList(blocks)

    def forward(self, tokens):
        for block in self.blocks:
            tokens = block(tokens)
        return tokens


def run_chain(tokens: torch.Tensor, chain: BlockChain) -> torch.Tensor:
    """Hyper-surface values for a token sequence (batch x M x E)."""
    return chain(tokens)


class ResidualMLP(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x):
        return F.relu(x + self.fc2(F.relu(self.fc1(x))))


class Tokenizer(nn.Module):
    """``MAX_k( out( residual_stack([G : C]) ) )``: one token per point.

    The first linear layer of the stack is split into a per-point part for
    ``G`` and a per-neighbour part for ``C`` so ``G`` is never materialised
    ``k`` times.
    """

    def __init__(self, c_g, c_c, dim, hidden=128, n_res=2):
        super().__init__()
        self.proj_g = nn.Linear(c_g, hidden)
        self.proj_c = nn.Linear(c_c, hidden, bias=False)
        self.res = nn.Sequential(*[ResidualMLP(hidden) for _ in range(n_res)])
        self.out = nn.Linear(hidden, dim)

    def forward(self, G, C):
        if G.shape[:-1] != C.shape[:2] or G.dim() != 3 or C.dim() != 4:
            raise ValueError(f"G {tuple(G.shape)} and C {tuple(C.shape)} do not describe the same points")
        h = F.relu(self.proj_g(G).unsqueeze(2) + self.proj_c(C))
        return self.out(self.res(h)).max(dim=2).values
