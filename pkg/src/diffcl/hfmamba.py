"""High-frequency Mamba block.

Pipeline on a (B, ch, H, L, D) feature grid::

    F_g = FFT(SA(f))
    F_h = iFFT(HPF(fftshift(F_g)))
    F_m = SM(LN(F_h)) + F_h
    F_o = MLP(LN(F_m)) + F_m

SM runs a selective scan along three voxel orderings and sums them.
The scan itself is a custom autograd function over the kernels in
``diffcl.kernels``.
"""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .errors import NumericError

ORDERS = ("forward", "backward", "space")


@dataclass
class SSMParams:
    a_bar: torch.Tensor
    b_bar: torch.Tensor
    c: torch.Tensor

    @property
    def state_dim(self):
        return self.a_bar.shape[-1]


@dataclass
class FreqMask:
    hf_threshold: float
    mask: np.ndarray


def freq_mask(shape, hf_threshold):
    """Binary mask over centered frequency bins: 1 beyond hf_threshold * r_max.

    r_max is half the smallest axis. Distance is Euclidean in bin units
    from the DC bin, which fftshift places at index n // 2.
    """
    if not 0.0 < hf_threshold <= 1.0:
        raise ValueError(f"hf_threshold must lie in (0, 1], got {hf_threshold}")
    grids = np.meshgrid(*[np.arange(n) - n // 2 for n in shape], indexing="ij")
    dist = np.sqrt(sum(g.astype(np.float64) ** 2 for g in grids))
    r_max = min(shape) / 2.0
    return FreqMask(hf_threshold, (dist / r_max > hf_threshold).astype(np.float64))


def high_pass(f, hf_threshold):
    """Remove low spatial frequencies from the last three axes of ``f``."""
    if not torch.isfinite(f).all():
        raise NumericError("high_pass received non-finite values")
    dims = (-3, -2, -1)
    mask = torch.as_tensor(freq_mask(f.shape[-3:], hf_threshold).mask, dtype=f.dtype, device=f.device)
    spec = torch.fft.fftshift(torch.fft.fftn(f, dim=dims), dim=dims)
    spec = torch.fft.ifftshift(spec * mask, dim=dims)
    return torch.fft.ifftn(spec, dim=dims).real


class SpatialAttention(nn.Module):
    """Voxel gate from channel mean/max maps. Replicate padding keeps a
    constant input mapped to a constant gate."""

    def __init__(self, kernel_size=3):
        super().__init__()
        self.conv = nn.Conv3d(2, 1, kernel_size, padding=kernel_size // 2, padding_mode="replicate")

    def gate(self, f):
        pooled = torch.cat([f.mean(dim=1, keepdim=True), f.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, f):
        return f * self.gate(f)


def spatial_attention(module, f):
    return module(f)


class _SelectiveScanFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, a_bar, b_bar, c):
        arrs = [t.detach().cpu().numpy() for t in (x, a_bar, b_bar, c)]
        y, hs = kernels.scan_forward(*arrs)
        ctx.save_for_backward(x, a_bar, b_bar, c)
        ctx.hs = hs
        return torch.from_numpy(np.asarray(y)).to(dtype=x.dtype, device=x.device)

    @staticmethod
    def backward(ctx, gy):
        x, a_bar, b_bar, c = ctx.saved_tensors
        arrs = [t.detach().cpu().numpy() for t in (gy, x, a_bar, b_bar, c)]
        grads = kernels.scan_backward(*arrs, ctx.hs)
        return tuple(torch.from_numpy(np.asarray(g)).to(dtype=x.dtype, device=x.device) for g in grads)


def selective_scan(x_seq, params):
    """y_t = C_t h_t with h_t = A_t h_{t-1} + B_t x_t, h_0 = 0.

    x_seq is (B, L, D); params carry a_bar/b_bar (B, L, D, N) and c (B, L, N).
    """
    L = x_seq.shape[1]
    for name in ("a_bar", "b_bar", "c"):
        if getattr(params, name).shape[1] != L:
            raise ValueError(f"{name} has length {getattr(params, name).shape[1]}, sequence has {L}")
    return _SelectiveScanFn.apply(x_seq, params.a_bar, params.b_bar, params.c)


def flatten_order(f, order):
    """(B, ch, H, L, D) -> (B, H*L*D, ch) along the named voxel ordering."""
    if order == "space":
        f = f.permute(0, 1, 4, 2, 3)
    seq = f.flatten(2).transpose(1, 2)
    if order == "backward":
        seq = seq.flip(1)
    return seq


def unflatten_order(seq, order, shape):
    """Inverse of ``flatten_order``; ``shape`` is the (H, L, D) grid."""
    H, L, D = shape
    if order == "backward":
        seq = seq.flip(1)
    B, _, ch = seq.shape
    grid = seq.transpose(1, 2)
    if order == "space":
        return grid.reshape(B, ch, D, H, L).permute(0, 1, 3, 4, 2)
    return grid.reshape(B, ch, H, L, D)


class ScanBranch(nn.Module):
    """One selective SSM with input-dependent step, input gain and readout."""

    def __init__(self, channels, state_dim=16):
        super().__init__()
        self.state_dim = state_dim
        self.dt_proj = nn.Linear(channels, channels)
        self.b_proj = nn.Linear(channels, state_dim, bias=False)
        self.c_proj = nn.Linear(channels, state_dim, bias=False)
        a = torch.arange(1, state_dim + 1, dtype=torch.float32).repeat(channels, 1)
        self.a_log = nn.Parameter(torch.log(a))
        self.skip = nn.Parameter(torch.ones(channels))
        nn.init.constant_(self.dt_proj.bias, -2.0)
        self.memoryless = False

    def params(self, seq):
        delta = F.softplus(self.dt_proj(seq))
        a = -torch.exp(self.a_log)
        a_bar = torch.exp(delta.unsqueeze(-1) * a)
        if self.memoryless:
            a_bar = torch.zeros_like(a_bar)
        b_bar = delta.unsqueeze(-1) * self.b_proj(seq).unsqueeze(2)
        return SSMParams(a_bar=a_bar, b_bar=b_bar, c=self.c_proj(seq))

    def forward(self, seq):
        return selective_scan(seq, self.params(seq)) + self.skip * seq


class TriDirectionalSM(nn.Module):
    def __init__(self, channels, state_dim=16, orders=ORDERS):
        super().__init__()
        self.orders = tuple(orders)
        self.branches = nn.ModuleList(ScanBranch(channels, state_dim) for _ in self.orders)
        self.out_proj = nn.Linear(channels, channels)

    def set_memoryless(self, flag=True):
        for b in self.branches:
            b.memoryless = flag

    def forward(self, f):
        shape = f.shape[-3:]
        total = 0
        for order, branch in zip(self.orders, self.branches):
            y = branch(flatten_order(f, order))
            total = total + unflatten_order(y, order, shape)
        # mix channels per voxel
        return self.out_proj(total.movedim(1, -1)).movedim(-1, 1)


def tri_directional_sm(module, f):
    return module(f)


class ChannelLayerNorm(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, f):
        return self.norm(f.movedim(1, -1)).movedim(-1, 1)


class VoxelMLP(nn.Module):
    def __init__(self, channels, expansion=2):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels * expansion)
        self.fc2 = nn.Linear(channels * expansion, channels)

    def forward(self, f):
        h = self.fc2(F.gelu(self.fc1(f.movedim(1, -1))))
        return h.movedim(-1, 1)


class HFMBlock(nn.Module):
    def __init__(self, channels, hf_threshold=0.7, state_dim=16):
        super().__init__()
        self.hf_threshold = hf_threshold
        self.sa = SpatialAttention()
        self.ln1 = ChannelLayerNorm(channels)
        self.sm = TriDirectionalSM(channels, state_dim)
        self.ln2 = ChannelLayerNorm(channels)
        self.mlp = VoxelMLP(channels)

    def stages(self, f):
        f_h = high_pass(self.sa(f), self.hf_threshold)
        f_m = self.sm(self.ln1(f_h)) + f_h
        f_o = self.mlp(self.ln2(f_m)) + f_m
        return {"F_h": f_h, "F_m": f_m, "F_o": f_o}

    def forward(self, f):
        return self.stages(f)["F_o"]


def hfm_block(module, f_hat):
    return module(f_hat)
