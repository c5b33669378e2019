"""V-Net style encoder-decoders for CS and DS plus the projection head."""
import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .hfmamba import HFMBlock


@dataclass
class NetConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 8
    depth: int = 3
    feature_dim: int = 32
    use_hfm: bool = False
    hfm_stage: int = -1  # -1 means the bottleneck (depth - 1)
    hf_threshold: float = 0.7
    state_dim: int = 16
    time_embed_dim: int = 32

    def validate(self):
        if self.base_width < 4:
            raise ConfigError("base_width", f"must be >= 4, got {self.base_width}")
        if self.depth < 2:
            raise ConfigError("depth", f"must be >= 2, got {self.depth}")
        if self.feature_dim < 8:
            raise ConfigError("feature_dim", f"must be >= 8, got {self.feature_dim}")
        if not -1 <= self.hfm_stage < self.depth:
            raise ConfigError("hfm_stage", f"must be < depth ({self.depth}), got {self.hfm_stage}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", f"must be >= 2, got {self.num_classes}")
        if not 0.0 < self.hf_threshold <= 1.0:
            raise ConfigError("hf_threshold", f"must lie in (0, 1], got {self.hf_threshold}")

    @property
    def resolved_hfm_stage(self):
        return self.depth - 1 if self.hfm_stage == -1 else self.hfm_stage


@dataclass
class SegOutput:
    logits: torch.Tensor
    probs: torch.Tensor
    features: torch.Tensor


def _norm(ch):
    return nn.GroupNorm(min(4, ch), ch)


class ConvBlock(nn.Module):
    """``n`` conv-norm-relu layers, residual when widths agree."""

    def __init__(self, cin, cout, n=2):
        super().__init__()
        layers = []
        for i in range(n):
            layers += [nn.Conv3d(cin if i == 0 else cout, cout, 3, padding=1), _norm(cout), nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.residual = cin == cout

    def forward(self, x):
        y = self.body(x)
        return y + x if self.residual else y


class Down(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 2, stride=2)
        self.norm = _norm(cout)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class Up(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.ConvTranspose3d(cin, cout, 2, stride=2)
        self.norm = _norm(cout)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


def safe_normalize(v, dim=1, eps=1e-8):
    """L2-normalize along ``dim``; vectors with norm below eps map to the
    uniform unit vector so the output always has norm 1."""
    norm = v.norm(dim=dim, keepdim=True)
    fallback = torch.full_like(v, 1.0 / math.sqrt(v.shape[dim]))
    return torch.where(norm > eps, v / norm.clamp_min(eps), fallback)


class ProjectionHead(nn.Module):
    def __init__(self, cin, dim):
        super().__init__()
        self.fc1 = nn.Conv3d(cin, cin, 1)
        self.fc2 = nn.Conv3d(cin, dim, 1)

    def forward(self, x):
        return safe_normalize(self.fc2(F.relu(self.fc1(x))))


def project(head, decoder_features):
    return head(decoder_features)


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class SegNet(nn.Module):
    """Encoder-decoder with additive skips.

    ``depth`` counts downsampling stages; the input must be divisible by
    2**depth along every axis. With ``conditional`` set, the network takes
    a timestep and adds its projected embedding at the bottleneck.
    """

    def __init__(self, config: NetConfig, conditional=False):
        super().__init__()
        config.validate()
        self.config = config
        self.conditional = conditional
        w = config.base_width
        widths = [w * 2 ** i for i in range(config.depth + 1)]
        self.widths = widths
        self.enc = nn.ModuleList([ConvBlock(config.in_channels, widths[0], n=1)])
        self.down = nn.ModuleList()
        for i in range(config.depth):
            self.down.append(Down(widths[i], widths[i + 1]))
            self.enc.append(ConvBlock(widths[i + 1], widths[i + 1], n=2))
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(config.depth, 0, -1):
            self.up.append(Up(widths[i], widths[i - 1]))
            self.dec.append(ConvBlock(widths[i - 1], widths[i - 1], n=1 if i == 1 else 2))
        self.out = nn.Conv3d(widths[0], config.num_classes, 1)
        self.head = ProjectionHead(widths[0], config.feature_dim)
        self.hfm = None
        if config.use_hfm:
            level = config.resolved_hfm_stage + 1
            self.hfm = HFMBlock(widths[level], config.hf_threshold, config.state_dim)
        self.time_proj = None
        if conditional:
            self.time_proj = nn.Linear(config.time_embed_dim, widths[-1])

    def check_input(self, x):
        if x.ndim != 5:
            raise ValueError(f"expected (B, C, H, L, D) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        mult = 2 ** self.config.depth
        if any(s % mult for s in x.shape[2:]):
            raise ValueError(f"spatial shape {tuple(x.shape[2:])} must be a multiple of {mult}")

    def forward(self, x, t=None):
        self.check_input(x)
        if self.conditional and t is None:
            raise ValueError("conditional network needs a timestep")
        skips = []
        h = self.enc[0](x)
        hfm_level = self.config.resolved_hfm_stage + 1 if self.hfm is not None else -1
        for i in range(self.config.depth):
            skips.append(h)
            h = self.enc[i + 1](self.down[i](h))
            if i + 1 == hfm_level:
                # high-frequency detail is added back onto the stage features
                h = h + self.hfm(h)
        if self.time_proj is not None:
            t = torch.as_tensor(t).reshape(-1)
            if t.numel() == 1:
                t = t.expand(x.shape[0])
            emb = self.time_proj(timestep_embedding(t, self.config.time_embed_dim).to(h.dtype))
            h = h + emb[:, :, None, None, None]
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            h = dec(up(h) + skip)
        logits = self.out(h)
        return SegOutput(logits=logits, probs=torch.softmax(logits, dim=1), features=self.head(h))


def _seeded(seed, fn):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return fn()


def build_cs(config: NetConfig, seed=0):
    return _seeded(seed, lambda: SegNet(config, conditional=False))


def build_ds(config: NetConfig, seed=0):
    """DS sees the image concatenated with the C-channel noisy label field."""
    return _seeded(seed, lambda: SegNet(config, conditional=True))


def ds_config_from(cs_config: NetConfig, image_channels=1):
    return replace(cs_config, in_channels=image_channels + cs_config.num_classes, use_hfm=False)


def cs_forward(net, x):
    return net(x)


def ds_forward(net, x, y_t, t):
    C = net.config.num_classes
    if y_t.shape[1] != C:
        raise ValueError(f"noisy label field has {y_t.shape[1]} channels, expected {C}")
    if x.shape[0] != y_t.shape[0] or x.shape[2:] != y_t.shape[2:]:
        raise ValueError(f"image {tuple(x.shape)} and label field {tuple(y_t.shape)} disagree")
    return net(torch.cat([x, y_t], dim=1), t)
