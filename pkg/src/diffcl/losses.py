"""Dice / cross-entropy primitives and the DS/CS objectives."""
import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ConfigError

DICE_SMOOTH = 1e-5
CE_CLAMP = 1e-7


@dataclass
class LossWeights:
    mu1: float = 1.0
    mu2: float = 1.0
    beta_scale: float = 0.1  # beta1 = beta2 = beta_scale * warmup_lambda(t)
    lambda1: float = 1.0
    lambda2: float = 1.0
    eta: float = 0.5
    t_max: int = 300

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f.name, f"must be nonnegative, got {getattr(self, f.name)}")
        if self.t_max < 1:
            raise ConfigError("t_max", f"must be >= 1, got {self.t_max}")

    def beta(self, t):
        return self.beta_scale * warmup_lambda(t, self.t_max)


TERMS = ("L_d_s", "L_c_s", "L_d_p", "L_c_p", "L_cl", "L_c_u", "L_d", "L_c")


@dataclass
class LossReport:
    L_d_s: torch.Tensor
    L_c_s: torch.Tensor
    L_d_p: torch.Tensor
    L_c_p: torch.Tensor
    L_cl: torch.Tensor
    L_c_u: torch.Tensor
    L_d: torch.Tensor
    L_c: torch.Tensor

    def scalars(self):
        return {name: float(getattr(self, name).detach()) for name in TERMS}


def warmup_lambda(t, t_max):
    """Gaussian ramp 2 * exp(-5 (1 - t/t_max)^2)."""
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if not 0 <= t <= t_max:
        raise ValueError(f"t must lie in [0, {t_max}], got {t}")
    return 2.0 * math.exp(-5.0 * (1.0 - t / t_max) ** 2)


def as_onehot(y, num_classes):
    """Integer labels (B, *spatial) -> {0,1} one-hot (B, C, *spatial)."""
    return F.one_hot(y.long(), num_classes).movedim(-1, 1).to(torch.get_default_dtype())


def dice_loss(p, y, smooth=DICE_SMOOTH):
    """Soft Dice loss per class over (batch, space), averaged over classes.

    p, y: (B, C, *spatial); background included.
    """
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    y = y.to(p.dtype)
    dims = [0] + list(range(2, p.ndim))
    inter = (p * y).sum(dim=dims)
    denom = p.sum(dim=dims) + y.sum(dim=dims)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def ce_loss(p, y, eps=CE_CLAMP):
    """Mean over voxels of -sum_c y_c log p_c with p clamped to [eps, 1]."""
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    return -(y.to(p.dtype) * torch.log(p.clamp(eps, 1.0))).sum(dim=1).mean()


def dice_ce(p, y, ce_weight):
    return dice_loss(p, y) + ce_weight * ce_loss(p, y)


def supervised_losses(p_ds_l, p_cs_l, y_l, weights: LossWeights, t):
    """(L^d_s, L^c_s); ``y_l`` is one-hot. Both CE weights follow the warmup."""
    beta = weights.beta(t)
    return dice_ce(p_ds_l, y_l, beta), dice_ce(p_cs_l, y_l, beta)


def cross_pseudo_losses(p_ds_u, pseudo_cs_u, p_cs_u, pseudo_ds_u, weights: LossWeights):
    """(L^d_p, L^c_p). Pseudo-labels are detached one-hot targets."""
    l_d = dice_ce(p_ds_u, pseudo_cs_u.detach(), weights.lambda1)
    l_c = dice_ce(p_cs_u, pseudo_ds_u.detach(), weights.lambda2)
    return l_d, l_c


def total_losses(parts, weights: LossWeights):
    """parts holds L_d_s, L_c_s, L_d_p, L_c_p, L_cl; returns a full LossReport."""
    l_c_u = parts["L_c_p"] + weights.eta * parts["L_cl"]
    l_d = parts["L_d_s"] + weights.mu1 * parts["L_d_p"]
    l_c = parts["L_c_s"] + weights.mu2 * l_c_u
    return LossReport(L_c_u=l_c_u, L_d=l_d, L_c=l_c, **parts)
