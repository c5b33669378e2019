import math

import numpy as np
import pytest
import torch

from diffcl.errors import ConfigError
from diffcl.losses import (LossWeights, ce_loss, cross_pseudo_losses, dice_loss, supervised_losses,
                           total_losses, warmup_lambda)
from diffcl.oracles import central_difference, dice_loss_reference


def onehot(labels, C):
    return torch.nn.functional.one_hot(torch.as_tensor(labels), C).movedim(-1, 1).double()


def test_dice_closed_forms():
    y = onehot([[[[0, 1], [1, 0]]]], 2)
    assert float(dice_loss(y, y, smooth=0)) == 0.0
    assert float(dice_loss(1 - y, y, smooth=0)) == 1.0
    half = torch.full_like(y, 0.5)
    # each class: 2*(0.5*2)/(2+2) = 0.5
    assert float(dice_loss(half, y, smooth=0)) == 0.5


def test_dice_matches_reference(rng):
    p = torch.softmax(torch.from_numpy(rng.normal(size=(1, 3, 3, 3, 3))), dim=1)
    y = onehot(rng.integers(0, 3, size=(1, 3, 3, 3)), 3)
    want = dice_loss_reference(p[0].numpy(), y[0].numpy(), smooth=1e-5)
    assert float(dice_loss(p, y)) == pytest.approx(want, rel=1e-12)


def test_ce_closed_forms():
    y = onehot([[[[0, 1]]]], 2)
    assert float(ce_loss(y, y)) == 0.0
    p = torch.full_like(y, 0.5)
    assert float(ce_loss(p, y)) == pytest.approx(math.log(2), abs=1e-15)
    assert float(ce_loss(1 - y, y)) == pytest.approx(-math.log(1e-7), rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(1, 2, 2, 2, 2), torch.zeros(1, 3, 2, 2, 2))
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(1, 2, 2, 2, 2), torch.zeros(1, 3, 2, 2, 2))


@pytest.mark.parametrize("fn", [dice_loss, ce_loss])
def test_loss_gradients(rng, fn):
    z0 = rng.normal(size=(1, 2, 4, 4, 4))
    y = onehot(rng.integers(0, 2, size=(1, 4, 4, 4)), 2)
    z = torch.from_numpy(z0).requires_grad_(True)
    (g,) = torch.autograd.grad(fn(torch.softmax(z, 1), y), z)
    num = central_difference(lambda v: float(fn(torch.softmax(torch.from_numpy(v), 1), y)), z0.copy())
    err = np.abs(g.numpy() - num).max() / np.abs(num).max()
    assert err < 1e-3


def test_warmup_values():
    assert warmup_lambda(0, 300) == pytest.approx(2 * math.exp(-5), abs=1e-9)
    assert abs(warmup_lambda(0, 300) - 0.013476) < 1e-6
    assert warmup_lambda(300, 300) == pytest.approx(2.0, abs=1e-9)
    vals = [warmup_lambda(t, 30) for t in range(31)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    for bad in (-1, 301):
        with pytest.raises(ValueError):
            warmup_lambda(bad, 300)


def test_beta_follows_scale():
    w = LossWeights(beta_scale=0.1, t_max=300)
    assert w.beta(300) == pytest.approx(0.2, abs=1e-12)
    assert LossWeights(beta_scale=0.01).beta(300) == pytest.approx(0.02, abs=1e-12)
    with pytest.raises(ConfigError):
        LossWeights(mu1=-1).validate()


def test_supervised_losses_at_end_of_warmup(rng):
    y = onehot(rng.integers(0, 2, size=(1, 3, 3, 3)), 2)
    p = torch.softmax(torch.from_numpy(rng.normal(size=y.shape)), 1)
    w = LossWeights(beta_scale=0.1, t_max=10)
    l_d, l_c = supervised_losses(p, y, y, w, 10)
    assert float(l_d) == pytest.approx(float(dice_loss(p, y) + 0.2 * ce_loss(p, y)), rel=1e-12)
    assert float(l_c) == pytest.approx(float(dice_loss(y, y)), abs=1e-12)


def test_cross_pseudo_targets_are_detached(rng):
    y = onehot(rng.integers(0, 2, size=(1, 3, 3, 3)), 2).requires_grad_(True)
    p = torch.softmax(torch.from_numpy(rng.normal(size=y.shape)), 1).requires_grad_(True)
    l_d, l_c = cross_pseudo_losses(p, y, p, y, LossWeights())
    (l_d + l_c).backward()
    assert y.grad is None and p.grad is not None


def test_total_identity():
    parts = {k: torch.tensor(v, dtype=torch.float64)
             for k, v in dict(L_d_s=0.3, L_c_s=0.4, L_d_p=0.5, L_c_p=0.6, L_cl=2.0).items()}
    w = LossWeights(mu1=0.7, mu2=1.3, eta=0.25)
    r = total_losses(parts, w)
    assert abs(float(r.L_c - r.L_c_s - w.mu2 * (r.L_c_p + w.eta * r.L_cl))) < 1e-6
    assert abs(float(r.L_d - r.L_d_s - w.mu1 * r.L_d_p)) < 1e-6
    assert set(r.scalars()) == {"L_d_s", "L_c_s", "L_d_p", "L_c_p", "L_cl", "L_c_u", "L_d", "L_c"}
