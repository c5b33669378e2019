import math

import numpy as np
import pytest
import torch

from diffcl.errors import ConfigError
from diffcl.labelprop import (LabelPropConfig, MemoryBank, PairSet, bank_update, contrastive_loss,
                              cosine_scores, mine_pairs, sample_anchors, sample_candidates,
                              topk_select)
from diffcl.nets import safe_normalize
from diffcl.oracles import central_difference, contrastive_reference, cosine_matrix, topk_reference


def unit_field(B, d, shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return safe_normalize(torch.randn(B, d, *shape, generator=g))


def test_config_validation():
    LabelPropConfig().validate()
    with pytest.raises(ConfigError) as exc:
        LabelPropConfig(k=200, q=256).validate()
    assert exc.value.field == "k"
    with pytest.raises(ConfigError):
        LabelPropConfig(tau=0).validate()


def test_bank_stores_every_correct_voxel():
    feats = unit_field(1, 4, (2, 2, 2))
    y = torch.tensor([0, 1, 1, 0, 1, 0, 0, 1]).reshape(1, 2, 2, 2)
    bank = bank_update(MemoryBank(2, 4, capacity=100), feats, y.clone(), y)
    flat = feats.movedim(1, -1).reshape(-1, 4)
    for cls in (0, 1):
        torch.testing.assert_close(bank.entries(cls), flat[(y.reshape(-1) == cls)])


def test_bank_ignores_wrong_predictions():
    feats = unit_field(1, 4, (2, 2, 2))
    y = torch.zeros(1, 2, 2, 2, dtype=torch.long)
    bank = bank_update(MemoryBank(2, 4, capacity=8), feats, 1 - y, y)
    assert len(bank) == 0
    assert bank.stats()["skipped"] == [8, 0]


def test_ring_buffer_keeps_newest_in_order():
    bank = MemoryBank(2, 3, capacity=4)
    vecs = torch.arange(18, dtype=torch.float32).reshape(6, 3)
    for v in vecs:
        bank.push(1, v[None])
    torch.testing.assert_close(bank.entries(1), vecs[2:])
    bank2 = MemoryBank(2, 3, capacity=4)
    bank2.push(1, vecs)
    torch.testing.assert_close(bank2.entries(1), vecs[2:])
    assert bank2.stats()["inserted"] == [0, 6]


def test_bank_shape_mismatch():
    with pytest.raises(ValueError):
        bank_update(MemoryBank(2, 4), unit_field(1, 4, (2, 2, 2)), torch.zeros(1, 2, 2, 2),
                    torch.zeros(1, 2, 2, 3))


def test_bank_purity_under_replay():
    rng = np.random.default_rng(0)
    bank = MemoryBank(3, 8, capacity=10_000, insert_cap=None)
    admitted = []
    for step in range(5):
        feats = unit_field(2, 8, (3, 3, 3), seed=step)
        y = torch.from_numpy(rng.integers(0, 3, size=(2, 3, 3, 3)))
        pred = torch.from_numpy(rng.integers(0, 3, size=(2, 3, 3, 3)))
        bank_update(bank, feats, pred, y)
        flat = feats.movedim(1, -1).reshape(-1, 8)
        ok = (pred == y).reshape(-1)
        admitted.append((flat[ok], y.reshape(-1)[ok]))
    for cls in range(3):
        want = torch.cat([f[lab == cls] for f, lab in admitted])
        torch.testing.assert_close(bank.entries(cls), want)


def test_insert_cap_subsamples():
    feats = unit_field(1, 4, (4, 4, 4))
    y = torch.zeros(1, 4, 4, 4, dtype=torch.long)
    bank = bank_update(MemoryBank(2, 4, capacity=100, insert_cap=5), feats, y, y,
                       rng=np.random.default_rng(1))
    assert bank.counts == [5, 0]
    flat = feats.movedim(1, -1).reshape(-1, 4)
    for v in bank.entries(0):
        assert (flat == v).all(dim=1).any()


def test_anchor_sampling():
    bank = MemoryBank(3, 4, capacity=8)
    stored = safe_normalize(torch.randn(4, 4), dim=1)
    bank.push(1, stored)
    anchors, missing = sample_anchors(bank, 4, seed=0)
    assert missing == [0, 2] and list(anchors) == [1]
    got = {tuple(v.tolist()) for v in anchors[1]}
    want = {tuple(v.tolist()) for v in stored}
    # drawing without replacement from exactly p entries returns all of them
    assert got == want
    a2, _ = sample_anchors(bank, 4, seed=0)
    assert torch.equal(a2[1], anchors[1])
    empty, missing = sample_anchors(MemoryBank(2, 4), 3, seed=0)
    assert empty == {} and missing == [0, 1]


def test_cosine_scores(rng):
    v = torch.tensor([[1.0, 0.0, 0.0, 0.0]])
    assert float(cosine_scores(v, v)) == pytest.approx(1.0)
    assert float(cosine_scores(v, torch.tensor([[0.0, 2.0, 0.0, 0.0]]))) == 0.0
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(7, 4))
    got = cosine_scores(torch.from_numpy(a), torch.from_numpy(b)).numpy()
    np.testing.assert_allclose(got, cosine_matrix(a, b), atol=1e-6)
    assert np.all(np.abs(got) <= 1 + 1e-6)


def test_topk_examples():
    pos, neg = topk_select(torch.tensor([[2.0, -1.0, 0.5]]), 1)
    assert pos.tolist() == [0] and neg.tolist() == [1]
    pos, neg = topk_select(torch.ones(2, 3), 1)
    assert pos.tolist() == [0] and neg.tolist() == [1]
    with pytest.raises(ValueError):
        topk_select(torch.ones(1, 3), 2)


def test_topk_matches_sort_oracle(rng):
    for trial in range(50):
        p, q = int(rng.integers(1, 5)), int(rng.integers(2, 20))
        k = int(rng.integers(1, q // 2 + 1))
        # coarse values force ties
        scores = rng.integers(-3, 4, size=(p, q)).astype(float) / 4
        pos, neg = topk_select(torch.from_numpy(scores), k)
        want_pos, want_neg = topk_reference(scores, k)
        assert pos.tolist() == want_pos and neg.tolist() == want_neg
        assert not set(pos.tolist()) & set(neg.tolist())
        # power-of-two scales are exact, so ties survive the rescaling
        for scale in (0.25, 8.0):
            scaled = topk_select(torch.from_numpy(scores * scale), k)
            assert scaled[0].tolist() == pos.tolist() and scaled[1].tolist() == neg.tolist()


def test_contrastive_closed_form():
    t = lambda v: torch.tensor([v], dtype=torch.float64)
    pairs = PairSet({1: t([1.0, 0.0])}, {1: t([1.0, 0.0])}, {1: t([-1.0, 0.0])})
    loss, skipped = contrastive_loss(pairs, 1.0)
    assert not skipped
    assert float(loss) == pytest.approx(-math.log(math.e / (math.e + math.exp(-1))), abs=1e-12)
    assert abs(float(loss) - 0.1269) < 1e-4


@pytest.mark.parametrize("k", [1, 3, 8])
def test_contrastive_uniform_similarity(k):
    a = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    same = torch.tensor([[0.6, 0.8, 0.0]], dtype=torch.float64)
    pairs = PairSet({0: a}, {0: same}, {0: same.repeat(k, 1)})
    loss, _ = contrastive_loss(pairs, 0.3)
    assert float(loss) == pytest.approx(math.log(1 + k), abs=1e-12)


def test_contrastive_matches_reference_and_is_positive(rng):
    anchors = {c: torch.from_numpy(rng.normal(size=(3, 4))) for c in (0, 1)}
    pos = {c: torch.from_numpy(rng.normal(size=(2, 4))) for c in (0, 1)}
    neg = {c: torch.from_numpy(rng.normal(size=(2, 4))) for c in (0, 1)}
    loss, _ = contrastive_loss(PairSet(anchors, pos, neg), 0.5)
    conv = lambda d: {c: v.numpy() for c, v in d.items()}
    want = contrastive_reference(conv(anchors), conv(pos), conv(neg), 0.5)
    assert float(loss) == pytest.approx(want, rel=1e-9)
    assert float(loss) > 0


def test_contrastive_empty_pairs():
    loss, skipped = contrastive_loss(PairSet({}, {}, {}), 0.1)
    assert skipped and float(loss) == 0.0


def test_contrastive_gradient(rng):
    anchors = rng.normal(size=(2, 4))
    cands0 = rng.normal(size=(2, 4))
    a = torch.from_numpy(anchors)

    def loss_of(c):
        pairs = mine_pairs({0: a}, c, 1)
        return contrastive_loss(pairs, 0.5)[0]

    c = torch.from_numpy(cands0).requires_grad_(True)
    (g,) = torch.autograd.grad(loss_of(c), c)
    num = central_difference(lambda v: float(loss_of(torch.from_numpy(v))), cands0.copy())
    np.testing.assert_allclose(g.numpy(), num, rtol=1e-3, atol=1e-7)


def test_candidates_keep_graph():
    f = unit_field(1, 4, (2, 2, 2)).requires_grad_(True)
    c = sample_candidates(f, 5, np.random.default_rng(0))
    assert c.shape == (5, 4) and c.requires_grad
