"""Memory bank of DS features and contrastive label propagation."""
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError


@dataclass
class LabelPropConfig:
    p: int = 16
    q: int = 256
    k: int = 8
    tau: float = 0.1
    capacity: int = 1024
    insert_cap: int = 256

    def validate(self):
        for name in ("p", "q", "k", "capacity", "insert_cap"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if 2 * self.k > self.q:
            raise ConfigError("k", f"2k must not exceed q ({self.q}), got k={self.k}")
        if self.tau <= 0:
            raise ConfigError("tau", f"must be > 0, got {self.tau}")


class MemoryBank:
    """Per-class ring buffers of unit feature vectors.

    Only features of voxels the DS classified correctly are admitted.
    Single writer; ``snapshot`` gives readers an immutable copy.
    """

    def __init__(self, num_classes, dim, capacity=1024, insert_cap=None):
        self.num_classes = num_classes
        self.dim = dim
        self.capacity = capacity
        self.insert_cap = insert_cap
        self.buffers = torch.zeros(num_classes, capacity, dim)
        self.counts = [0] * num_classes
        self.cursors = [0] * num_classes
        self.inserted = [0] * num_classes
        self.skipped = [0] * num_classes

    def __len__(self):
        return sum(self.counts)

    def entries(self, cls):
        """Stored vectors of ``cls`` in insertion order (oldest first)."""
        n = self.counts[cls]
        buf = self.buffers[cls]
        if n < self.capacity:
            return buf[:n].clone()
        c = self.cursors[cls]
        return torch.cat([buf[c:], buf[:c]]).clone()

    def push(self, cls, vectors):
        n = len(vectors)
        if n == 0:
            return
        self.inserted[cls] += n
        if n > self.capacity:
            # only the newest `capacity` survive; advance past the rest
            self.cursors[cls] = (self.cursors[cls] + n - self.capacity) % self.capacity
            vectors = vectors[n - self.capacity:]
            n = self.capacity
        idx = (self.cursors[cls] + torch.arange(n)) % self.capacity
        self.buffers[cls, idx] = vectors.to(self.buffers.dtype)
        self.cursors[cls] = (self.cursors[cls] + n) % self.capacity
        self.counts[cls] = min(self.counts[cls] + n, self.capacity)

    def stats(self):
        return {
            "fill": list(self.counts),
            "inserted": list(self.inserted),
            "skipped": list(self.skipped),
        }

    def state_dict(self):
        return {
            "buffers": self.buffers.clone(),
            "counts": list(self.counts),
            "cursors": list(self.cursors),
            "inserted": list(self.inserted),
            "skipped": list(self.skipped),
        }

    def load_state_dict(self, state):
        self.buffers = state["buffers"].clone()
        self.counts = list(state["counts"])
        self.cursors = list(state["cursors"])
        self.inserted = list(state["inserted"])
        self.skipped = list(state["skipped"])


def bank_update(bank, features, ds_pred, y_true, rng=None):
    """Insert features of correctly predicted voxels, grouped by class.

    features: (B, d, *spatial); ds_pred, y_true: (B, *spatial).
    When a class has more correct voxels than ``bank.insert_cap``, a
    random subset (drawn from ``rng``) is kept.
    """
    if ds_pred.shape != y_true.shape or features.shape[2:] != y_true.shape[1:] \
            or features.shape[0] != y_true.shape[0]:
        raise ValueError(
            f"shape mismatch: features {tuple(features.shape)}, pred {tuple(ds_pred.shape)}, "
            f"labels {tuple(y_true.shape)}"
        )
    feats = features.detach().movedim(1, -1).reshape(-1, features.shape[1]).float()
    pred = ds_pred.reshape(-1)
    lab = y_true.reshape(-1)
    correct = pred == lab
    for cls in range(bank.num_classes):
        sel = torch.nonzero(correct & (lab == cls)).reshape(-1)
        bank.skipped[cls] += int(((lab == cls) & ~correct).sum())
        if sel.numel() == 0:
            continue
        if bank.insert_cap is not None and sel.numel() > bank.insert_cap:
            if rng is None:
                rng = np.random.default_rng(0)
            keep = np.sort(rng.choice(sel.numel(), bank.insert_cap, replace=False))
            sel = sel[torch.from_numpy(keep)]
        bank.push(cls, feats[sel])
    return bank


def sample_anchors(bank, p, seed=None, rng=None):
    """Draw p stored vectors per class. Returns (anchors dict, skipped classes)."""
    if rng is None:
        rng = np.random.default_rng(seed)
    anchors, missing = {}, []
    for cls in range(bank.num_classes):
        n = bank.counts[cls]
        if n == 0:
            missing.append(cls)
            continue
        stored = bank.entries(cls)
        idx = rng.choice(n, p, replace=n < p)
        anchors[cls] = stored[torch.from_numpy(np.asarray(idx))]
    return anchors, missing


def sample_candidates(features, q, rng):
    """q random voxel features from a (B, d, *spatial) field (keeps the graph)."""
    flat = features.movedim(1, -1).reshape(-1, features.shape[1])
    idx = rng.choice(flat.shape[0], q, replace=flat.shape[0] < q)
    return flat[torch.from_numpy(np.asarray(idx))]


def cosine_scores(a, b, eps=1e-12):
    """(p, d) x (q, d) -> (p, q) cosine similarities."""
    na = a.norm(dim=1, keepdim=True).clamp_min(eps)
    nb = b.norm(dim=1, keepdim=True).clamp_min(eps)
    return (a / na) @ (b / nb).T


def topk_select(scores, k):
    """Column indices of positives (k largest column sums) and negatives
    (k smallest column sums among the remaining columns). Ties go to the
    lower column index."""
    q = scores.shape[1]
    if 2 * k > q:
        raise ValueError(f"need 2k <= q for disjoint positives/negatives, got k={k}, q={q}")
    s = scores.detach().sum(dim=0).double().cpu().numpy()
    cols = np.arange(q)
    pos = np.lexsort((cols, -s))[:k]
    rest = np.setdiff1d(cols, pos)
    neg = rest[np.lexsort((rest, s[rest]))][:k]
    return torch.from_numpy(pos), torch.from_numpy(neg)


@dataclass
class PairSet:
    anchors: dict
    positives: dict
    negatives: dict
    skipped: list = field(default_factory=list)

    def empty(self):
        return not self.anchors


def mine_pairs(anchors, candidates, k, skipped=()):
    pos, neg = {}, {}
    for cls, a in anchors.items():
        p_idx, n_idx = topk_select(cosine_scores(a, candidates), k)
        pos[cls] = candidates[p_idx]
        neg[cls] = candidates[n_idx]
    return PairSet(anchors=dict(anchors), positives=pos, negatives=neg, skipped=list(skipped))


def contrastive_loss(pairs, tau):
    """Summed InfoNCE over classes, anchors and positives.

    Each term is -log(e^{s+/tau} / (e^{s+/tau} + sum_N e^{s-/tau})),
    evaluated as a log-sum-exp. Returns (loss, skipped_flag).
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    total = None
    for cls, a in pairs.anchors.items():
        a = a.to(pairs.positives[cls].dtype)
        sp = cosine_scores(a, pairs.positives[cls]) / tau  # (p, k)
        sn = cosine_scores(a, pairs.negatives[cls]) / tau  # (p, k)
        neg = sn.unsqueeze(1).expand(-1, sp.shape[1], -1)
        logits = torch.cat([sp.unsqueeze(-1), neg], dim=-1)
        term = (torch.logsumexp(logits, dim=-1) - sp).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(()), True
    return total, False
