"""Slow, obviously-correct reference implementations for the test suite.

Nothing here imports from the rest of the package; every routine is a
literal loop over the defining formula. Size caps keep them usable.
"""
import cmath
import math
from dataclasses import dataclass, field

import numpy as np

MAX_DFT_SIDE = 8
MAX_MASK_SIDE = 8


@dataclass
class OracleResult:
    value: object
    cost: str
    tolerance: float = 0.0
    notes: dict = field(default_factory=dict)


def naive_scan(x, a_bar, b_bar, c):
    """h_t = a_t h_{t-1} + b_t x_t, y_t = c_t . h_t, h_0 = 0.

    Shapes: x (L, D), a_bar/b_bar (L, D, N), c (L, N). Plain python floats.
    Scalars/1-D sequences are accepted for the D = N = 1 case.
    """
    x = np.asarray(x, dtype=float)
    a_bar = np.asarray(a_bar, dtype=float)
    b_bar = np.asarray(b_bar, dtype=float)
    c = np.asarray(c, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
        a_bar = a_bar.reshape(-1, 1, 1)
        b_bar = b_bar.reshape(-1, 1, 1)
        c = c.reshape(-1, 1)
    L, D = x.shape
    N = a_bar.shape[2]
    y = [[0.0] * D for _ in range(L)]
    for d in range(D):
        h = [0.0] * N
        for t in range(L):
            for n in range(N):
                h[n] = float(a_bar[t, d, n]) * h[n] + float(b_bar[t, d, n]) * float(x[t, d])
            acc = 0.0
            for n in range(N):
                acc += float(c[t, n]) * h[n]
            y[t][d] = acc
    return OracleResult(np.array(y), cost=f"O(L*D*N) = {L * D * N}")


def dft3(f, inverse=False):
    """Direct triple-sum DFT of a 3-D grid (numpy sign convention)."""
    f = np.asarray(f)
    if f.ndim != 3:
        raise ValueError("dft3 needs a 3-D grid")
    if max(f.shape) > MAX_DFT_SIDE:
        raise ValueError(f"dft3 refuses grids larger than {MAX_DFT_SIDE} per side, got {f.shape}")
    n0, n1, n2 = f.shape
    sign = 1.0 if inverse else -1.0
    out = np.zeros(f.shape, dtype=complex)
    for k0 in range(n0):
        for k1 in range(n1):
            for k2 in range(n2):
                acc = 0j
                for x0 in range(n0):
                    for x1 in range(n1):
                        for x2 in range(n2):
                            phase = sign * 2.0 * math.pi * (
                                k0 * x0 / n0 + k1 * x1 / n1 + k2 * x2 / n2
                            )
                            acc += complex(f[x0, x1, x2]) * cmath.exp(1j * phase)
                out[k0, k1, k2] = acc / (n0 * n1 * n2) if inverse else acc
    return out


def highpass_reference(f, hf_threshold):
    """High-pass a 3-D grid via direct DFT with an explicit centered mask."""
    f = np.asarray(f, dtype=float)
    n = f.shape
    spec = dft3(f)
    r_max = min(n) / 2.0
    kept = np.zeros(n, dtype=complex)
    for k0 in range(n[0]):
        for k1 in range(n[1]):
            for k2 in range(n[2]):
                # signed frequency; for even m the Nyquist bin is -m/2
                s = [k if k < (m + 1) // 2 else k - m for k, m in zip((k0, k1, k2), n)]
                dist = math.sqrt(sum(v * v for v in s))
                if dist / r_max > hf_threshold:
                    kept[k0, k1, k2] = spec[k0, k1, k2]
    return dft3(kept, inverse=True).real, spec, kept


def _boundary_points(mask):
    mask = np.asarray(mask, dtype=bool)
    pts = []
    sx, sy, sz = mask.shape
    for i in range(sx):
        for j in range(sy):
            for k in range(sz):
                if not mask[i, j, k]:
                    continue
                edge = False
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    a, b, c = i + di, j + dj, k + dk
                    if not (0 <= a < sx and 0 <= b < sy and 0 <= c < sz) or not mask[a, b, c]:
                        edge = True
                        break
                if edge:
                    pts.append((i, j, k))
    return pts


def exhaustive_surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    """All directed nearest-boundary distances A->B followed by B->A.

    Boundary voxels are mask voxels with a 6-neighbour outside the mask
    (outside the grid counts as outside). Empty mask -> empty result.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if max(a.shape) > MAX_MASK_SIDE:
        raise ValueError(f"oracle capped at {MAX_MASK_SIDE} per side")
    pa, pb = _boundary_points(a), _boundary_points(b)
    if not pa or not pb:
        return OracleResult([], cost="empty", notes={"empty": True})

    def directed(src, dst):
        out = []
        for p in src:
            best = math.inf
            for q in dst:
                d = math.sqrt(sum(((pi - qi) * s) ** 2 for pi, qi, s in zip(p, q, spacing)))
                best = min(best, d)
            out.append(best)
        return out

    dists = directed(pa, pb) + directed(pb, pa)
    return OracleResult(dists, cost=f"O(|dA||dB|) = {len(pa) * len(pb)}")


def percentile_linear(values, q):
    """Linear-interpolation percentile (q in [0, 100]) by explicit sort."""
    v = sorted(values)
    if len(v) == 1:
        return v[0]
    pos = (len(v) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def overlap_reference(a, b):
    a = np.asarray(a, dtype=bool).ravel().tolist()
    b = np.asarray(b, dtype=bool).ravel().tolist()
    inter = sum(1 for u, v in zip(a, b) if u and v)
    union = sum(1 for u, v in zip(a, b) if u or v)
    na, nb = sum(a), sum(b)
    if na + nb == 0:
        return 1.0, 1.0
    return 2.0 * inter / (na + nb), inter / union


def cosine_matrix(a, b):
    """Cosine similarity by explicit dot products and norms."""
    out = np.zeros((len(a), len(b)))
    for i, u in enumerate(a):
        for j, v in enumerate(b):
            dot = sum(float(x) * float(y) for x, y in zip(u, v))
            nu = math.sqrt(sum(float(x) ** 2 for x in u))
            nv = math.sqrt(sum(float(y) ** 2 for y in v))
            out[i, j] = dot / (nu * nv)
    return out


def topk_reference(scores, k):
    """Positives: k largest column sums; negatives: k smallest of the rest.

    Ties go to the lower column index. Implemented by a full sort of
    (key, index) tuples.
    """
    s = [sum(float(scores[i][j]) for i in range(len(scores))) for j in range(len(scores[0]))]
    order = sorted(range(len(s)), key=lambda j: (-s[j], j))
    pos = order[:k]
    rest = [j for j in range(len(s)) if j not in pos]
    neg = sorted(rest, key=lambda j: (s[j], j))[:k]
    return pos, neg


def contrastive_reference(anchors, positives, negatives, tau):
    """Sum over classes/anchors/positives of -log(e^{s+}/(e^{s+} + sum e^{s-}))."""
    total = 0.0
    for cls in anchors:
        for a in anchors[cls]:
            negs = [math.exp(_cos(a, n) / tau) for n in negatives[cls]]
            for p in positives[cls]:
                ep = math.exp(_cos(a, p) / tau)
                total += -math.log(ep / (ep + sum(negs)))
    return total


def _cos(u, v):
    dot = sum(float(x) * float(y) for x, y in zip(u, v))
    return dot / (math.sqrt(sum(float(x) ** 2 for x in u)) * math.sqrt(sum(float(y) ** 2 for y in v)))


def dice_loss_reference(p, y, smooth=0.0):
    """Per-class soft Dice loss averaged over classes; p, y shaped (C, ...)."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    losses = []
    for cidx in range(p.shape[0]):
        pc, yc = p[cidx].ravel(), y[cidx].ravel()
        inter = sum(float(u) * float(v) for u, v in zip(pc, yc))
        losses.append(1.0 - (2.0 * inter + smooth) / (float(pc.sum()) + float(yc.sum()) + smooth))
    return sum(losses) / len(losses)


def central_difference(fn, x, eps=1e-6):
    """Numerical gradient of scalar ``fn`` at numpy array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = fn(x)
        x[idx] = old - eps
        fm = fn(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g
