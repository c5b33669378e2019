"""Selective state-space scan kernels.

Shapes follow the diagonal (per channel, per state) selective SSM::

    x      (B, L, D)        input sequence
    a_bar  (B, L, D, N)     per-step transition gain
    b_bar  (B, L, D, N)     per-step input gain
    c      (B, L, N)        per-step readout

    h_t = a_bar_t * h_{t-1} + b_bar_t * x_t      (h_0 = 0)
    y_t = sum_n c_t[n] * h_t[:, n]

Each kernel exists twice: a numba loop nest and a numpy version that
vectorizes over (B, D, N) and loops over time. ``scan_forward`` and
``scan_backward`` dispatch on the backend selected in ``_accel``.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit


@njit(cache=True)
def _scan_forward_nb(x, a_bar, b_bar, c):
    B, L, D, N = a_bar.shape
    y = np.zeros((B, L, D), dtype=x.dtype)
    hs = np.zeros((B, L, D, N), dtype=x.dtype)
    h = np.zeros((D, N), dtype=x.dtype)
    for b in range(B):
        h[:] = 0.0
        # time-major walk keeps every access contiguous
        for t in range(L):
            for d in range(D):
                xv = x[b, t, d]
                acc = 0.0
                for n in range(N):
                    v = a_bar[b, t, d, n] * h[d, n] + b_bar[b, t, d, n] * xv
                    h[d, n] = v
                    hs[b, t, d, n] = v
                    acc += c[b, t, n] * v
                y[b, t, d] = acc
    return y, hs


@njit(cache=True)
def _scan_backward_nb(gy, x, a_bar, b_bar, c, hs):
    B, L, D, N = a_bar.shape
    gx = np.zeros_like(x)
    ga = np.zeros_like(a_bar)
    gb = np.zeros_like(b_bar)
    gc = np.zeros_like(c)
    g = np.zeros((D, N), dtype=x.dtype)
    for b in range(B):
        g[:] = 0.0
        for t in range(L - 1, -1, -1):
            for d in range(D):
                gyv = gy[b, t, d]
                xv = x[b, t, d]
                acc = 0.0
                for n in range(N):
                    gv = g[d, n] + gyv * c[b, t, n]
                    gc[b, t, n] += gyv * hs[b, t, d, n]
                    if t > 0:
                        ga[b, t, d, n] = gv * hs[b, t - 1, d, n]
                    gb[b, t, d, n] = gv * xv
                    acc += gv * b_bar[b, t, d, n]
                    g[d, n] = gv * a_bar[b, t, d, n]
                gx[b, t, d] = acc
    return gx, ga, gb, gc


def _scan_forward_np(x, a_bar, b_bar, c):
    B, L, D, N = a_bar.shape
    hs = np.empty((B, L, D, N), dtype=x.dtype)
    h = np.zeros((B, D, N), dtype=x.dtype)
    for t in range(L):
        h = a_bar[:, t] * h + b_bar[:, t] * x[:, t, :, None]
        hs[:, t] = h
    y = np.einsum("bldn,bln->bld", hs, c)
    return y, hs


def _scan_backward_np(gy, x, a_bar, b_bar, c, hs):
    B, L, D, N = a_bar.shape
    gc = np.einsum("bld,bldn->bln", gy, hs)
    ga = np.empty_like(a_bar)
    gb = np.empty_like(b_bar)
    gx = np.empty_like(x)
    g = np.zeros((B, D, N), dtype=x.dtype)
    for t in range(L - 1, -1, -1):
        g = g + gy[:, t, :, None] * c[:, t, None, :]
        h_prev = hs[:, t - 1] if t > 0 else np.zeros_like(g)
        ga[:, t] = g * h_prev
        gb[:, t] = g * x[:, t, :, None]
        gx[:, t] = np.sum(g * b_bar[:, t], axis=-1)
        g = g * a_bar[:, t]
    return gx, ga, gb, gc


def _check(x, a_bar, b_bar, c):
    if x.ndim != 3 or a_bar.ndim != 4 or b_bar.ndim != 4 or c.ndim != 3:
        raise ValueError("expected x (B,L,D), a_bar/b_bar (B,L,D,N), c (B,L,N)")
    B, L, D = x.shape
    if a_bar.shape != b_bar.shape or a_bar.shape[:3] != (B, L, D):
        raise ValueError(
            f"a_bar {a_bar.shape} / b_bar {b_bar.shape} do not match x {x.shape}"
        )
    if c.shape != (B, L, a_bar.shape[3]):
        raise ValueError(f"c {c.shape} does not match (B, L, N) = {(B, L, a_bar.shape[3])}")


def scan_forward(x, a_bar, b_bar, c, use_numba=None):
    """Run the recurrence; returns ``(y, hs)`` where ``hs`` holds every state."""
    _check(x, a_bar, b_bar, c)
    arrs = [np.ascontiguousarray(v, dtype=np.float64 if x.dtype == np.float64 else np.float32)
            for v in (x, a_bar, b_bar, c)]
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba:
        return _scan_forward_nb(*arrs)
    return _scan_forward_np(*arrs)


def scan_backward(gy, x, a_bar, b_bar, c, hs, use_numba=None):
    """Vector-Jacobian product of ``scan_forward`` w.r.t. (x, a_bar, b_bar, c)."""
    dt = np.float64 if x.dtype == np.float64 else np.float32
    arrs = [np.ascontiguousarray(v, dtype=dt) for v in (gy, x, a_bar, b_bar, c, hs)]
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba:
        return _scan_backward_nb(*arrs)
    return _scan_backward_np(*arrs)
