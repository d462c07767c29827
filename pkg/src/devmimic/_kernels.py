"""Compiled recurrent scans for one GRU layer.

The numpy path in :mod:`devmimic.rnn` spends most of its time in per-step
call overhead at these tiny widths; these loops do the same arithmetic in
one compiled call per layer. Input projections and weight-gradient sums
stay in numpy (they are single large matmuls).

All arrays use the batch-innermost layout ``(T, features, B)`` so the
inner loops run over contiguous batch lanes.
"""

import math

import numba
import numpy as np


_LOG2E = 1.4426950408889634
# Cody-Waite split of ln 2; the high part is exact in float32
_LN2_HI = 0.693359375
_LN2_LO = -2.1219444005469057e-4


def exp_params(dtype) -> tuple:
    """(clamp, mantissa bits, exponent bias, int dtype) for :func:`_exp_neg`."""
    if np.dtype(dtype) == np.float32:
        return -87.0, 23, 127, np.int32
    return -708.0, 52, 1023, np.int64


@numba.njit(cache=True, fastmath=True)
def _exp_neg(src, scale, dst, bits, clamp, mant, bias):
    """dst = exp(-scale * |src|) elementwise over flat arrays.

    Range-reduced Taylor polynomial plus an exponent assembled in integer
    bits, written so LLVM vectorizes it (libm exp does not).
    """
    one = src.dtype.type(1.0)
    for i in range(src.shape[0]):
        v = max(-scale * abs(src[i]), clamp)
        n = math.floor(v * _LOG2E + 0.5)
        r = (v - n * _LN2_HI) - n * _LN2_LO
        p = one + r * (1.0 + r * (1 / 2 + r * (1 / 6 + r * (1 / 24 + r * (1 / 120 + r * (
            1 / 720 + r * (1 / 5040 + r * (1 / 40320 + r * (1 / 362880 + r * (
                1 / 3628800 + r / 39916800))))))))))
        dst[i] = p
        bits[i] = (bits.dtype.type(n) + bias) << mant
    scale_2n = bits.view(dst.dtype)
    for i in range(src.shape[0]):
        dst[i] *= scale_2n[i]


@numba.njit(cache=True, fastmath=True)
def _sigmoid_inplace(x, e):
    """x <- sigmoid(x) given e = exp(-|x|)."""
    for i in range(x.shape[0]):
        num = 1.0 if x[i] >= 0 else e[i]
        x[i] = num / (1.0 + e[i])


@numba.njit(cache=True, fastmath=True)
def _tanh_inplace(x, e):
    """x <- tanh(x) given e = exp(-2|x|)."""
    for i in range(x.shape[0]):
        t = (1.0 - e[i]) / (1.0 + e[i])
        x[i] = t if x[i] >= 0 else -t


@numba.njit(cache=True, fastmath=True)
def _step(a_t, U, h, zs_t, rs_t, rhs_t, hcs_t, acc, e, bits, clamp, mant, bias):
    """One GRU step over the batch; leaves z, r, r*h and the candidate in the outputs."""
    H, B = h.shape
    zr = acc[:2 * H * B].reshape((2 * H, B))
    for j in range(2 * H):
        for b in range(B):
            zr[j, b] = a_t[j, b]
    for k in range(H):
        for j in range(2 * H):
            u = U[k, j]
            for b in range(B):
                zr[j, b] += h[k, b] * u
    flat = acc[:2 * H * B]
    _exp_neg(flat, 1.0, e, bits, clamp, mant, bias)
    _sigmoid_inplace(flat, e)
    for j in range(H):
        for b in range(B):
            zs_t[j, b] = zr[j, b]
            r = zr[H + j, b]
            rs_t[j, b] = r
            rhs_t[j, b] = r * h[j, b]
    cand = acc[:H * B].reshape((H, B))
    for j in range(H):
        for b in range(B):
            cand[j, b] = a_t[2 * H + j, b]
    for k in range(H):
        for j in range(H):
            u = U[k, 2 * H + j]
            for b in range(B):
                cand[j, b] += rhs_t[k, b] * u
    flat = acc[:H * B]
    _exp_neg(flat, 2.0, e, bits, clamp, mant, bias)
    _tanh_inplace(flat, e)
    for j in range(H):
        for b in range(B):
            hcs_t[j, b] = cand[j, b]


@numba.njit(cache=True)
def forward_scan(a, U, hs, zs, rs, hcs, rhs, clamp, mant, bias, bits):
    """Fill hs[1:], zs, rs, hcs, rhs from the input projection ``a`` (T, 3H, B)."""
    T, H3, B = a.shape
    H = H3 // 3
    acc = np.empty(2 * H * B, dtype=a.dtype)
    e = np.empty(2 * H * B, dtype=a.dtype)
    for t in range(T):
        _step(a[t], U, hs[t], zs[t], rs[t], rhs[t], hcs[t], acc, e, bits, clamp, mant, bias)
        for j in range(H):
            for b in range(B):
                h = hs[t, j, b]
                hs[t + 1, j, b] = h + zs[t, j, b] * (hcs[t, j, b] - h)


@numba.njit(cache=True)
def predict_scan(a, U, out, clamp, mant, bias, bits):
    T, H3, B = a.shape
    H = H3 // 3
    acc = np.empty(2 * H * B, dtype=a.dtype)
    e = np.empty(2 * H * B, dtype=a.dtype)
    h = np.zeros((H, B), dtype=a.dtype)
    z = np.empty((H, B), dtype=a.dtype)
    r = np.empty((H, B), dtype=a.dtype)
    rh = np.empty((H, B), dtype=a.dtype)
    hc = np.empty((H, B), dtype=a.dtype)
    for t in range(T):
        _step(a[t], U, h, z, r, rh, hc, acc, e, bits, clamp, mant, bias)
        for j in range(H):
            for b in range(B):
                h[j, b] = h[j, b] + z[j, b] * (hc[j, b] - h[j, b])
                out[t, j, b] = h[j, b]


@numba.njit(cache=True, fastmath=True)
def backward_scan(d_seq, hs, zs, rs, hcs, U, window, d_a):
    """Fill d_a (T, 3H, B) with gradients w.r.t. the gate pre-activations.

    ``window`` <= 0 means full BPTT; otherwise the recurrent gradient is cut
    at every step index divisible by ``window``.
    """
    T, H, B = d_seq.shape
    dh_next = np.zeros((H, B), dtype=d_seq.dtype)
    dh = np.empty((H, B), dtype=d_seq.dtype)
    d_rh = np.empty((H, B), dtype=d_seq.dtype)
    for t in range(T - 1, -1, -1):
        da = d_a[t]
        for j in range(H):
            for b in range(B):
                dh[j, b] = d_seq[t, j, b] + dh_next[j, b]
                hc = hcs[t, j, b]
                da[2 * H + j, b] = dh[j, b] * zs[t, j, b] * (1 - hc * hc)
        d_rh[:] = 0
        for k in range(H):
            for j in range(H):
                u = U[k, 2 * H + j]
                for b in range(B):
                    d_rh[k, b] += da[2 * H + j, b] * u
        for j in range(H):
            for b in range(B):
                z = zs[t, j, b]
                r = rs[t, j, b]
                h_prev = hs[t, j, b]
                da[j, b] = dh[j, b] * (hcs[t, j, b] - h_prev) * z * (1 - z)
                da[H + j, b] = d_rh[j, b] * h_prev * r * (1 - r)
        if window > 0 and t % window == 0:
            dh_next[:] = 0
            continue
        for k in range(H):
            for b in range(B):
                dh_next[k, b] = dh[k, b] * (1 - zs[t, k, b]) + d_rh[k, b] * rs[t, k, b]
            for j in range(2 * H):
                u = U[k, j]
                for b in range(B):
                    dh_next[k, b] += da[j, b] * u


@numba.njit(cache=True, fastmath=True)
def outer_sum(left, right, out):
    """out[i, j] = sum over (t, b) of left[t, i, b] * right[t, j, b]."""
    T, I, B = left.shape
    J = right.shape[1]
    out[:] = 0
    for t in range(T):
        for i in range(I):
            for j in range(J):
                s = left.dtype.type(0)
                for b in range(B):
                    s += left[t, i, b] * right[t, j, b]
                out[i, j] += s
