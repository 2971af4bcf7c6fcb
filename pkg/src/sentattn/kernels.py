"""Hot numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``SENTATTN_NUMBA`` is not set to
``0``/``false``/``off``. Both paths are always importable as ``np_<name>`` and
``nb_<name>`` so they can be compared directly (see ``benchmarks/``).
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SENTATTN_NUMBA", "1").lower() not in ("0", "false", "off", "no")

PHI_CODES = {"elu_plus_one": 0, "relu": 1, "exp": 2}

JIT_OPTIONS = {"cache": True, "nogil": True}


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def np_segment_sum(x, offsets):
    """Sum the last axis of ``x`` over segments ``[offsets[i], offsets[i+1])``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    return np.add.reduceat(x, offsets[:-1], axis=-1)


def np_phi(x, code):
    if code == 0:
        return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    if code == 1:
        return np.maximum(x, 0.0)
    return np.exp(x)


def np_feature_sums(k, offsets, code):
    """Per-sentence sums of phi(k): k is (H, N, dh) -> (H, N1, dh)."""
    f = np_phi(k, code)
    return np.add.reduceat(f, offsets[:-1], axis=1)


def np_subset_attend(q, k, v, row_ptr, tok):
    """Single-query attention per row over a row-specific token subset.

    q: (B, H, dh) already scaled; k, v: (H, N, dh); tokens of row b are
    ``tok[row_ptr[b]:row_ptr[b+1]]``. Returns (B, H, dh).
    """
    B, H, dh = q.shape
    out = np.empty((B, H, dh))
    for b in range(B):
        idx = tok[row_ptr[b]:row_ptr[b + 1]]
        kb = k[:, idx, :]
        logits = np.einsum("hd,hnd->hn", q[b], kb)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out[b] = np.einsum("hn,hnd->hd", w, v[:, idx, :])
    return out


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_gru_forward(x, mask, w_ih, w_hh, b_ih, b_hh):
    """Masked GRU over (S, T, I) inputs; padded steps carry the state through.

    Returns hs (S, T, Hd) and the gate cache (h_prev, r, z, n, gh_n) needed by
    :func:`np_gru_backward`.
    """
    S, T, _ = x.shape
    Hd = w_hh.shape[0]
    gi = x @ w_ih + b_ih
    h = np.zeros((S, Hd))
    hs = np.empty((S, T, Hd))
    h_prev = np.empty((S, T, Hd))
    r_all = np.empty((S, T, Hd))
    z_all = np.empty((S, T, Hd))
    n_all = np.empty((S, T, Hd))
    ghn_all = np.empty((S, T, Hd))
    for t in range(T):
        gh = h @ w_hh + b_hh
        g = gi[:, t]
        r = _sigmoid(g[:, :Hd] + gh[:, :Hd])
        z = _sigmoid(g[:, Hd:2 * Hd] + gh[:, Hd:2 * Hd])
        ghn = gh[:, 2 * Hd:]
        n = np.tanh(g[:, 2 * Hd:] + r * ghn)
        h_new = (1.0 - z) * n + z * h
        m = mask[:, t:t + 1]
        h_prev[:, t] = h
        h = np.where(m, h_new, h)
        hs[:, t] = h
        r_all[:, t] = r
        z_all[:, t] = z
        n_all[:, t] = n
        ghn_all[:, t] = ghn
    return hs, (h_prev, r_all, z_all, n_all, ghn_all)


def np_gru_backward(dhs, x, mask, w_ih, w_hh, cache):
    h_prev, r_all, z_all, n_all, ghn_all = cache
    S, T, Hd = dhs.shape
    dgi = np.zeros((S, T, 3 * Hd))
    dw_hh = np.zeros_like(w_hh)
    db_hh = np.zeros(3 * Hd)
    dh = np.zeros((S, Hd))
    for t in range(T - 1, -1, -1):
        dh = dh + dhs[:, t]
        m = mask[:, t:t + 1].astype(np.float64)
        d_new = dh * m
        carry = dh * (1.0 - m)
        r, z, n, ghn, hp = r_all[:, t], z_all[:, t], n_all[:, t], ghn_all[:, t], h_prev[:, t]
        dan = d_new * (1.0 - z) * (1.0 - n * n)
        daz = d_new * (hp - n) * z * (1.0 - z)
        dar = dan * ghn * r * (1.0 - r)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        dgi[:, t] = np.concatenate([dar, daz, dan], axis=1)
        dw_hh += hp.T @ dgh
        db_hh += dgh.sum(axis=0)
        dh = d_new * z + dgh @ w_hh.T + carry
    dx = dgi @ w_ih.T
    dw_ih = x.reshape(-1, x.shape[2]).T @ dgi.reshape(-1, 3 * Hd)
    db_ih = dgi.sum(axis=(0, 1))
    return dx, dw_ih, dw_hh, db_ih, db_hh


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(**JIT_OPTIONS)
    def _nb_segment_sum_2d(x, offsets):
        R = x.shape[0]
        S = offsets.shape[0] - 1
        out = np.zeros((R, S))
        for row in range(R):
            for s in range(S):
                acc = 0.0
                for j in range(offsets[s], offsets[s + 1]):
                    acc += x[row, j]
                out[row, s] = acc
        return out

    def nb_segment_sum(x, offsets):
        x = np.ascontiguousarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        out = _nb_segment_sum_2d(x.reshape(-1, x.shape[-1]), np.asarray(offsets, dtype=np.int64))
        return out.reshape(lead + (out.shape[-1],))

    @njit(**JIT_OPTIONS)
    def _nb_phi_scalar(x, code):
        if code == 0:
            return x + 1.0 if x > 0.0 else np.exp(x)
        if code == 1:
            return x if x > 0.0 else 0.0
        return np.exp(x)

    @njit(**JIT_OPTIONS)
    def _nb_feature_sums(k, offsets, code):
        H, _, dh = k.shape
        S = offsets.shape[0] - 1
        out = np.zeros((H, S, dh))
        for h in range(H):
            for s in range(S):
                for j in range(offsets[s], offsets[s + 1]):
                    for d in range(dh):
                        out[h, s, d] += _nb_phi_scalar(k[h, j, d], code)
        return out

    def nb_feature_sums(k, offsets, code):
        return _nb_feature_sums(np.ascontiguousarray(k, dtype=np.float64),
                                np.asarray(offsets, dtype=np.int64), code)

    @njit(**JIT_OPTIONS)
    def _nb_subset_attend(q, k, v, row_ptr, tok):
        B, H, dh = q.shape
        out = np.zeros((B, H, dh))
        for b in range(B):
            lo = row_ptr[b]
            hi = row_ptr[b + 1]
            n = hi - lo
            w = np.empty(n)
            for h in range(H):
                mx = -np.inf
                for t in range(n):
                    j = tok[lo + t]
                    acc = 0.0
                    for d in range(dh):
                        acc += q[b, h, d] * k[h, j, d]
                    w[t] = acc
                    if acc > mx:
                        mx = acc
                tot = 0.0
                for t in range(n):
                    w[t] = np.exp(w[t] - mx)
                    tot += w[t]
                for t in range(n):
                    j = tok[lo + t]
                    c = w[t] / tot
                    for d in range(dh):
                        out[b, h, d] += c * v[h, j, d]
        return out

    def nb_subset_attend(q, k, v, row_ptr, tok):
        return _nb_subset_attend(np.ascontiguousarray(q), np.ascontiguousarray(k),
                                 np.ascontiguousarray(v), np.asarray(row_ptr, dtype=np.int64),
                                 np.asarray(tok, dtype=np.int64))

    @njit(**JIT_OPTIONS)
    def _nb_gru_forward(x, mask, w_ih, w_hh, b_ih, b_hh):
        S, T, _ = x.shape
        Hd = w_hh.shape[0]
        hs = np.empty((S, T, Hd))
        h_prev = np.empty((S, T, Hd))
        r_all = np.empty((S, T, Hd))
        z_all = np.empty((S, T, Hd))
        n_all = np.empty((S, T, Hd))
        ghn_all = np.empty((S, T, Hd))
        h = np.zeros((S, Hd))
        for t in range(T):
            gi = np.dot(np.ascontiguousarray(x[:, t, :]), w_ih)
            gh = np.dot(h, w_hh)
            for s in range(S):
                on = mask[s, t]
                for u in range(Hd):
                    r = 1.0 / (1.0 + np.exp(-(gi[s, u] + b_ih[u] + gh[s, u] + b_hh[u])))
                    z = 1.0 / (1.0 + np.exp(-(gi[s, Hd + u] + b_ih[Hd + u] + gh[s, Hd + u] + b_hh[Hd + u])))
                    ghn = gh[s, 2 * Hd + u] + b_hh[2 * Hd + u]
                    n = np.tanh(gi[s, 2 * Hd + u] + b_ih[2 * Hd + u] + r * ghn)
                    hp = h[s, u]
                    h_prev[s, t, u] = hp
                    r_all[s, t, u] = r
                    z_all[s, t, u] = z
                    n_all[s, t, u] = n
                    ghn_all[s, t, u] = ghn
                    hs[s, t, u] = (1.0 - z) * n + z * hp if on else hp
            for s in range(S):
                for u in range(Hd):
                    h[s, u] = hs[s, t, u]
        return hs, h_prev, r_all, z_all, n_all, ghn_all

    def nb_gru_forward(x, mask, w_ih, w_hh, b_ih, b_hh):
        hs, *cache = _nb_gru_forward(np.ascontiguousarray(x), np.ascontiguousarray(mask),
                                     np.ascontiguousarray(w_ih), np.ascontiguousarray(w_hh),
                                     np.ascontiguousarray(b_ih), np.ascontiguousarray(b_hh))
        return hs, tuple(cache)

    @njit(**JIT_OPTIONS)
    def _nb_gru_backward(dhs, mask, w_hh, h_prev, r_all, z_all, n_all, ghn_all):
        S, T, Hd = dhs.shape
        dgi = np.zeros((S, T, 3 * Hd))
        dw_hh = np.zeros_like(w_hh)
        db_hh = np.zeros(3 * Hd)
        dh = np.zeros((S, Hd))
        dgh = np.empty((S, 3 * Hd))
        w_hh_t = np.ascontiguousarray(w_hh.T)
        for t in range(T - 1, -1, -1):
            carry = np.zeros((S, Hd))
            for s in range(S):
                on = mask[s, t]
                for u in range(Hd):
                    g = dh[s, u] + dhs[s, t, u]
                    if on:
                        d_new = g
                        carry[s, u] = 0.0
                    else:
                        d_new = 0.0
                        carry[s, u] = g
                    r = r_all[s, t, u]
                    z = z_all[s, t, u]
                    n = n_all[s, t, u]
                    dan = d_new * (1.0 - z) * (1.0 - n * n)
                    daz = d_new * (h_prev[s, t, u] - n) * z * (1.0 - z)
                    dar = dan * ghn_all[s, t, u] * r * (1.0 - r)
                    dgh[s, u] = dar
                    dgh[s, Hd + u] = daz
                    dgh[s, 2 * Hd + u] = dan * r
                    dgi[s, t, u] = dar
                    dgi[s, t, Hd + u] = daz
                    dgi[s, t, 2 * Hd + u] = dan
                    carry[s, u] += d_new * z
            hp = np.ascontiguousarray(h_prev[:, t, :])
            dw_hh += np.dot(hp.T.copy(), dgh)
            for s in range(S):
                for c in range(3 * Hd):
                    db_hh[c] += dgh[s, c]
            dh = np.dot(dgh, w_hh_t) + carry
        return dgi, dw_hh, db_hh

    def nb_gru_backward(dhs, x, mask, w_ih, w_hh, cache):
        h_prev, r_all, z_all, n_all, ghn_all = cache
        dgi, dw_hh, db_hh = _nb_gru_backward(np.ascontiguousarray(dhs), np.ascontiguousarray(mask),
                                             np.ascontiguousarray(w_hh), h_prev, r_all, z_all,
                                             n_all, ghn_all)
        Hd3 = dgi.shape[2]
        dx = dgi @ w_ih.T
        dw_ih = x.reshape(-1, x.shape[2]).T @ dgi.reshape(-1, Hd3)
        db_ih = dgi.sum(axis=(0, 1))
        return dx, dw_ih, dw_hh, db_ih, db_hh


if USE_NUMBA:
    segment_sum = nb_segment_sum
    feature_sums = nb_feature_sums
    subset_attend = nb_subset_attend
    gru_forward = nb_gru_forward
    gru_backward = nb_gru_backward
else:
    segment_sum = np_segment_sum
    feature_sums = np_feature_sums
    subset_attend = np_subset_attend
    gru_forward = np_gru_forward
    gru_backward = np_gru_backward


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
