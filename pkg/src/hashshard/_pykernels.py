"""Pure-numpy reference kernels.

Same signatures and the same arithmetic as the compiled ``_kernels`` module;
selected automatically when the extension is not built (or when
``HASHSHARD_PURE=1``). Selection consumes the same pre-drawn uniforms in the
same order, so both backends return identical neuron sets.
"""
from __future__ import annotations

import math

import numpy as np

BACKEND = "python"


def forward(in_off, in_idx, in_val, W, b, act_off, act_loc, relu, out, s0, s1):
    for s in range(s0, s1):
        lo, hi = in_off[s], in_off[s + 1]
        a0, a1 = act_off[s], act_off[s + 1]
        if a1 == a0:
            continue
        rows = act_loc[a0:a1]
        if hi == lo:
            z = b[rows].astype(np.float64)
        else:
            cols = in_idx[lo:hi]
            x = in_val[lo:hi].astype(np.float64)
            z = W[np.ix_(rows, cols)].astype(np.float64) @ x + b[rows]
        if relu:
            z = np.maximum(z, 0.0)
        out[a0:a1] = z


def backward(in_off, in_idx, in_val, W, act_off, act_loc, err, gW, gb,
             touched, touched_rows, in_err, want_in_err, s0, s1):
    for s in range(s0, s1):
        lo, hi = in_off[s], in_off[s + 1]
        a0, a1 = act_off[s], act_off[s + 1]
        if a1 == a0:
            continue
        rows = act_loc[a0:a1]
        e = err[a0:a1].astype(np.float64)
        # rows are unique within a sample, so fancy-index accumulation is safe
        gb[rows] += e
        touched_rows[rows] = 1
        if hi == lo:
            continue
        cols = in_idx[lo:hi]
        x = in_val[lo:hi].astype(np.float64)
        block = np.ix_(rows, cols)
        gW[block] += np.outer(e, x)
        touched[block] = 1
        if want_in_err:
            in_err[lo:hi] += e @ W[block].astype(np.float64)


def adam(W, b, mW, vW, mb, vb, gW, gb, touched, touched_rows,
         lr, beta1, beta2, eps, t):
    """Lazy Adam over touched entries. Returns (status, row, col); col -1 is the bias."""
    rows = np.flatnonzero(touched_rows)
    if rows.size == 0:
        return 0, -1, -1
    sub_t = touched[rows].astype(bool)
    g_sub = gW[rows]
    bad = sub_t & ~np.isfinite(g_sub)
    badb = ~np.isfinite(gb[rows])
    for k in range(rows.size):
        if badb[k]:
            return 1, int(rows[k]), -1
        if bad[k].any():
            return 1, int(rows[k]), int(np.flatnonzero(bad[k])[0])
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    r_idx, c_idx = np.nonzero(sub_t)
    rr = rows[r_idx]
    g = gW[rr, c_idx].astype(np.float64)
    m = beta1 * mW[rr, c_idx] + (1.0 - beta1) * g
    v = beta2 * vW[rr, c_idx] + (1.0 - beta2) * g * g
    w = W[rr, c_idx] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    mW[rr, c_idx] = m
    vW[rr, c_idx] = v
    W[rr, c_idx] = w
    g = gb[rows].astype(np.float64)
    m = beta1 * mb[rows] + (1.0 - beta1) * g
    v = beta2 * vb[rows] + (1.0 - beta2) * g * g
    b[rows] = b[rows] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    mb[rows] = m
    vb[rows] = v
    gW[rr, c_idx] = 0
    gb[rows] = 0
    touched[rr, c_idx] = 0
    touched_rows[rows] = 0
    return 0, -1, -1


def srp_hash(key_off, key_idx, key_val, planes, k_h, l_t):
    n = key_off.shape[0] - 1
    codes = np.zeros((n, l_t), dtype=np.uint32)
    for s in range(n):
        lo, hi = key_off[s], key_off[s + 1]
        dots = planes[:, key_idx[lo:hi]].astype(np.float64) @ key_val[lo:hi].astype(np.float64)
        bits = (dots > 0).reshape(l_t, k_h)
        for t in range(l_t):
            code = 0
            for j in range(k_h):
                code = (code << 1) | int(bits[t, j])
            codes[s, t] = code
    return codes


def dwta_hash(key_off, key_idx, key_val, windows, dim, k_h, l_t, m, bits):
    n = key_off.shape[0] - 1
    n_fn = k_h * l_t
    codes = np.zeros((n, l_t), dtype=np.uint32)
    dense = np.zeros(dim, dtype=np.float64)
    for s in range(n):
        lo, hi = key_off[s], key_off[s + 1]
        idx = key_idx[lo:hi]
        dense[idx] = key_val[lo:hi]
        vals = dense[windows]  # (n_fn, m)
        raw = np.full(n_fn, -1, dtype=np.int64)
        for f in range(n_fn):
            best = -math.inf
            for w in range(m):
                x = vals[f, w]
                if x != 0.0 and x > best:
                    best = x
                    raw[f] = w
        for t in range(l_t):
            code = 0
            for j in range(k_h):
                f = t * k_h + j
                v = raw[f]
                p = 0
                while v < 0 and p < n_fn:
                    p += 1
                    v = raw[(f + p) % n_fn]
                if v < 0:
                    v = m
                code = (code << bits) | int(v)
            codes[s, t] = code
        dense[idx] = 0.0
    return codes


def _lookup(bkeys, tb_off, bptr, t, code):
    lo, hi = tb_off[t], tb_off[t + 1]
    pos = lo + int(np.searchsorted(bkeys[lo:hi], code))
    if pos < hi and bkeys[pos] == code:
        return bptr[pos], bptr[pos + 1]
    return 0, 0


def _candidates(codes, s, bkeys, tb_off, bptr, bids, stamp, mark):
    out = []
    for t in range(codes.shape[1]):
        a, z = _lookup(bkeys, tb_off, bptr, t, codes[s, t])
        for j in bids[a:z]:
            if stamp[j] != mark:
                stamp[j] = mark
                out.append(int(j))
    return out


def candidate_counts(codes, bkeys, tb_off, bptr, bids, shard_size, forced_off, forced_ids):
    n = codes.shape[0]
    stamp = np.zeros(shard_size, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    nforced = np.zeros(n, dtype=np.int64)
    for s in range(n):
        mark = s + 1
        for j in forced_ids[forced_off[s]:forced_off[s + 1]]:
            if stamp[j] != mark:
                stamp[j] = mark
                nforced[s] += 1
        counts[s] = len(_candidates(codes, s, bkeys, tb_off, bptr, bids, stamp, mark))
    return counts, nforced


def select_fill(codes, bkeys, tb_off, bptr, bids, shard_size, forced_off, forced_ids,
                budget, fill_uniform, uniforms, u_off, out_off, out_ids):
    n = codes.shape[0]
    stamp = np.zeros(shard_size, dtype=np.int64)
    for s in range(n):
        mark = s + 1
        chosen = []
        for j in forced_ids[forced_off[s]:forced_off[s + 1]]:
            if stamp[j] != mark:
                stamp[j] = mark
                chosen.append(int(j))
        k = max(0, budget - len(chosen))
        cand = _candidates(codes, s, bkeys, tb_off, bptr, bids, stamp, mark)
        u = uniforms[u_off[s]:u_off[s + 1]]
        c = len(cand)
        if c > k:
            res = cand[:k]
            if k > 0:
                for q, j in enumerate(range(k, c)):
                    r = min(int(u[q] * (j + 1)), j)
                    if r < k:
                        res[r] = cand[j]
            chosen.extend(res)
        else:
            chosen.extend(cand)
            need = k - c
            if fill_uniform and need > 0:
                nonc = [j for j in range(shard_size) if stamp[j] != mark]
                avail = len(nonc)
                need = min(need, avail)
                for i in range(need):
                    r = min(i + int(u[i] * (avail - i)), avail - 1)
                    nonc[i], nonc[r] = nonc[r], nonc[i]
                chosen.extend(nonc[:need])
        chosen.sort()
        o = out_off[s]
        out_ids[o:o + len(chosen)] = chosen
