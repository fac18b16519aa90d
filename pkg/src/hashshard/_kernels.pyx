# cython: language_level=3
"""Compiled kernels for the sparse forward/backward passes, hashing, neuron
selection and lazy Adam. Mirrors ``_pykernels`` signature for signature.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, isfinite, INFINITY, floor
from libc.stdlib cimport malloc, free, calloc, qsort
from libc.string cimport memset

cnp.import_array()

BACKEND = "cython"

ctypedef fused real:
    float
    double


cdef inline bint _full_row(const int[::1] in_idx, Py_ssize_t lo, Py_ssize_t hi,
                           Py_ssize_t d) noexcept nogil:
    # indices are strictly increasing, so endpoints decide it
    return hi - lo == d and d > 0 and in_idx[lo] == 0 and in_idx[hi - 1] == d - 1


def forward(const cnp.int64_t[::1] in_off, const int[::1] in_idx, const real[::1] in_val,
            const real[:, ::1] W, const real[::1] b,
            const cnp.int64_t[::1] act_off, const int[::1] act_loc,
            bint relu, real[::1] out, Py_ssize_t s0, Py_ssize_t s1):
    cdef Py_ssize_t s, a, k, lo, hi, d = W.shape[1], d4
    cdef int j
    cdef double z, z1, z2, z3
    cdef const real *wr
    cdef const real *xv
    with nogil:
        for s in range(s0, s1):
            lo = in_off[s]
            hi = in_off[s + 1]
            if _full_row(in_idx, lo, hi, d):
                xv = &in_val[lo]
                d4 = d - d % 4
                for a in range(act_off[s], act_off[s + 1]):
                    j = act_loc[a]
                    wr = &W[j, 0]
                    z = z1 = z2 = z3 = 0.0
                    for k in range(0, d4, 4):
                        z += <double>wr[k] * <double>xv[k]
                        z1 += <double>wr[k + 1] * <double>xv[k + 1]
                        z2 += <double>wr[k + 2] * <double>xv[k + 2]
                        z3 += <double>wr[k + 3] * <double>xv[k + 3]
                    for k in range(d4, d):
                        z += <double>wr[k] * <double>xv[k]
                    z = (z + z1) + (z2 + z3) + b[j]
                    if relu and z < 0.0:
                        z = 0.0
                    out[a] = <real>z
                continue
            for a in range(act_off[s], act_off[s + 1]):
                j = act_loc[a]
                z = 0.0
                for k in range(lo, hi):
                    z += <double>W[j, in_idx[k]] * <double>in_val[k]
                z += b[j]
                if relu and z < 0.0:
                    z = 0.0
                out[a] = <real>z


def backward(const cnp.int64_t[::1] in_off, const int[::1] in_idx, const real[::1] in_val,
             const real[:, ::1] W, const cnp.int64_t[::1] act_off, const int[::1] act_loc,
             const real[::1] err, real[:, ::1] gW, real[::1] gb,
             unsigned char[:, ::1] touched, unsigned char[::1] touched_rows,
             real[::1] in_err, bint want_in_err, Py_ssize_t s0, Py_ssize_t s1):
    cdef Py_ssize_t s, a, k, lo, hi, c, width, d = W.shape[1]
    cdef int j
    cdef double e, x
    cdef real *scratch = NULL
    cdef Py_ssize_t cap = 0
    cdef const real *wr
    cdef const real *xv
    cdef real *gr
    cdef real er
    with nogil:
        for s in range(s0, s1):
            lo = in_off[s]
            hi = in_off[s + 1]
            width = hi - lo
            if want_in_err and width > cap:
                free(scratch)
                cap = width
                scratch = <real *> malloc(cap * sizeof(real))
            if want_in_err and width > 0:
                memset(scratch, 0, width * sizeof(real))
            if _full_row(in_idx, lo, hi, d):
                xv = &in_val[lo]
                for a in range(act_off[s], act_off[s + 1]):
                    j = act_loc[a]
                    e = err[a]
                    gb[j] = <real>(gb[j] + e)
                    touched_rows[j] = 1
                    memset(&touched[j, 0], 1, d)
                    gr = &gW[j, 0]
                    er = <real>e
                    for k in range(d):
                        gr[k] += er * xv[k]
                    if want_in_err:
                        wr = &W[j, 0]
                        for k in range(d):
                            scratch[k] += er * wr[k]
            else:
                for a in range(act_off[s], act_off[s + 1]):
                    j = act_loc[a]
                    e = err[a]
                    gb[j] = <real>(gb[j] + e)
                    touched_rows[j] = 1
                    for k in range(lo, hi):
                        c = in_idx[k]
                        x = in_val[k]
                        gW[j, c] = <real>(gW[j, c] + e * x)
                        touched[j, c] = 1
                        if want_in_err:
                            scratch[k - lo] += <real>(e * W[j, c])
            if want_in_err:
                for k in range(lo, hi):
                    in_err[k] = <real>(in_err[k] + scratch[k - lo])
        free(scratch)


def adam(real[:, ::1] W, real[::1] b, real[:, ::1] mW, real[:, ::1] vW,
         real[::1] mb, real[::1] vb, real[:, ::1] gW, real[::1] gb,
         unsigned char[:, ::1] touched, unsigned char[::1] touched_rows,
         double lr, double beta1, double beta2, double eps, long t):
    cdef Py_ssize_t rows = W.shape[0], cols = W.shape[1], j, i
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    cdef double g, m, v
    cdef Py_ssize_t bad_row = -1, bad_col = -1
    with nogil:
        for j in range(rows):
            if not touched_rows[j]:
                continue
            if not isfinite(gb[j]):
                bad_row = j
                break
            for i in range(cols):
                if touched[j, i] and not isfinite(gW[j, i]):
                    bad_row = j
                    bad_col = i
                    break
            if bad_row >= 0:
                break
    if bad_row >= 0:
        return 1, bad_row, bad_col
    with nogil:
        for j in range(rows):
            if not touched_rows[j]:
                continue
            for i in range(cols):
                if touched[j, i]:
                    g = gW[j, i]
                    m = beta1 * mW[j, i] + (1.0 - beta1) * g
                    v = beta2 * vW[j, i] + (1.0 - beta2) * g * g
                    mW[j, i] = <real>m
                    vW[j, i] = <real>v
                    W[j, i] = <real>(W[j, i] - lr * (m / c1) / (sqrt(v / c2) + eps))
                    gW[j, i] = 0
                    touched[j, i] = 0
            g = gb[j]
            m = beta1 * mb[j] + (1.0 - beta1) * g
            v = beta2 * vb[j] + (1.0 - beta2) * g * g
            mb[j] = <real>m
            vb[j] = <real>v
            b[j] = <real>(b[j] - lr * (m / c1) / (sqrt(v / c2) + eps))
            gb[j] = 0
            touched_rows[j] = 0
    return 0, -1, -1


def srp_hash(const cnp.int64_t[::1] key_off, const int[::1] key_idx, const real[::1] key_val,
             const signed char[:, ::1] planes, int k_h, int l_t):
    cdef Py_ssize_t n = key_off.shape[0] - 1, s, k, dim = planes.shape[1], c, q
    cdef int t, j, f, n_fn = k_h * l_t
    cdef double x
    cdef cnp.uint32_t code
    codes_arr = np.zeros((n, l_t), dtype=np.uint32)
    cdef cnp.uint32_t[:, ::1] codes = codes_arr
    # coordinate-major list of nonzero plane entries (planes are ~2/3 zeros)
    cdef cnp.int64_t[::1] c_off = np.zeros(dim + 1, dtype=np.int64)
    nz = np.asarray(planes).T != 0
    np.cumsum(nz.sum(axis=1), out=np.asarray(c_off)[1:])
    cdef int[::1] c_fn = np.ascontiguousarray(np.nonzero(nz)[1], dtype=np.intc)
    cdef signed char[::1] c_sign = np.ascontiguousarray(np.asarray(planes).T[nz])
    cdef double *dots = <double *> malloc((n_fn if n_fn > 0 else 1) * sizeof(double))
    with nogil:
        for s in range(n):
            memset(dots, 0, n_fn * sizeof(double))
            for k in range(key_off[s], key_off[s + 1]):
                x = key_val[k]
                c = key_idx[k]
                for q in range(c_off[c], c_off[c + 1]):
                    if c_sign[q] > 0:
                        dots[c_fn[q]] += x
                    else:
                        dots[c_fn[q]] -= x
            for t in range(l_t):
                code = 0
                for j in range(k_h):
                    code = (code << 1) | (1 if dots[t * k_h + j] > 0.0 else 0)
                codes[s, t] = code
    free(dots)
    return codes_arr


def dwta_hash(const cnp.int64_t[::1] key_off, const int[::1] key_idx, const real[::1] key_val,
              const int[:, ::1] windows, Py_ssize_t dim, int k_h, int l_t, int m, int bits):
    cdef Py_ssize_t n = key_off.shape[0] - 1, s, k
    cdef int n_fn = k_h * l_t, f, w, t, j, p, v
    cdef double best, x
    cdef cnp.uint32_t code
    codes_arr = np.zeros((n, l_t), dtype=np.uint32)
    cdef cnp.uint32_t[:, ::1] codes = codes_arr
    cdef double *dense = <double *> calloc(dim if dim > 0 else 1, sizeof(double))
    cdef int *raw = <int *> malloc(n_fn * sizeof(int))
    with nogil:
        for s in range(n):
            for k in range(key_off[s], key_off[s + 1]):
                dense[key_idx[k]] = key_val[k]
            for f in range(n_fn):
                best = -INFINITY
                raw[f] = -1
                for w in range(m):
                    x = dense[windows[f, w]]
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
                    code = (code << bits) | <cnp.uint32_t>v
                codes[s, t] = code
            for k in range(key_off[s], key_off[s + 1]):
                dense[key_idx[k]] = 0.0
    free(dense)
    free(raw)
    return codes_arr


cdef inline void _lookup(const cnp.uint32_t[::1] bkeys, const cnp.int64_t[::1] tb_off,
                         const cnp.int64_t[::1] bptr, int t, cnp.uint32_t code,
                         Py_ssize_t *a, Py_ssize_t *z) noexcept nogil:
    cdef Py_ssize_t lo = tb_off[t], hi = tb_off[t + 1], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if bkeys[mid] < code:
            lo = mid + 1
        else:
            hi = mid
    if lo < tb_off[t + 1] and bkeys[lo] == code:
        a[0] = bptr[lo]
        z[0] = bptr[lo + 1]
    else:
        a[0] = 0
        z[0] = 0


cdef Py_ssize_t _candidates(const cnp.uint32_t[:, ::1] codes, Py_ssize_t s,
                            const cnp.uint32_t[::1] bkeys, const cnp.int64_t[::1] tb_off,
                            const cnp.int64_t[::1] bptr, const int[::1] bids,
                            cnp.int64_t *stamp, cnp.int64_t mark, int *out) noexcept nogil:
    cdef Py_ssize_t a = 0, z = 0, q, c = 0
    cdef int t, j
    for t in range(codes.shape[1]):
        _lookup(bkeys, tb_off, bptr, t, codes[s, t], &a, &z)
        for q in range(a, z):
            j = bids[q]
            if stamp[j] != mark:
                stamp[j] = mark
                if out != NULL:
                    out[c] = j
                c += 1
    return c


def candidate_counts(const cnp.uint32_t[:, ::1] codes, const cnp.uint32_t[::1] bkeys,
                     const cnp.int64_t[::1] tb_off, const cnp.int64_t[::1] bptr,
                     const int[::1] bids, Py_ssize_t shard_size,
                     const cnp.int64_t[::1] forced_off, const int[::1] forced_ids):
    cdef Py_ssize_t n = codes.shape[0], s, q
    counts_arr = np.zeros(n, dtype=np.int64)
    nforced_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef cnp.int64_t[::1] nforced = nforced_arr
    cdef cnp.int64_t *stamp = <cnp.int64_t *> calloc(shard_size if shard_size > 0 else 1,
                                                     sizeof(cnp.int64_t))
    cdef int j
    with nogil:
        for s in range(n):
            for q in range(forced_off[s], forced_off[s + 1]):
                j = forced_ids[q]
                if stamp[j] != s + 1:
                    stamp[j] = s + 1
                    nforced[s] += 1
            counts[s] = _candidates(codes, s, bkeys, tb_off, bptr, bids, stamp, s + 1, NULL)
    free(stamp)
    return counts_arr, nforced_arr


cdef int _cmp_int(const void *a, const void *b) noexcept nogil:
    cdef int x = (<const int *>a)[0], y = (<const int *>b)[0]
    return (x > y) - (x < y)


def select_fill(const cnp.uint32_t[:, ::1] codes, const cnp.uint32_t[::1] bkeys,
                const cnp.int64_t[::1] tb_off, const cnp.int64_t[::1] bptr,
                const int[::1] bids, Py_ssize_t shard_size,
                const cnp.int64_t[::1] forced_off, const int[::1] forced_ids,
                Py_ssize_t budget, bint fill_uniform, const double[::1] uniforms,
                const cnp.int64_t[::1] u_off, const cnp.int64_t[::1] out_off,
                int[::1] out_ids):
    cdef Py_ssize_t n = codes.shape[0], s, q, c, k, nch, need, avail, i, r, jj, uo
    cdef int j, tmp
    cdef Py_ssize_t cap = shard_size if shard_size > 0 else 1
    cdef cnp.int64_t *stamp = <cnp.int64_t *> calloc(cap, sizeof(cnp.int64_t))
    cdef int *cand = <int *> malloc(cap * sizeof(int))
    cdef int *nonc = <int *> malloc(cap * sizeof(int))
    cdef int *chosen
    with nogil:
        for s in range(n):
            chosen = &out_ids[out_off[s]] if out_off[s + 1] > out_off[s] else NULL
            nch = 0
            for q in range(forced_off[s], forced_off[s + 1]):
                j = forced_ids[q]
                if stamp[j] != s + 1:
                    stamp[j] = s + 1
                    chosen[nch] = j
                    nch += 1
            k = budget - nch
            if k < 0:
                k = 0
            c = _candidates(codes, s, bkeys, tb_off, bptr, bids, stamp, s + 1, cand)
            uo = u_off[s]
            if c > k:
                if k > 0:
                    for jj in range(k, c):
                        r = <Py_ssize_t>floor(uniforms[uo + jj - k] * (jj + 1))
                        if r > jj:
                            r = jj
                        if r < k:
                            cand[r] = cand[jj]
                for q in range(k):
                    chosen[nch] = cand[q]
                    nch += 1
            else:
                for q in range(c):
                    chosen[nch] = cand[q]
                    nch += 1
                need = k - c
                if fill_uniform and need > 0:
                    avail = 0
                    for q in range(shard_size):
                        if stamp[q] != s + 1:
                            nonc[avail] = <int>q
                            avail += 1
                    if need > avail:
                        need = avail
                    for i in range(need):
                        r = i + <Py_ssize_t>floor(uniforms[uo + i] * (avail - i))
                        if r > avail - 1:
                            r = avail - 1
                        tmp = nonc[i]
                        nonc[i] = nonc[r]
                        nonc[r] = tmp
                    for i in range(need):
                        chosen[nch] = nonc[i]
                        nch += 1
            if nch > 1:
                qsort(chosen, nch, sizeof(int), _cmp_int)
    free(stamp)
    free(cand)
    free(nonc)
