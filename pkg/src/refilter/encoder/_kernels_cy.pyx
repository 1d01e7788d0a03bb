# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled attention kernels.

Same contracts as ``kernels_numpy``: masked full attention and the
candidate-to-candidate-free structured attention, forward and backward,
float64 throughout. Loops run without the GIL; results agree with the numpy
backend to floating-point roundoff (different summation order only).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp

cnp.import_array()

NAME = "cython"
COMPILED = True


def full_attention_forward(
    const double[:, :, ::1] q,
    const double[:, :, ::1] k,
    const double[:, :, ::1] v,
    const unsigned char[:, ::1] allowed,
    double scale,
):
    cdef Py_ssize_t n_heads = q.shape[0], length = q.shape[1], dim = q.shape[2]
    out_arr = np.zeros((n_heads, length, dim), dtype=np.float64)
    attn_arr = np.zeros((n_heads, length, length), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] attn = attn_arr
    cdef Py_ssize_t h, i, j, d
    cdef double s, m, z, inv, w
    cdef bint any_key
    with nogil:
        for h in range(n_heads):
            for i in range(length):
                m = -INFINITY
                any_key = False
                for j in range(length):
                    if allowed[i, j]:
                        s = 0.0
                        for d in range(dim):
                            s += q[h, i, d] * k[h, j, d]
                        s *= scale
                        attn[h, i, j] = s
                        if s > m:
                            m = s
                        any_key = True
                if not any_key:
                    continue  # fully masked row: zero weights, zero output
                z = 0.0
                for j in range(length):
                    if allowed[i, j]:
                        w = exp(attn[h, i, j] - m)
                        attn[h, i, j] = w
                        z += w
                inv = 1.0 / z
                for j in range(length):
                    if allowed[i, j]:
                        w = attn[h, i, j] * inv
                        attn[h, i, j] = w
                        for d in range(dim):
                            out[h, i, d] += w * v[h, j, d]
    return out_arr, attn_arr


def full_attention_backward(
    const double[:, :, ::1] d_out,
    const double[:, :, ::1] q,
    const double[:, :, ::1] k,
    const double[:, :, ::1] v,
    const double[:, :, ::1] attn,
    double scale,
):
    cdef Py_ssize_t n_heads = q.shape[0], length = q.shape[1], dim = q.shape[2]
    dq_arr = np.zeros((n_heads, length, dim), dtype=np.float64)
    dk_arr = np.zeros((n_heads, length, dim), dtype=np.float64)
    dv_arr = np.zeros((n_heads, length, dim), dtype=np.float64)
    scratch_arr = np.zeros(length, dtype=np.float64)
    cdef double[:, :, ::1] dq = dq_arr
    cdef double[:, :, ::1] dk = dk_arr
    cdef double[:, :, ::1] dv = dv_arr
    cdef double[::1] d_attn = scratch_arr
    cdef Py_ssize_t h, i, j, d
    cdef double g, ds, a
    with nogil:
        for h in range(n_heads):
            for i in range(length):
                g = 0.0
                for j in range(length):
                    a = attn[h, i, j]
                    if a != 0.0:
                        ds = 0.0
                        for d in range(dim):
                            ds += d_out[h, i, d] * v[h, j, d]
                        d_attn[j] = ds
                        g += a * ds
                    else:
                        d_attn[j] = 0.0
                for j in range(length):
                    a = attn[h, i, j]
                    if a == 0.0:
                        continue
                    ds = a * (d_attn[j] - g) * scale
                    for d in range(dim):
                        dq[h, i, d] += ds * k[h, j, d]
                        dk[h, j, d] += ds * q[h, i, d]
                        dv[h, j, d] += a * d_out[h, i, d]
    return dq_arr, dk_arr, dv_arr


def structured_attention_forward(
    const double[:, :, ::1] q,
    const double[:, :, ::1] k,
    const double[:, :, ::1] v,
    Py_ssize_t sentence_len,
    Py_ssize_t n_candidates,
    Py_ssize_t block_size,
    const cnp.int64_t[::1] block_lengths,
    double scale,
):
    cdef Py_ssize_t n_heads = q.shape[0], length = q.shape[1], dim = q.shape[2]
    cdef Py_ssize_t lc = n_candidates * block_size
    out_arr = np.zeros((n_heads, length, dim), dtype=np.float64)
    a_sent_arr = np.zeros((n_heads, sentence_len, length), dtype=np.float64)
    a_cs_arr = np.zeros((n_heads, lc, sentence_len), dtype=np.float64)
    a_cc_arr = np.zeros((n_heads, n_candidates, block_size, block_size), dtype=np.float64)
    valid_arr = np.zeros(length, dtype=np.uint8)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] a_sent = a_sent_arr
    cdef double[:, :, ::1] a_cs = a_cs_arr
    cdef double[:, :, :, ::1] a_cc = a_cc_arr
    cdef unsigned char[::1] valid = valid_arr
    cdef Py_ssize_t h, i, j, d, jb, r, o, row, key, ci
    cdef double s, m, z, inv, w
    with nogil:
        for i in range(sentence_len):
            valid[i] = 1
        for jb in range(n_candidates):
            for o in range(block_size):
                if o < block_lengths[jb]:
                    valid[sentence_len + jb * block_size + o] = 1

        # Sentence rows: ordinary attention over every real key.
        for h in range(n_heads):
            for i in range(sentence_len):
                m = -INFINITY
                for j in range(length):
                    if valid[j]:
                        s = 0.0
                        for d in range(dim):
                            s += q[h, i, d] * k[h, j, d]
                        s *= scale
                        a_sent[h, i, j] = s
                        if s > m:
                            m = s
                z = 0.0
                for j in range(length):
                    if valid[j]:
                        w = exp(a_sent[h, i, j] - m)
                        a_sent[h, i, j] = w
                        z += w
                inv = 1.0 / z
                for j in range(length):
                    if valid[j]:
                        w = a_sent[h, i, j] * inv
                        a_sent[h, i, j] = w
                        for d in range(dim):
                            out[h, i, d] += w * v[h, j, d]

        # Candidate rows: sentence keys plus own block, jointly normalized.
        for h in range(n_heads):
            for jb in range(n_candidates):
                for r in range(block_size):
                    ci = jb * block_size + r
                    row = sentence_len + ci
                    m = -INFINITY
                    for j in range(sentence_len):
                        s = 0.0
                        for d in range(dim):
                            s += q[h, row, d] * k[h, j, d]
                        s *= scale
                        a_cs[h, ci, j] = s
                        if s > m:
                            m = s
                    for o in range(block_size):
                        if o < block_lengths[jb]:
                            key = sentence_len + jb * block_size + o
                            s = 0.0
                            for d in range(dim):
                                s += q[h, row, d] * k[h, key, d]
                            s *= scale
                            a_cc[h, jb, r, o] = s
                            if s > m:
                                m = s
                    z = 0.0
                    for j in range(sentence_len):
                        w = exp(a_cs[h, ci, j] - m)
                        a_cs[h, ci, j] = w
                        z += w
                    for o in range(block_size):
                        if o < block_lengths[jb]:
                            w = exp(a_cc[h, jb, r, o] - m)
                            a_cc[h, jb, r, o] = w
                            z += w
                    inv = 1.0 / z
                    for j in range(sentence_len):
                        w = a_cs[h, ci, j] * inv
                        a_cs[h, ci, j] = w
                        for d in range(dim):
                            out[h, row, d] += w * v[h, j, d]
                    for o in range(block_size):
                        if o < block_lengths[jb]:
                            key = sentence_len + jb * block_size + o
                            w = a_cc[h, jb, r, o] * inv
                            a_cc[h, jb, r, o] = w
                            for d in range(dim):
                                out[h, row, d] += w * v[h, key, d]
    return out_arr, (a_sent_arr, a_cs_arr, a_cc_arr)


def structured_attention_backward(
    const double[:, :, ::1] d_out,
    const double[:, :, ::1] q,
    const double[:, :, ::1] k,
    const double[:, :, ::1] v,
    cache,
    Py_ssize_t sentence_len,
    Py_ssize_t n_candidates,
    Py_ssize_t block_size,
    const cnp.int64_t[::1] block_lengths,
    double scale,
):
    a_sent_arr, a_cs_arr, a_cc_arr = cache
    cdef const double[:, :, ::1] a_sent = a_sent_arr
    cdef const double[:, :, ::1] a_cs = a_cs_arr
    cdef const double[:, :, :, ::1] a_cc = a_cc_arr
    cdef Py_ssize_t n_heads = q.shape[0], length = q.shape[1], dim = q.shape[2]
    dq_arr = np.zeros((n_heads, length, dim), dtype=np.float64)
    dk_arr = np.zeros((n_heads, length, dim), dtype=np.float64)
    dv_arr = np.zeros((n_heads, length, dim), dtype=np.float64)
    scratch_arr = np.zeros(length, dtype=np.float64)
    cdef double[:, :, ::1] dq = dq_arr
    cdef double[:, :, ::1] dk = dk_arr
    cdef double[:, :, ::1] dv = dv_arr
    cdef double[::1] buf = scratch_arr
    cdef Py_ssize_t h, i, j, d, jb, r, o, row, key, ci
    cdef double g, ds, a
    with nogil:
        # Sentence rows.
        for h in range(n_heads):
            for i in range(sentence_len):
                g = 0.0
                for j in range(length):
                    a = a_sent[h, i, j]
                    if a != 0.0:
                        ds = 0.0
                        for d in range(dim):
                            ds += d_out[h, i, d] * v[h, j, d]
                        buf[j] = ds
                        g += a * ds
                    else:
                        buf[j] = 0.0
                for j in range(length):
                    a = a_sent[h, i, j]
                    if a == 0.0:
                        continue
                    ds = a * (buf[j] - g) * scale
                    for d in range(dim):
                        dq[h, i, d] += ds * k[h, j, d]
                        dk[h, j, d] += ds * q[h, i, d]
                        dv[h, j, d] += a * d_out[h, i, d]

        # Candidate rows.
        for h in range(n_heads):
            for jb in range(n_candidates):
                for r in range(block_size):
                    ci = jb * block_size + r
                    row = sentence_len + ci
                    g = 0.0
                    for j in range(sentence_len):
                        ds = 0.0
                        for d in range(dim):
                            ds += d_out[h, row, d] * v[h, j, d]
                        buf[j] = ds
                        g += a_cs[h, ci, j] * ds
                    for o in range(block_size):
                        if o < block_lengths[jb]:
                            key = sentence_len + jb * block_size + o
                            ds = 0.0
                            for d in range(dim):
                                ds += d_out[h, row, d] * v[h, key, d]
                            buf[sentence_len + o] = ds
                            g += a_cc[h, jb, r, o] * ds
                    for j in range(sentence_len):
                        a = a_cs[h, ci, j]
                        ds = a * (buf[j] - g) * scale
                        for d in range(dim):
                            dq[h, row, d] += ds * k[h, j, d]
                            dk[h, j, d] += ds * q[h, row, d]
                            dv[h, j, d] += a * d_out[h, row, d]
                    for o in range(block_size):
                        if o < block_lengths[jb]:
                            key = sentence_len + jb * block_size + o
                            a = a_cc[h, jb, r, o]
                            ds = a * (buf[sentence_len + o] - g) * scale
                            for d in range(dim):
                                dq[h, row, d] += ds * k[h, key, d]
                                dk[h, key, d] += ds * q[h, row, d]
                                dv[h, key, d] += a * d_out[h, row, d]
    return dq_arr, dk_arr, dv_arr
