"""Pure-numpy attention kernels (reference backend).

Two attention computations over a sentence+candidates token sequence:

* ``full_attention_*``: masked scaled-dot-product attention that scores every
  allowed (query, key) pair, materializing the (L, L) weight matrix.
* ``structured_attention_*``: the reduced computation for the pattern where
  candidates never attend to other candidates. Sentence queries attend to all
  keys; each candidate row scores only the sentence keys plus its own block,
  jointly normalized, so the (L_C, L_C) cross-candidate score matrix is never
  materialized. The block contraction runs as an Einstein summation.

All arrays are float64; q/k/v are (n_heads, L, head_dim). Softmax rows whose
keys are all masked yield an all-zero weight row (zero attention output).
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"
COMPILED = False


def _masked_softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax treating -inf as masked; fully masked rows become zeros."""
    m = np.max(scores, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(scores - m)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom == 0.0, 1.0, denom)


def full_attention_forward(q, k, v, allowed, scale):
    """Returns (out, attn); attn is the (n_heads, L, L) weight matrix."""
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    scores = np.where(allowed[None, :, :], scores, -np.inf)
    attn = _masked_softmax(scores)
    out = np.matmul(attn, v)
    return out, attn


def full_attention_backward(d_out, q, k, v, attn, scale):
    d_attn = np.matmul(d_out, np.swapaxes(v, -1, -2))
    g = np.sum(attn * d_attn, axis=-1, keepdims=True)
    d_scores = attn * (d_attn - g)
    dq = np.matmul(d_scores, k) * scale
    dk = np.matmul(np.swapaxes(d_scores, -1, -2), q) * scale
    dv = np.matmul(np.swapaxes(attn, -1, -2), d_out)
    return dq, dk, dv


def _block_key_mask(n_candidates, block_size, block_lengths):
    """(K, B) True where the in-block offset holds a real token."""
    offsets = np.arange(block_size)[None, :]
    return offsets < np.asarray(block_lengths)[:, None]


def structured_attention_forward(
    q, k, v, sentence_len, n_candidates, block_size, block_lengths, scale
):
    """Candidate-to-candidate-free attention.

    Returns (out, cache) with cache = (a_sent, a_cs, a_cc):
      a_sent (H, L_S, L)     sentence rows over all keys,
      a_cs   (H, L_C, L_S)   candidate rows over sentence keys,
      a_cc   (H, K, B, B)    intra-block rows over own-block keys.
    """
    n_heads, total, head_dim = q.shape
    ls = sentence_len
    lc = n_candidates * block_size
    block_ok = _block_key_mask(n_candidates, block_size, block_lengths)
    key_valid = np.ones(total, dtype=bool)
    key_valid[ls:] = block_ok.reshape(-1)

    # Sentence rows: ordinary attention over every real key.
    s_scores = np.matmul(q[:, :ls], np.swapaxes(k, -1, -2)) * scale
    s_scores = np.where(key_valid[None, None, :], s_scores, -np.inf)
    a_sent = _masked_softmax(s_scores)
    out_s = np.matmul(a_sent, v)

    if n_candidates == 0:
        return out_s, (a_sent, np.zeros((n_heads, 0, ls)), np.zeros((n_heads, 0, block_size, block_size)))

    q_c = q[:, ls:]
    k_s, v_s = k[:, :ls], v[:, :ls]
    q_blk = q_c.reshape(n_heads, n_candidates, block_size, head_dim)
    k_blk = k[:, ls:].reshape(n_heads, n_candidates, block_size, head_dim)
    v_blk = v[:, ls:].reshape(n_heads, n_candidates, block_size, head_dim)

    cs_scores = np.matmul(q_c, np.swapaxes(k_s, -1, -2)) * scale  # (H, L_C, L_S)
    intra = np.einsum("hjrd,hjcd->hjrc", q_blk, k_blk) * scale  # (H, K, B, B)
    intra = np.where(block_ok[None, :, None, :], intra, -np.inf)

    # Joint normalization of sentence scores and own-block scores per row.
    joint = np.concatenate(
        [cs_scores.reshape(n_heads, n_candidates, block_size, ls), intra], axis=-1
    )
    probs = _masked_softmax(joint)
    a_cs = probs[..., :ls].reshape(n_heads, lc, ls)
    a_cc = probs[..., ls:]

    out_c = np.matmul(a_cs, v_s) + np.einsum("hjrc,hjcd->hjrd", a_cc, v_blk).reshape(
        n_heads, lc, head_dim
    )
    out = np.concatenate([out_s, out_c], axis=1)
    return out, (a_sent, a_cs, a_cc)


def structured_attention_backward(
    d_out, q, k, v, cache, sentence_len, n_candidates, block_size, block_lengths, scale
):
    a_sent, a_cs, a_cc = cache
    n_heads, total, head_dim = q.shape
    ls = sentence_len
    lc = n_candidates * block_size

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)

    # Sentence rows.
    d_out_s = d_out[:, :ls]
    d_attn = np.matmul(d_out_s, np.swapaxes(v, -1, -2))
    g = np.sum(a_sent * d_attn, axis=-1, keepdims=True)
    d_scores = a_sent * (d_attn - g)
    dq[:, :ls] += np.matmul(d_scores, k) * scale
    dk += np.matmul(np.swapaxes(d_scores, -1, -2), q[:, :ls]) * scale
    dv += np.matmul(np.swapaxes(a_sent, -1, -2), d_out_s)

    if n_candidates == 0:
        return dq, dk, dv

    q_c = q[:, ls:]
    k_s, v_s = k[:, :ls], v[:, :ls]
    q_blk = q_c.reshape(n_heads, n_candidates, block_size, head_dim)
    k_blk = k[:, ls:].reshape(n_heads, n_candidates, block_size, head_dim)
    v_blk = v[:, ls:].reshape(n_heads, n_candidates, block_size, head_dim)
    d_out_c = d_out[:, ls:]
    d_out_blk = d_out_c.reshape(n_heads, n_candidates, block_size, head_dim)

    d_acs = np.matmul(d_out_c, np.swapaxes(v_s, -1, -2))  # (H, L_C, L_S)
    d_acc = np.einsum("hjrd,hjcd->hjrc", d_out_blk, v_blk)  # (H, K, B, B)

    a_cs_blk = a_cs.reshape(n_heads, n_candidates, block_size, ls)
    d_acs_blk = d_acs.reshape(n_heads, n_candidates, block_size, ls)
    g_c = np.sum(a_cs_blk * d_acs_blk, axis=-1, keepdims=True) + np.sum(
        a_cc * d_acc, axis=-1, keepdims=True
    )  # (H, K, B, 1)

    dz_cs = a_cs_blk * (d_acs_blk - g_c)
    dz_cc = a_cc * (d_acc - g_c)

    dq_c = (
        np.matmul(dz_cs.reshape(n_heads, lc, ls), k_s)
        + np.einsum("hjrc,hjcd->hjrd", dz_cc, k_blk).reshape(n_heads, lc, head_dim)
    ) * scale
    dq[:, ls:] += dq_c
    dk[:, :ls] += np.matmul(np.swapaxes(dz_cs.reshape(n_heads, lc, ls), -1, -2), q_c) * scale
    dk_blk = np.einsum("hjrc,hjrd->hjcd", dz_cc, q_blk) * scale
    dk[:, ls:] += dk_blk.reshape(n_heads, lc, head_dim)
    dv[:, :ls] += np.matmul(np.swapaxes(a_cs, -1, -2), d_out_c)
    dv_blk = np.einsum("hjrc,hjrd->hjcd", a_cc, d_out_blk)
    dv[:, ls:] += dv_blk.reshape(n_heads, lc, head_dim)
    return dq, dk, dv
