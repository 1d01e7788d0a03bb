"""Miniature pre-norm transformer encoder with explicit backprop.

Everything runs in float64 numpy. The forward pass stores the activations
needed by the hand-written backward pass; the attention inner products are
delegated to a backend (compiled kernels when available, numpy otherwise).

The encoder supports two attention modes over a sentence+candidates layout:

* full: every (query, key) pair allowed by a boolean mask is scored.
* structured: the candidate-to-candidate-free computation. Equivalent to the
  full mode under the mask that blocks cross-candidate attention but keeps
  each candidate's own slot/block, while touching far fewer score entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ConfigError, NumericalError
from . import backend as backend_mod
from .config import EncoderConfig, InputLayout, QuadrantFlags
from .masks import attention_mask

ParameterSet = dict[str, np.ndarray]

_LN_EPS = 1e-5
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class PassCounter:
    """Tally of encoder forward passes, for speed accounting."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def increment(self) -> None:
        self.count += 1

    def reset(self) -> None:
        self.count = 0


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_encoder_params(
    config: EncoderConfig,
    vocab_size: int,
    rng: np.random.Generator,
    token_embeddings: np.ndarray | None = None,
    position_embeddings: np.ndarray | None = None,
) -> ParameterSet:
    """Fresh parameter set; projection weights N(0, 1/sqrt(fan_in)) so
    sub-layer outputs carry input-dependent signal from step one, biases
    zero, LN gains one.

    Pre-built embedding tables (e.g. with registered type tokens) can be
    passed in; they are copied into the parameter set.
    """
    d, f = config.d_model, config.ffn_dim
    params: ParameterSet = {}
    if token_embeddings is not None:
        params["emb.token"] = np.array(token_embeddings, dtype=np.float64)
    else:
        params["emb.token"] = rng.normal(0.0, 0.1, size=(vocab_size, d))
    if position_embeddings is not None:
        params["emb.pos"] = np.array(position_embeddings, dtype=np.float64)
    else:
        params["emb.pos"] = rng.normal(0.0, 0.1, size=(config.max_positions, d))
    for i in range(config.n_layers):
        p = f"layer{i}."
        for nm in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + nm] = rng.normal(0.0, d**-0.5, size=(d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            params[p + "attn." + nm] = np.zeros(d)
        params[p + "ln1.gamma"] = np.ones(d)
        params[p + "ln1.beta"] = np.zeros(d)
        params[p + "ln2.gamma"] = np.ones(d)
        params[p + "ln2.beta"] = np.zeros(d)
        params[p + "ffn.w1"] = rng.normal(0.0, d**-0.5, size=(d, f))
        params[p + "ffn.b1"] = np.zeros(f)
        params[p + "ffn.w2"] = rng.normal(0.0, f**-0.5, size=(f, d))
        params[p + "ffn.b2"] = np.zeros(d)
    return params


def add_linear_head(
    params: ParameterSet,
    name: str,
    d_in: int,
    d_out: int,
    rng: np.random.Generator | None = None,
    zero_init: bool = False,
) -> None:
    if zero_init or rng is None:
        params[f"head.{name}.w"] = np.zeros((d_in, d_out))
    else:
        params[f"head.{name}.w"] = rng.normal(0.0, 0.02, size=(d_in, d_out))
    params[f"head.{name}.b"] = np.zeros(d_out)


def validate_params(params: ParameterSet, config: EncoderConfig) -> None:
    d, f = config.d_model, config.ffn_dim
    if "emb.token" not in params or params["emb.token"].shape[1] != d:
        raise ConfigError("emb.token missing or width mismatch")
    if params["emb.pos"].shape != (config.max_positions, d):
        raise ConfigError("emb.pos shape mismatch with config")
    for i in range(config.n_layers):
        p = f"layer{i}."
        for nm, shape in (
            ("attn.wq", (d, d)),
            ("attn.wo", (d, d)),
            ("ffn.w1", (d, f)),
            ("ffn.w2", (f, d)),
        ):
            if p + nm not in params:
                raise ConfigError(f"missing parameter {p + nm}")
            if params[p + nm].shape != shape:
                raise ConfigError(f"{p + nm} has shape {params[p+nm].shape}, want {shape}")


# ---------------------------------------------------------------------------
# Primitive layers
# ---------------------------------------------------------------------------


def _layer_norm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def activation_forward(x, kind: str = "gelu"):
    """Returns (y, cache) for the configured nonlinearity."""
    if kind == "relu":
        return np.maximum(x, 0.0), x
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def activation_backward(dy, cache, kind: str = "gelu"):
    if kind == "relu":
        return dy * (cache > 0.0)
    x, t = cache
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


_act_forward = activation_forward
_act_backward = activation_backward


def _split_heads(x, n_heads):
    length, d = x.shape
    return np.ascontiguousarray(
        x.reshape(length, n_heads, d // n_heads).transpose(1, 0, 2)
    )


def _merge_heads(x):
    n_heads, length, head_dim = x.shape
    return x.transpose(1, 0, 2).reshape(length, n_heads * head_dim)


def _dropout_mask(shape, rate, rng):
    return (rng.random(shape) >= rate) / (1.0 - rate)


# ---------------------------------------------------------------------------
# Encoder forward / backward
# ---------------------------------------------------------------------------


@dataclass
class _LayerCache:
    ln1: tuple
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn_cache: tuple | np.ndarray
    attn_drop: tuple | None
    attn_merged: np.ndarray
    h_norm: np.ndarray
    ln2: tuple
    f_in: np.ndarray
    z1: np.ndarray
    act_cache: object
    a1: np.ndarray
    ffn_drop: np.ndarray | None


@dataclass
class EncodeCache:
    token_ids: np.ndarray
    position_ids: np.ndarray
    structured: bool
    mask: np.ndarray | None
    layout: InputLayout | None
    layers: list[_LayerCache] = field(default_factory=list)
    backend_name: str = "numpy"


def encode(
    token_ids: np.ndarray,
    position_ids: np.ndarray,
    params: ParameterSet,
    config: EncoderConfig,
    *,
    mask: np.ndarray | None = None,
    layout: InputLayout | None = None,
    structured: bool = False,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
    counter: PassCounter | None = None,
    backend=None,
) -> tuple[np.ndarray, EncodeCache]:
    """Run the encoder stack once.

    Returns (hiddens, cache): hiddens has shape (n_layers+1, L, D) with row 0
    the embedding sum, row i the output of layer i. Dropout is active only
    when ``train`` is true and the configured rate is positive.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    position_ids = np.asarray(position_ids, dtype=np.int64)
    if token_ids.shape != position_ids.shape:
        raise ConfigError("token/position id length mismatch")
    if token_ids.size and token_ids.max() >= params["emb.token"].shape[0]:
        raise ConfigError("token id out of embedding-table range")
    if position_ids.size and position_ids.max() >= params["emb.pos"].shape[0]:
        raise ConfigError("position id exceeds max_positions")
    if structured:
        if layout is None:
            raise ConfigError("structured attention requires an input layout")
        if layout.total_len != token_ids.size:
            raise ConfigError("layout does not match token sequence length")
    else:
        if mask is None:
            raise ConfigError("full attention requires a mask")
        mask = np.ascontiguousarray(np.asarray(mask) != 0, dtype=np.uint8)
        if mask.shape != (token_ids.size, token_ids.size):
            raise ConfigError("mask shape does not match token sequence length")

    bk = backend if backend is not None else backend_mod.get_backend()
    if counter is not None:
        counter.increment()
    use_dropout = train and config.dropout > 0.0
    if use_dropout and dropout_rng is None:
        raise ConfigError("dropout requires a dropout rng in train mode")

    scale = 1.0 / math.sqrt(config.head_dim)
    x = params["emb.token"][token_ids] + params["emb.pos"][position_ids]
    hiddens = [x]
    cache = EncodeCache(
        token_ids=token_ids,
        position_ids=position_ids,
        structured=structured,
        mask=mask,
        layout=layout,
        backend_name=getattr(bk, "NAME", "numpy"),
    )

    block_lens = (
        np.asarray(layout.block_lengths, dtype=np.int64) if layout is not None else None
    )
    for i in range(config.n_layers):
        p = f"layer{i}."
        h_norm, ln1 = _layer_norm_forward(x, params[p + "ln1.gamma"], params[p + "ln1.beta"])
        q = _split_heads(h_norm @ params[p + "attn.wq"] + params[p + "attn.bq"], config.n_heads)
        k = _split_heads(h_norm @ params[p + "attn.wk"] + params[p + "attn.bk"], config.n_heads)
        v = _split_heads(h_norm @ params[p + "attn.wv"] + params[p + "attn.bv"], config.n_heads)

        if structured:
            att_out, att_cache = bk.structured_attention_forward(
                q, k, v,
                layout.sentence_len, layout.n_candidates, layout.block_size,
                block_lens, scale,
            )
        else:
            att_out, att_cache = bk.full_attention_forward(q, k, v, mask, scale)

        attn_drop = None
        if use_dropout:
            att_out, attn_drop = _apply_attention_dropout(
                att_cache, v, config, layout if structured else None, dropout_rng
            )

        attn_merged = _merge_heads(att_out)
        x = x + attn_merged @ params[p + "attn.wo"] + params[p + "attn.bo"]

        f_in, ln2 = _layer_norm_forward(x, params[p + "ln2.gamma"], params[p + "ln2.beta"])
        z1 = f_in @ params[p + "ffn.w1"] + params[p + "ffn.b1"]
        a1, act_cache = _act_forward(z1, config.activation)
        ffn_drop = None
        a1_d = a1
        if use_dropout:
            ffn_drop = _dropout_mask(a1.shape, config.dropout, dropout_rng)
            a1_d = a1 * ffn_drop
        x = x + a1_d @ params[p + "ffn.w2"] + params[p + "ffn.b2"]

        cache.layers.append(
            _LayerCache(
                ln1=ln1, q=q, k=k, v=v, attn_cache=att_cache, attn_drop=attn_drop,
                attn_merged=attn_merged, h_norm=h_norm, ln2=ln2, f_in=f_in,
                z1=z1, act_cache=act_cache, a1=a1_d, ffn_drop=ffn_drop,
            )
        )
        hiddens.append(x)
    return np.stack(hiddens), cache


def _apply_attention_dropout(att_cache, v, config, layout, rng):
    """Drop attention weights (inverted dropout) and recompute the context.

    Returns the new per-head context plus the drop masks for backward."""
    rate = config.dropout
    if layout is None:
        attn = att_cache
        m = _dropout_mask(attn.shape, rate, rng)
        return np.matmul(attn * m, v), (m,)
    a_sent, a_cs, a_cc = att_cache
    n_heads = v.shape[0]
    head_dim = v.shape[2]
    ls = layout.sentence_len
    lc = layout.candidate_len
    m_sent = _dropout_mask(a_sent.shape, rate, rng)
    m_cs = _dropout_mask(a_cs.shape, rate, rng)
    m_cc = _dropout_mask(a_cc.shape, rate, rng)
    out_s = np.matmul(a_sent * m_sent, v)
    v_blk = v[:, ls:].reshape(n_heads, layout.n_candidates, layout.block_size, head_dim)
    out_c = np.matmul(a_cs * m_cs, v[:, :ls]) + np.einsum(
        "hjrc,hjcd->hjrd", a_cc * m_cc, v_blk
    ).reshape(n_heads, lc, head_dim)
    return np.concatenate([out_s, out_c], axis=1), (m_sent, m_cs, m_cc)


def encode_backward(
    d_hidden: np.ndarray,
    cache: EncodeCache,
    params: ParameterSet,
    config: EncoderConfig,
    backend=None,
) -> ParameterSet:
    """Backpropagate a gradient w.r.t. the final hidden states.

    Returns gradients for every encoder parameter (embedding gradients are
    dense arrays with contributions scattered at the used rows).
    """
    bk = backend if backend is not None else backend_mod.get_backend()
    grads: ParameterSet = {}
    scale = 1.0 / math.sqrt(config.head_dim)
    layout = cache.layout
    block_lens = (
        np.asarray(layout.block_lengths, dtype=np.int64) if layout is not None else None
    )
    dx = np.array(d_hidden, dtype=np.float64)
    for i in reversed(range(config.n_layers)):
        p = f"layer{i}."
        lc = cache.layers[i]

        # FFN branch (residual: dx flows through both paths).
        dz2 = dx
        grads[p + "ffn.w2"] = lc.a1.T @ dz2
        grads[p + "ffn.b2"] = dz2.sum(axis=0)
        da1 = dz2 @ params[p + "ffn.w2"].T
        if lc.ffn_drop is not None:
            da1 = da1 * lc.ffn_drop
        dz1 = _act_backward(da1, lc.act_cache, config.activation)
        grads[p + "ffn.w1"] = lc.f_in.T @ dz1
        grads[p + "ffn.b1"] = dz1.sum(axis=0)
        df_in = dz1 @ params[p + "ffn.w1"].T
        dln2, dg2, db2 = _layer_norm_backward(df_in, lc.ln2)
        grads[p + "ln2.gamma"] = dg2
        grads[p + "ln2.beta"] = db2
        dx = dx + dln2

        # Attention branch.
        do = dx
        grads[p + "attn.wo"] = lc.attn_merged.T @ do
        grads[p + "attn.bo"] = do.sum(axis=0)
        d_att_merged = do @ params[p + "attn.wo"].T
        d_att = _split_heads(d_att_merged, config.n_heads)

        if lc.attn_drop is not None:
            dq, dk, dv = _attention_dropout_backward(
                d_att, lc, config, layout if cache.structured else None, scale
            )
        elif cache.structured:
            dq, dk, dv = bk.structured_attention_backward(
                d_att, lc.q, lc.k, lc.v, lc.attn_cache,
                layout.sentence_len, layout.n_candidates, layout.block_size,
                block_lens, scale,
            )
        else:
            dq, dk, dv = bk.full_attention_backward(
                d_att, lc.q, lc.k, lc.v, lc.attn_cache, scale
            )

        dq_m, dk_m, dv_m = (_merge_heads(t) for t in (dq, dk, dv))
        grads[p + "attn.wq"] = lc.h_norm.T @ dq_m
        grads[p + "attn.bq"] = dq_m.sum(axis=0)
        grads[p + "attn.wk"] = lc.h_norm.T @ dk_m
        grads[p + "attn.bk"] = dk_m.sum(axis=0)
        grads[p + "attn.wv"] = lc.h_norm.T @ dv_m
        grads[p + "attn.bv"] = dv_m.sum(axis=0)
        dh = (
            dq_m @ params[p + "attn.wq"].T
            + dk_m @ params[p + "attn.wk"].T
            + dv_m @ params[p + "attn.wv"].T
        )
        dln1, dg1, db1 = _layer_norm_backward(dh, lc.ln1)
        grads[p + "ln1.gamma"] = dg1
        grads[p + "ln1.beta"] = db1
        dx = dx + dln1

    d_tok = np.zeros_like(params["emb.token"])
    np.add.at(d_tok, cache.token_ids, dx)
    d_pos = np.zeros_like(params["emb.pos"])
    np.add.at(d_pos, cache.position_ids, dx)
    grads["emb.token"] = d_tok
    grads["emb.pos"] = d_pos
    return grads


def _attention_dropout_backward(d_att, lc, config, layout, scale):
    """Backward through softmax attention with dropped weights (numpy only)."""
    if layout is None:
        attn = lc.attn_cache
        (m,) = lc.attn_drop
        attn_d = attn * m
        dv = np.matmul(np.swapaxes(attn_d, -1, -2), d_att)
        d_attn = np.matmul(d_att, np.swapaxes(lc.v, -1, -2)) * m
        g = np.sum(attn * d_attn, axis=-1, keepdims=True)
        d_scores = attn * (d_attn - g)
        dq = np.matmul(d_scores, lc.k) * scale
        dk = np.matmul(np.swapaxes(d_scores, -1, -2), lc.q) * scale
        return dq, dk, dv

    a_sent, a_cs, a_cc = lc.attn_cache
    m_sent, m_cs, m_cc = lc.attn_drop
    n_heads, total, head_dim = lc.q.shape
    ls = layout.sentence_len
    nc, b = layout.n_candidates, layout.block_size
    lcand = nc * b
    q_c = lc.q[:, ls:]
    k_s, v_s = lc.k[:, :ls], lc.v[:, :ls]
    q_blk = q_c.reshape(n_heads, nc, b, head_dim)
    k_blk = lc.k[:, ls:].reshape(n_heads, nc, b, head_dim)
    v_blk = lc.v[:, ls:].reshape(n_heads, nc, b, head_dim)

    dq = np.zeros_like(lc.q)
    dk = np.zeros_like(lc.k)
    dv = np.zeros_like(lc.v)

    d_out_s = d_att[:, :ls]
    attn_d = a_sent * m_sent
    dv += np.matmul(np.swapaxes(attn_d, -1, -2), d_out_s)
    d_attn = np.matmul(d_out_s, np.swapaxes(lc.v, -1, -2)) * m_sent
    g = np.sum(a_sent * d_attn, axis=-1, keepdims=True)
    d_scores = a_sent * (d_attn - g)
    dq[:, :ls] += np.matmul(d_scores, lc.k) * scale
    dk += np.matmul(np.swapaxes(d_scores, -1, -2), lc.q[:, :ls]) * scale

    if nc == 0:
        return dq, dk, dv

    d_out_c = d_att[:, ls:]
    d_out_blk = d_out_c.reshape(n_heads, nc, b, head_dim)
    dv[:, :ls] += np.matmul(np.swapaxes(a_cs * m_cs, -1, -2), d_out_c)
    dv_blk = np.einsum("hjrc,hjrd->hjcd", a_cc * m_cc, d_out_blk)
    dv[:, ls:] += dv_blk.reshape(n_heads, lcand, head_dim)

    d_acs = np.matmul(d_out_c, np.swapaxes(v_s, -1, -2)) * m_cs
    d_acc = np.einsum("hjrd,hjcd->hjrc", d_out_blk, v_blk) * m_cc
    a_cs_blk = a_cs.reshape(n_heads, nc, b, ls)
    d_acs_blk = d_acs.reshape(n_heads, nc, b, ls)
    g_c = np.sum(a_cs_blk * d_acs_blk, axis=-1, keepdims=True) + np.sum(
        a_cc * d_acc, axis=-1, keepdims=True
    )
    dz_cs = a_cs_blk * (d_acs_blk - g_c)
    dz_cc = a_cc * (d_acc - g_c)
    dq[:, ls:] += (
        np.matmul(dz_cs.reshape(n_heads, lcand, ls), k_s)
        + np.einsum("hjrc,hjcd->hjrd", dz_cc, k_blk).reshape(n_heads, lcand, head_dim)
    ) * scale
    dk[:, :ls] += np.matmul(np.swapaxes(dz_cs.reshape(n_heads, lcand, ls), -1, -2), q_c) * scale
    dk[:, ls:] += (np.einsum("hjrc,hjrd->hjcd", dz_cc, q_blk) * scale).reshape(
        n_heads, lcand, head_dim
    )
    return dq, dk, dv


# ---------------------------------------------------------------------------
# Spec-level conveniences
# ---------------------------------------------------------------------------


def forward_full(
    token_ids,
    layout: InputLayout,
    flags: QuadrantFlags,
    params: ParameterSet,
    config: EncoderConfig,
    **kwargs,
) -> tuple[np.ndarray, EncodeCache]:
    """Quadrant-masked full attention over the layout."""
    mask = attention_mask(layout, flags)
    return encode(
        token_ids, layout.position_ids(config), params, config, mask=mask, **kwargs
    )


def forward_structured(
    token_ids,
    layout: InputLayout,
    params: ParameterSet,
    config: EncoderConfig,
    **kwargs,
) -> tuple[np.ndarray, EncodeCache]:
    """Reduced attention without candidate-to-candidate interaction."""
    return encode(
        token_ids,
        layout.position_ids(config),
        params,
        config,
        layout=layout,
        structured=True,
        **kwargs,
    )


def attention_entry_count(layout: InputLayout, mode: str) -> int:
    """Exact number of attention score entries per head per layer."""
    ls = layout.sentence_len
    lc = layout.candidate_len
    if mode == "full":
        return (ls + lc) ** 2
    if mode == "structured":
        return ls * ls + 2 * ls * lc + layout.n_candidates * layout.block_size**2
    raise ValueError(f"unknown mode {mode!r}")


def grad_check(
    params: ParameterSet,
    loss_fn: Callable[..., tuple[float, ParameterSet | None]],
    epsilon: float = 1e-5,
    n_samples: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_fn(params, compute_grad)`` must return (loss, grads-or-None) and
    be deterministic (dropout off). Coordinates are sampled across tensors
    proportionally to their size. Returns the max relative error with
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    loss, grads = loss_fn(params, True)
    if not np.isfinite(loss):
        raise NumericalError("loss is not finite")
    names = sorted(grads)
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    probs = sizes / sizes.sum()
    worst = 0.0
    for _ in range(n_samples):
        name = names[int(rng.choice(len(names), p=probs))]
        idx = int(rng.integers(params[name].size))
        orig = params[name].flat[idx]
        params[name].flat[idx] = orig + epsilon
        lp, _ = loss_fn(params, False)
        params[name].flat[idx] = orig - epsilon
        lm, _ = loss_fn(params, False)
        params[name].flat[idx] = orig
        numeric = (lp - lm) / (2.0 * epsilon)
        analytic = grads[name].flat[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
