"""Vanilla ViT forward/backward path.

Pre-norm residual blocks: the token sequence is (1+N, C) with row 0 the
CLS token. Every block emits a head-averaged class-attention vector
(the CLS query's softmax row), which downstream token selection consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .kernels import (
    gelu_backward,
    gelu_map,
    layer_norm_backward,
    layer_norm_rows,
    softmax_rows,
    softmax_rows_backward,
)
from .params import ParamSet, RngState

LN_EPS = 1e-6


@dataclass
class EncoderConfig:
    image_side: int
    patch_side: int
    channels_in: int
    embed_dim: int
    heads: int
    depth: int
    num_classes: int
    ffn_hidden: int = 0  # 0 means the 4*C default

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by "
                f"patch_side {self.patch_side}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.ffn_hidden == 0:
            self.ffn_hidden = 4 * self.embed_dim

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side ** 2 * self.channels_in

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class AttentionRecord:
    """Per-layer class attention; full matrices only in analysis mode."""
    cls_attn: list = field(default_factory=list)      # each (1+N,)
    full_attn: list = field(default_factory=list)     # each (T, T), head-averaged

    def add(self, cls_vec, full=None):
        self.cls_attn.append(cls_vec)
        if full is not None:
            self.full_attn.append(full)


def init_params(cfg: EncoderConfig, rng: RngState) -> ParamSet:
    """DeiT-conventional init: truncated normal(0.02) weights, zero biases."""
    C = cfg.embed_dim
    params = ParamSet()
    params.add("patch_proj.w", rng.trunc_normal(0.02, (cfg.patch_dim, C)))
    params.add("patch_proj.b", np.zeros(C), decay=False)
    params.add("cls", rng.normal(0.02, (C,)), decay=False)
    params.add("pos", rng.normal(0.02, (1 + cfg.n_patches, C)), decay=False)
    for i in range(cfg.depth):
        pre = f"layer{i}."
        params.add(pre + "ln1.g", np.ones(C), decay=False)
        params.add(pre + "ln1.b", np.zeros(C), decay=False)
        params.add(pre + "wq", rng.trunc_normal(0.02, (C, C)))
        params.add(pre + "wk", rng.trunc_normal(0.02, (C, C)))
        params.add(pre + "wv", rng.trunc_normal(0.02, (C, C)))
        params.add(pre + "wo", rng.trunc_normal(0.02, (C, C)))
        params.add(pre + "ln2.g", np.ones(C), decay=False)
        params.add(pre + "ln2.b", np.zeros(C), decay=False)
        params.add(pre + "ffn.w1", rng.trunc_normal(0.02, (C, cfg.ffn_hidden)))
        params.add(pre + "ffn.b1", np.zeros(cfg.ffn_hidden), decay=False)
        params.add(pre + "ffn.w2", rng.trunc_normal(0.02, (cfg.ffn_hidden, C)))
        params.add(pre + "ffn.b2", np.zeros(C), decay=False)
    params.add("head.w", rng.trunc_normal(0.02, (C, cfg.num_classes)))
    params.add("head.b", np.zeros(cfg.num_classes), decay=False)
    return params


def patchify(image: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Split an H x W x Cin image into flattened patches.

    Patches are enumerated row-major (top-left first); each patch is
    flattened pixel row-major with channels last.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape != (cfg.image_side, cfg.image_side, cfg.channels_in):
        raise ConfigError(
            f"patchify: image shape {image.shape} does not match config "
            f"({cfg.image_side}, {cfg.image_side}, {cfg.channels_in})"
        )
    g, p = cfg.grid_side, cfg.patch_side
    out = image.reshape(g, p, g, p, cfg.channels_in)
    out = out.transpose(0, 2, 1, 3, 4)  # (gy, gx, py, px, cin)
    return out.reshape(cfg.n_patches, cfg.patch_dim)


def embed(image, params: ParamSet, cfg: EncoderConfig):
    """Project patches, prepend CLS, add position embedding.

    Returns (tokens, cache) with tokens of shape (1+N, C).
    """
    patches = patchify(image, cfg)
    projected = patches @ params.val("patch_proj.w") + params.val("patch_proj.b")
    tokens = np.vstack([params.val("cls")[None, :], projected])
    tokens = tokens + params.val("pos")
    return tokens, patches


def embed_backward(dtokens, patches, params: ParamSet):
    params["pos"].grad += dtokens
    params["cls"].grad += dtokens[0]
    dproj = dtokens[1:]
    params["patch_proj.w"].grad += patches.T @ dproj
    params["patch_proj.b"].grad += dproj.sum(axis=0)


def _layer(params: ParamSet, i: int) -> dict:
    pre = f"layer{i}."
    return {k: params.val(pre + k) for k in (
        "ln1.g", "ln1.b", "wq", "wk", "wv", "wo",
        "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")}


def msa_forward(x: np.ndarray, lp: dict, heads: int, want_full: bool = False):
    """Multi-head self-attention over an already-normalized sequence.

    Returns (out, cls_attention, cache, full_attention_or_None).
    cls_attention is the head-averaged CLS attention row (sums to 1).
    """
    t, c = x.shape
    if c % heads != 0:
        raise ConfigError(f"embed_dim {c} not divisible by heads {heads}")
    d = c // heads
    scale = 1.0 / np.sqrt(d)
    q = x @ lp["wq"]
    k = x @ lp["wk"]
    v = x @ lp["wv"]
    qh = q.reshape(t, heads, d).transpose(1, 0, 2)  # (h, t, d)
    kh = k.reshape(t, heads, d).transpose(1, 0, 2)
    vh = v.reshape(t, heads, d).transpose(1, 0, 2)
    scores = np.einsum("hid,hjd->hij", qh, kh) * scale
    probs = softmax_rows(scores)
    oh = np.einsum("hij,hjd->hid", probs, vh)       # (h, t, d)
    concat = oh.transpose(1, 0, 2).reshape(t, c)
    out = concat @ lp["wo"]
    cls_attn = probs[:, 0, :].mean(axis=0)
    full = probs.mean(axis=0) if want_full else None
    cache = (x, qh, kh, vh, probs, concat, scale)
    return out, cls_attn, cache, full


def msa_backward(dout, cache, lp: dict, grads: dict):
    """Accumulates W_{Q,K,V,O} grads into ``grads``; returns dx."""
    x, qh, kh, vh, probs, concat, scale = cache
    t, c = x.shape
    heads, _, d = qh.shape
    grads["wo"] += concat.T @ dout
    dconcat = dout @ lp["wo"].T
    doh = dconcat.reshape(t, heads, d).transpose(1, 0, 2)
    dprobs = np.einsum("hid,hjd->hij", doh, vh)
    dvh = np.einsum("hij,hid->hjd", probs, doh)
    dscores = softmax_rows_backward(dprobs, probs) * scale
    dqh = np.einsum("hij,hjd->hid", dscores, kh)
    dkh = np.einsum("hij,hid->hjd", dscores, qh)
    dq = dqh.transpose(1, 0, 2).reshape(t, c)
    dk = dkh.transpose(1, 0, 2).reshape(t, c)
    dv = dvh.transpose(1, 0, 2).reshape(t, c)
    grads["wq"] += x.T @ dq
    grads["wk"] += x.T @ dk
    grads["wv"] += x.T @ dv
    return dq @ lp["wq"].T + dk @ lp["wk"].T + dv @ lp["wv"].T


def ffn_forward(x, lp: dict):
    h1 = x @ lp["ffn.w1"] + lp["ffn.b1"]
    act = gelu_map(h1)
    out = act @ lp["ffn.w2"] + lp["ffn.b2"]
    return out, (x, h1, act)


def ffn_backward(dout, cache, lp: dict, grads: dict):
    x, h1, act = cache
    grads["ffn.w2"] += act.T @ dout
    grads["ffn.b2"] += dout.sum(axis=0)
    dact = dout @ lp["ffn.w2"].T
    dh1 = gelu_backward(dact, h1)
    grads["ffn.w1"] += x.T @ dh1
    grads["ffn.b1"] += dh1.sum(axis=0)
    return dh1 @ lp["ffn.w1"].T


def block_forward(x, lp: dict, heads: int, want_full: bool = False):
    """Pre-norm residual block: x + MSA(LN(x)), then + FFN(LN(.)).

    Returns (out, cls_attention, cache, full_attention_or_None).
    """
    u, ln1_cache = layer_norm_rows(x, lp["ln1.g"], lp["ln1.b"], LN_EPS)
    r1, cls_attn, msa_cache, full = msa_forward(u, lp, heads, want_full)
    y = x + r1
    v, ln2_cache = layer_norm_rows(y, lp["ln2.g"], lp["ln2.b"], LN_EPS)
    r2, ffn_cache = ffn_forward(v, lp)
    out = y + r2
    cache = (ln1_cache, msa_cache, ln2_cache, ffn_cache, r1, r2)
    return out, cls_attn, cache, full


def block_backward(dout, cache, lp, grads, extra_r1=None, extra_r2=None):
    """Backward through block_forward; returns dx.

    ``extra_r1``/``extra_r2`` inject additional gradient directly into the
    MSA and FFN residual outputs (used by the fast-update broadcast path).
    """
    ln1_cache, msa_cache, ln2_cache, ffn_cache, _r1, _r2 = cache
    dr2 = dout if extra_r2 is None else dout + extra_r2
    dv = ffn_backward(dr2, ffn_cache, lp, grads)
    dy_ln, dg2, db2 = layer_norm_backward(dv, ln2_cache)
    grads["ln2.g"] += dg2
    grads["ln2.b"] += db2
    dy = dout + dy_ln
    dr1 = dy if extra_r1 is None else dy + extra_r1
    du = msa_backward(dr1, msa_cache, lp, grads)
    dx_ln, dg1, db1 = layer_norm_backward(du, ln1_cache)
    grads["ln1.g"] += dg1
    grads["ln1.b"] += db1
    return dy + dx_ln


def head_forward(tokens, params: ParamSet):
    """Shared classifier head on the CLS row and on mean-pooled patches."""
    w, b = params.val("head.w"), params.val("head.b")
    cls_row = tokens[0]
    avg_row = tokens[1:].mean(axis=0)
    return cls_row @ w + b, avg_row @ w + b


def head_backward(dlogits_cls, dlogits_avg, tokens, params: ParamSet):
    w = params.val("head.w")
    cls_row = tokens[0]
    avg_row = tokens[1:].mean(axis=0)
    params["head.w"].grad += np.outer(cls_row, dlogits_cls)
    params["head.w"].grad += np.outer(avg_row, dlogits_avg)
    params["head.b"].grad += dlogits_cls + dlogits_avg
    dtokens = np.zeros_like(tokens)
    dtokens[0] = w @ dlogits_cls
    dtokens[1:] = (w @ dlogits_avg) / (tokens.shape[0] - 1)
    return dtokens


def _check_tokens(tokens, cfg: EncoderConfig):
    if tokens.shape != (1 + cfg.n_patches, cfg.embed_dim):
        raise DimensionError(
            f"token sequence shape {tokens.shape} broke structure "
            f"preservation: expected {(1 + cfg.n_patches, cfg.embed_dim)}"
        )


def model_forward_vanilla(image, params: ParamSet, cfg: EncoderConfig,
                          record: bool = False):
    """Full forward pass of the plain encoder.

    Returns (logits_cls, logits_avg, AttentionRecord, cache). The cache
    holds everything model_backward_vanilla needs.
    """
    tokens, patches = embed(image, params, cfg)
    rec = AttentionRecord()
    block_caches = []
    layer_tokens = []
    for i in range(cfg.depth):
        lp = _layer(params, i)
        tokens, cls_attn, cache, full = block_forward(
            tokens, lp, cfg.heads, want_full=record)
        _check_tokens(tokens, cfg)
        rec.add(cls_attn, full)
        block_caches.append(cache)
        if record:
            layer_tokens.append(tokens.copy())
    logits_cls, logits_avg = head_forward(tokens, params)
    cache = {
        "patches": patches,
        "blocks": block_caches,
        "final_tokens": tokens,
        "layer_tokens": layer_tokens,
    }
    return logits_cls, logits_avg, rec, cache


def model_backward_vanilla(dlogits_cls, dlogits_avg, cache,
                           params: ParamSet, cfg: EncoderConfig):
    """Accumulate parameter grads for one sample's vanilla forward."""
    dtokens = head_backward(
        dlogits_cls, dlogits_avg, cache["final_tokens"], params)
    for i in reversed(range(cfg.depth)):
        lp = _layer(params, i)
        grads = _layer_grads(params, i)
        dtokens = block_backward(dtokens, cache["blocks"][i], lp, grads)
    embed_backward(dtokens, cache["patches"], params)


def _layer_grads(params: ParamSet, i: int) -> dict:
    pre = f"layer{i}."
    return {k: params[pre + k].grad for k in (
        "ln1.g", "ln1.b", "wq", "wk", "wv", "wo",
        "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")}
