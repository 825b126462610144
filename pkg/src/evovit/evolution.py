"""Slow-fast token evolution.

An exponential-moving-average "global" class attention scores every patch
token. At each selective layer the top-k tokens (plus CLS and a single
representative token summarizing the rest) run the full MSA+FFN block (the
slow path); the remaining placeholder tokens are updated only by the
representative token's two recorded residuals, broadcast by copy (the fast
path). Token count and ordering are preserved at every layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import (
    AttentionRecord,
    EncoderConfig,
    _check_tokens,
    _layer,
    _layer_grads,
    block_backward,
    block_forward,
    embed,
    embed_backward,
    head_backward,
    head_forward,
)
from .errors import ConfigError, DimensionError, StateError
from .params import ParamSet


@dataclass
class GlobalClassAttention:
    """Evolving per-patch selection scores plus the tracked CLS share."""
    scores: np.ndarray = None        # (N,)
    cls_share: float = 0.0
    initialized: bool = False


@dataclass
class SelectionResult:
    """Partition of patch indices for one layer; both lists sorted."""
    informative: np.ndarray
    placeholder: np.ndarray
    layer: int = 0

    @property
    def k(self) -> int:
        return len(self.informative)


@dataclass
class EvoConfig:
    keep_ratio: float = 0.5
    start_layer: int = 5        # 1-indexed; selection starts at this layer
    alpha: float = 0.5
    aggregation: str = "weighted-sum"
    expansion: str = "copy"

    def __post_init__(self):
        if not (0.0 < self.keep_ratio <= 1.0):
            raise ConfigError(f"keep_ratio {self.keep_ratio} not in (0, 1]")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha {self.alpha} not in [0, 1]")
        if self.start_layer < 2:
            raise ConfigError(
                "start_layer must be >= 2: selection needs class attention "
                "from at least one preceding layer")
        if self.aggregation != "weighted-sum":
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.expansion != "copy":
            raise ConfigError(f"unknown expansion {self.expansion!r}")


def update_global_attention(g: GlobalClassAttention, a_cls: np.ndarray,
                            alpha: float, mask=None) -> GlobalClassAttention:
    """EMA update of the global scores: alpha*old + (1-alpha)*new.

    ``a_cls`` is a (1+N,) class-attention vector, entry 0 the CLS share.
    With ``mask`` (patch indices) only those entries are updated and the
    CLS share is untouched; the first maskless call initializes ``g``.
    """
    a_cls = np.asarray(a_cls, dtype=np.float64)
    if not g.initialized:
        if mask is not None:
            raise StateError(
                "update_global_attention: masked update before initialization")
        g.scores = a_cls[1:].copy()
        g.cls_share = float(a_cls[0])
        g.initialized = True
        return g
    if a_cls.shape != (1 + len(g.scores),):
        raise DimensionError(
            f"class attention length {a_cls.shape[0]} vs "
            f"{1 + len(g.scores)} expected")
    if mask is None:
        g.scores = alpha * g.scores + (1.0 - alpha) * a_cls[1:]
        g.cls_share = alpha * g.cls_share + (1.0 - alpha) * float(a_cls[0])
    else:
        idx = np.asarray(mask, dtype=np.int64)
        g.scores[idx] = alpha * g.scores[idx] + (1.0 - alpha) * a_cls[1 + idx]
    return g


def select_informative(scores: np.ndarray, ratio: float, n: int,
                       layer: int = 0) -> SelectionResult:
    """Top-k patch indices by score; k = max(1, floor(ratio*n)).

    Ties break toward the lower index (stable sort on descending score).
    """
    if not (0.0 < ratio <= 1.0):
        raise ConfigError(f"keep ratio {ratio} not in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n,):
        raise DimensionError(f"scores shape {scores.shape}, expected ({n},)")
    k = max(1, int(np.floor(ratio * n)))
    order = np.argsort(-scores, kind="stable")
    return SelectionResult(
        informative=np.sort(order[:k]),
        placeholder=np.sort(order[k:]),
        layer=layer,
    )


def aggregate_placeholders(x_ph: np.ndarray, weights: np.ndarray):
    """Weighted sum of placeholder rows.

    Weights are renormalized to sum 1; all-zero weights fall back to
    uniform. Returns (representative_row, normalized_weights).
    """
    x_ph = np.asarray(x_ph, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x_ph.shape[0] != weights.shape[0] or x_ph.shape[0] < 1:
        raise DimensionError(
            f"aggregate_placeholders: {x_ph.shape[0]} rows vs "
            f"{weights.shape[0]} weights")
    total = weights.sum()
    if total <= 0.0:
        w = np.full(len(weights), 1.0 / len(weights))
    else:
        w = weights / total
    return w @ x_ph, w


def evo_block_forward(x, g: GlobalClassAttention, lp: dict, heads: int,
                      evo: EvoConfig, layer: int, selection=None,
                      frozen_weights=None, update_g: bool = True,
                      want_full: bool = False):
    """One selective block: slow path on [CLS, informative, rep], fast
    residual broadcast onto placeholders, output in original order.

    Returns (out, selection, cls_attention, cache, full_attn).
    ``selection`` may be supplied (stage reuse, ablation strategies,
    frozen replay); otherwise it is computed from ``g``.
    """
    n = x.shape[0] - 1
    if selection is None:
        if not g.initialized:
            raise StateError("token selection before global attention exists")
        selection = select_informative(g.scores, evo.keep_ratio, n, layer)
    inf, ph = selection.informative, selection.placeholder
    k = selection.k

    if k == n:
        # Degenerate keep-ratio 1: no representative token, plain block.
        out, cls_attn, cache, full = block_forward(x, lp, heads, want_full)
        if update_g:
            a_full = np.zeros(1 + n)
            a_full[1:] = cls_attn[1:]
            update_global_attention(g, a_full, evo.alpha, mask=inf)
        return out, selection, cls_attn, ("vanilla", cache), full

    if frozen_weights is not None:
        w = frozen_weights
        x_rep = w @ x[1 + ph]
    else:
        x_rep, w = aggregate_placeholders(x[1 + ph], g.scores[ph])

    slow = np.vstack([x[0][None, :], x[1 + inf], x_rep[None, :]])
    out_s, cls_attn, bcache, full = block_forward(slow, lp, heads, want_full)
    _, _, _, _, r1, r2 = bcache

    out = np.empty_like(x)
    out[0] = out_s[0]
    out[1 + inf] = out_s[1:k + 1]
    # fast path: identical additive residual, copied to every placeholder
    out[1 + ph] = x[1 + ph] + r1[k + 1] + r2[k + 1]

    if update_g:
        # write this layer's slow-path attention back for informative
        # tokens only; the representative token's share is dropped
        a_full = np.zeros(1 + n)
        a_full[1 + inf] = cls_attn[1:k + 1]
        update_global_attention(g, a_full, evo.alpha, mask=inf)

    cache = ("evo", bcache, selection, w)
    return out, selection, cls_attn, cache, full


def evo_block_backward(dout, cache, lp: dict, grads: dict):
    """Backward of evo_block_forward; selection and aggregation weights
    are constants. Returns dx over the original (1+N, C) layout."""
    kind = cache[0]
    if kind == "vanilla":
        return block_backward(dout, cache[1], lp, grads)
    _, bcache, selection, w = cache
    inf, ph = selection.informative, selection.placeholder
    k = selection.k
    c = dout.shape[1]

    g_slow = np.zeros((k + 2, c))
    g_slow[0] = dout[0]
    g_slow[1:k + 1] = dout[1 + inf]
    # placeholder rows feed gradient into the rep token's two residuals
    s_ph = dout[1 + ph].sum(axis=0)
    extra = np.zeros((k + 2, c))
    extra[k + 1] = s_ph
    d_slow = block_backward(g_slow, bcache, lp, grads,
                            extra_r1=extra, extra_r2=extra)
    dx = np.zeros_like(dout)
    dx[0] = d_slow[0]
    dx[1 + inf] = d_slow[1:k + 1]
    dx[1 + ph] = dout[1 + ph] + np.outer(w, d_slow[k + 1])
    return dx


def _is_stage_entry(layer: int, start_layer: int, stage_size: int) -> bool:
    return layer >= start_layer and (layer - start_layer) % stage_size == 0


def model_forward_evo(image, params: ParamSet, cfg: EncoderConfig,
                      evo: EvoConfig, mode: str = "layer",
                      stage_size: int = 4, record: bool = False,
                      selection_override=None, frozen_plan=None):
    """Forward pass with slow-fast token evolution.

    Layers before ``evo.start_layer`` (1-indexed) run vanilla blocks while
    fully updating the global class attention; later layers run selective
    blocks. In ``mode="stage"`` selection is computed only at stage entry
    layers and reused within the stage.

    ``selection_override`` fixes the per-layer SelectionResult (ablation
    strategies); ``frozen_plan`` (from a previous forward's cache) replays
    selection and aggregation weights exactly (gradient checking).

    Returns (logits_cls, logits_avg, AttentionRecord, selections, cache).
    """
    if mode not in ("layer", "stage"):
        raise ConfigError(f"unknown schedule mode {mode!r}")
    if evo.start_layer > cfg.depth and frozen_plan is None \
            and selection_override is None:
        pass  # degenerates to vanilla blocks below

    tokens, patches = embed(image, params, cfg)
    g = GlobalClassAttention()
    rec = AttentionRecord()
    selections: list[SelectionResult] = []
    block_caches = []
    plan = []
    layer_tokens = []
    current_sel = None
    for i in range(cfg.depth):
        layer = i + 1  # 1-indexed
        lp = _layer(params, i)
        if layer < evo.start_layer:
            tokens, cls_attn, cache, full = block_forward(
                tokens, lp, cfg.heads, want_full=record)
            update_global_attention(g, cls_attn, evo.alpha)
            block_caches.append(("vanilla", cache))
            plan.append(None)
        else:
            sel = None
            frozen_w = None
            if frozen_plan is not None:
                sel, frozen_w = frozen_plan[i]
            elif selection_override is not None:
                sel = selection_override[i]
            elif mode == "stage":
                if _is_stage_entry(layer, evo.start_layer, stage_size):
                    current_sel = None  # recompute at stage entry
                sel = current_sel
            tokens, sel, cls_attn, cache, full = evo_block_forward(
                tokens, g, lp, cfg.heads, evo, layer,
                selection=sel, frozen_weights=frozen_w, want_full=record)
            current_sel = sel
            selections.append(sel)
            block_caches.append(cache)
            plan.append((sel, cache[3] if cache[0] == "evo" else None))
        _check_tokens(tokens, cfg)
        rec.add(cls_attn, full)
        if record:
            layer_tokens.append(tokens.copy())
    logits_cls, logits_avg = head_forward(tokens, params)
    cache = {
        "patches": patches,
        "blocks": block_caches,
        "final_tokens": tokens,
        "layer_tokens": layer_tokens,
        "plan": plan,
        "global_attention": g,
    }
    return logits_cls, logits_avg, rec, selections, cache


def model_backward_evo(dlogits_cls, dlogits_avg, cache,
                       params: ParamSet, cfg: EncoderConfig):
    """Backward for model_forward_evo with frozen routing."""
    dtokens = head_backward(
        dlogits_cls, dlogits_avg, cache["final_tokens"], params)
    for i in reversed(range(cfg.depth)):
        lp = _layer(params, i)
        grads = _layer_grads(params, i)
        bc = cache["blocks"][i]
        if bc[0] == "vanilla":
            dtokens = block_backward(dtokens, bc[1], lp, grads)
        else:
            dtokens = evo_block_backward(dtokens, bc, lp, grads)
    embed_backward(dtokens, cache["patches"], params)


def selection_mask_grid(sel: SelectionResult, grid_side: int) -> np.ndarray:
    """Binary patch-grid mask: 255 informative, 0 placeholder."""
    flat = np.zeros(grid_side * grid_side, dtype=np.uint8)
    flat[sel.informative] = 255
    return flat.reshape(grid_side, grid_side)
