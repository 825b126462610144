"""FLOP accounting, throughput benchmarking, selection-strategy baselines,
and representation diagnostics (linear CKA, token-query PCC).

Counts are multiply-accumulates (MACs) for the matrix products of MSA and
FFN; elementwise softmax/LN/GELU work is excluded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, model_forward_vanilla
from .errors import DimensionError, StateError
from .evolution import (
    EvoConfig,
    SelectionResult,
    model_forward_evo,
    select_informative,
)
from .params import ParamSet, RngState
from .training import evaluate

STRATEGY_KINDS = (
    "global-class-attention",
    "random",
    "last-class-attention",
    "attention-column-mean",
)


def msa_macs(n_tokens: int, c: int) -> int:
    """MACs of one multi-head self-attention over n tokens: 4nC^2 + 2n^2C."""
    n = int(n_tokens)
    return 4 * n * c * c + 2 * n * n * c


def ffn_macs(n_tokens: int, c: int) -> int:
    """MACs of one feed-forward block (hidden = 4C): 8nC^2."""
    return 8 * int(n_tokens) * c * c


def evo_layer_macs(n_patches: int, c: int, k: int) -> int:
    """MACs of one selective layer.

    The slow path carries k informative tokens plus CLS plus one
    representative token; the aggregation weighted sum over the N-k
    placeholder rows adds (N-k)*C. With k = N there is no representative
    token and the count equals a vanilla layer on 1+N tokens.
    """
    if not (1 <= k <= n_patches):
        raise ValueError(f"k={k} outside [1, {n_patches}]")
    if k == n_patches:
        return msa_macs(n_patches + 1, c) + ffn_macs(n_patches + 1, c)
    slow = k + 2
    return msa_macs(slow, c) + ffn_macs(slow, c) + (n_patches - k) * c


@dataclass
class FlopReport:
    """Per-layer and total MAC counts for vanilla and evo configurations."""
    vanilla_layers: list = field(default_factory=list)
    evo_layers: list = field(default_factory=list)
    vanilla_total: int = 0
    evo_total: int = 0
    reduction_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {
            "unit": "multiply-accumulates (MSA+FFN matrix products only)",
            "vanilla_layers": self.vanilla_layers,
            "evo_layers": self.evo_layers,
            "vanilla_total": self.vanilla_total,
            "evo_total": self.evo_total,
            "reduction_fraction": self.reduction_fraction,
        }


def flop_report(cfg: EncoderConfig, evo: EvoConfig) -> FlopReport:
    n, c = cfg.n_patches, cfg.embed_dim
    k = max(1, int(np.floor(evo.keep_ratio * n)))
    rep = FlopReport()
    for i in range(cfg.depth):
        layer = i + 1
        van = msa_macs(1 + n, c) + ffn_macs(1 + n, c)
        rep.vanilla_layers.append(
            {"layer": layer, "msa_macs": msa_macs(1 + n, c),
             "ffn_macs": ffn_macs(1 + n, c), "evo_overhead_macs": 0})
        if layer >= evo.start_layer and k < n:
            slow = k + 2
            rep.evo_layers.append(
                {"layer": layer, "msa_macs": msa_macs(slow, c),
                 "ffn_macs": ffn_macs(slow, c),
                 "evo_overhead_macs": (n - k) * c})
        else:
            rep.evo_layers.append(
                {"layer": layer, "msa_macs": msa_macs(1 + n, c),
                 "ffn_macs": ffn_macs(1 + n, c), "evo_overhead_macs": 0})
        rep.vanilla_total += van
    rep.evo_total = sum(
        e["msa_macs"] + e["ffn_macs"] + e["evo_overhead_macs"]
        for e in rep.evo_layers)
    rep.reduction_fraction = 1.0 - rep.evo_total / rep.vanilla_total
    return rep


def throughput_bench(kind: str, params: ParamSet, cfg: EncoderConfig,
                     evo: EvoConfig | None = None, batch: int = 8,
                     repeats: int = 10, warmup: int = 2,
                     seed: int = 0) -> dict:
    """Wall-clock forward throughput over identical random inputs.

    Reports images/sec and tokens/sec at the median, plus p50/p95 latency
    per batch in seconds. Callers should pin BLAS threads for
    comparability (the CLI does, via EVO_THREADS).
    """
    if repeats < 5 or warmup < 2:
        raise ValueError("need repeats >= 5 and warmup >= 2")
    rng = RngState(seed)
    images = [rng.uniform((cfg.image_side, cfg.image_side, cfg.channels_in))
              for _ in range(batch)]

    def run_batch():
        for img in images:
            if kind == "vanilla":
                model_forward_vanilla(img, params, cfg)
            else:
                model_forward_evo(img, params, cfg, evo)

    for _ in range(warmup):
        run_batch()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_batch()
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    p50 = float(np.percentile(times, 50))
    p95 = float(np.percentile(times, 95))
    tokens_per_image = 1 + cfg.n_patches
    return {
        "kind": kind,
        "batch": batch,
        "repeats": repeats,
        "p50_seconds": p50,
        "p95_seconds": p95,
        "images_per_sec": batch / p50,
        "tokens_per_sec": batch * tokens_per_image / p50,
    }


def paired_speedup(params: ParamSet, cfg: EncoderConfig, evo: EvoConfig,
                   batch: int = 8, repeats: int = 10, warmup: int = 2,
                   seed: int = 0) -> dict:
    """Vanilla-vs-evo speedup with interleaved timing.

    Alternates one vanilla batch and one evo batch per repeat so that
    host-speed drift affects both series equally, then compares the p50
    of each series. More stable than two back-to-back throughput_bench
    calls on shared machines.
    """
    if repeats < 5 or warmup < 2:
        raise ValueError("need repeats >= 5 and warmup >= 2")
    rng = RngState(seed)
    images = [rng.uniform((cfg.image_side, cfg.image_side, cfg.channels_in))
              for _ in range(batch)]

    def run_batch(kind):
        t0 = time.perf_counter()
        for img in images:
            if kind == "vanilla":
                model_forward_vanilla(img, params, cfg)
            else:
                model_forward_evo(img, params, cfg, evo)
        return time.perf_counter() - t0

    for _ in range(warmup):
        run_batch("vanilla")
        run_batch("evo")
    vanilla, evolved = [], []
    for _ in range(repeats):
        vanilla.append(run_batch("vanilla"))
        evolved.append(run_batch("evo"))
    v50 = float(np.percentile(vanilla, 50))
    e50 = float(np.percentile(evolved, 50))
    return {"vanilla_p50_seconds": v50, "evo_p50_seconds": e50,
            "speedup_p50": v50 / e50}


def baseline_select(kind: str, ratio: float, n: int, layer: int = 0,
                    rng: RngState | None = None,
                    last_cls_attn: np.ndarray | None = None,
                    full_attn: np.ndarray | None = None) -> SelectionResult:
    """SelectionResult from a baseline scoring strategy.

    random: seeded scores; last-class-attention: patch entries of a
    completed pass's final-layer class attention; attention-column-mean:
    column means of a recorded head-averaged attention matrix.
    """
    if kind not in STRATEGY_KINDS:
        raise ValueError(f"unknown strategy {kind!r}")
    if kind == "random":
        if rng is None:
            raise StateError("random strategy needs an RngState")
        scores = rng.uniform((n,))
    elif kind == "last-class-attention":
        if last_cls_attn is None:
            raise StateError(
                "last-class-attention needs a recorded final-layer "
                "class attention")
        scores = np.asarray(last_cls_attn, dtype=np.float64)[1:]
    elif kind == "attention-column-mean":
        if full_attn is None:
            raise StateError(
                "attention-column-mean needs a recorded attention matrix")
        scores = np.asarray(full_attn, dtype=np.float64).mean(axis=0)[1:]
    else:
        raise StateError(
            "global-class-attention selection is computed inside the "
            "forward pass, not by baseline_select")
    return select_informative(scores, ratio, n, layer)


def strategy_selections(kind: str, image, params, cfg: EncoderConfig,
                        evo: EvoConfig, rng: RngState | None = None):
    """Per-layer selection lists for one sample under a baseline strategy.

    last-class-attention and attention-column-mean run a first recording
    inference (twice-inference protocol); random draws seeded scores.
    """
    n = cfg.n_patches
    rec = None
    if kind in ("last-class-attention", "attention-column-mean"):
        _, _, rec, _ = model_forward_vanilla(image, params, cfg, record=True)
    sels = []
    for i in range(cfg.depth):
        layer = i + 1
        if layer < evo.start_layer:
            sels.append(None)
        elif kind == "last-class-attention":
            sels.append(baseline_select(
                kind, evo.keep_ratio, n, layer,
                last_cls_attn=rec.cls_attn[-1]))
        elif kind == "attention-column-mean":
            sels.append(baseline_select(
                kind, evo.keep_ratio, n, layer,
                full_attn=rec.full_attn[i]))
        else:
            sels.append(baseline_select(kind, evo.keep_ratio, n, layer,
                                        rng=rng))
    return sels


def strategy_accuracy(kind: str, images, labels, params,
                      cfg: EncoderConfig, evo: EvoConfig,
                      seed: int = 0) -> float:
    """Inference-only eval accuracy with tokens routed per strategy."""
    if kind == "global-class-attention":
        return evaluate("evo", images, labels, params, cfg, evo)
    rng = RngState(seed)
    hits = 0
    for img, lab in zip(images, labels):
        sels = strategy_selections(kind, img, params, cfg, evo, rng=rng)
        _, logits_avg, _, _, _ = model_forward_evo(
            img, params, cfg, evo, selection_override=sels)
        if int(np.argmax(logits_avg)) == int(lab):
            hits += 1
    return hits / len(labels)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two feature matrices.

    ||Xc^T Yc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F) with column-centered
    Xc, Yc. Returns 0 when either centered matrix is all zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(
            f"linear_cka: {x.shape[0]} vs {y.shape[0]} rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cross = np.linalg.norm(xc.T @ yc) ** 2
    nx = np.linalg.norm(xc.T @ xc)
    ny = np.linalg.norm(yc.T @ yc)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(cross / (nx * ny))


def token_query_pcc(queries: np.ndarray) -> dict:
    """Mean/variance of pairwise Pearson correlation across token rows.

    Correlation is over the channel dimension; constant rows are excluded
    (their count is reported).
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.shape[0] < 2:
        raise DimensionError("token_query_pcc needs at least 2 rows")
    stds = q.std(axis=1)
    keep = stds > 0.0
    dropped = int((~keep).sum())
    q = q[keep]
    if q.shape[0] < 2:
        raise ValueError("token_query_pcc: fewer than 2 non-constant rows")
    corr = np.corrcoef(q)
    iu = np.triu_indices(corr.shape[0], k=1)
    vals = corr[iu]
    return {
        "mean": float(vals.mean()),
        "variance": float(vals.var()),
        "dropped_constant_rows": dropped,
    }


def cka_curve(images, params, cfg: EncoderConfig) -> list[float]:
    """Per-layer CKA between mean patch features and the final CLS token.

    Rows are samples: X_l holds each sample's mean patch-token feature
    after layer l, Y each sample's final-layer CLS row.
    """
    per_layer = [[] for _ in range(cfg.depth)]
    final_cls = []
    for img in images:
        _, _, _, cache = model_forward_vanilla(img, params, cfg, record=True)
        for layer, toks in enumerate(cache["layer_tokens"]):
            per_layer[layer].append(toks[1:].mean(axis=0))
        final_cls.append(cache["final_tokens"][0])
    y = np.array(final_cls)
    return [linear_cka(np.array(rows), y) for rows in per_layer]


def pcc_curve(images, params, cfg: EncoderConfig) -> list[dict]:
    """Per-layer pairwise PCC stats among patch-token query vectors,
    averaged over samples."""
    from .encoder import _layer
    from .kernels import layer_norm_rows

    stats = [[] for _ in range(cfg.depth)]
    for img in images:
        _, _, _, cache = model_forward_vanilla(img, params, cfg, record=True)
        inputs = [None] + cache["layer_tokens"][:-1]
        from .encoder import embed
        inputs[0], _ = embed(img, params, cfg)
        for i in range(cfg.depth):
            lp = _layer(params, i)
            u, _ = layer_norm_rows(inputs[i], lp["ln1.g"], lp["ln1.b"])
            queries = u @ lp["wq"]
            stats[i].append(token_query_pcc(queries[1:]))
    return [
        {"mean": float(np.mean([s["mean"] for s in layer_stats])),
         "variance": float(np.mean([s["variance"] for s in layer_stats]))}
        for layer_stats in stats
    ]
