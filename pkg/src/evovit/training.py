"""From-scratch training: assisted CLS loss, Adam, layer-to-stage schedule."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, model_backward_vanilla, model_forward_vanilla
from .errors import ConfigError, NumericError
from .evolution import EvoConfig, model_backward_evo, model_forward_evo
from .kernels import cross_entropy_backward, cross_entropy_logits
from .params import ParamSet, RngState


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    stage_size: int = 4
    layer_to_stage_switch: float = 2.0 / 3.0
    model: str = "evo"  # "evo" or "vanilla"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (0.0 < self.layer_to_stage_switch <= 1.0):
            raise ConfigError("layer_to_stage_switch must be in (0, 1]")
        if self.model not in ("evo", "vanilla"):
            raise ConfigError(f"unknown model kind {self.model!r}")


@dataclass
class LossBreakdown:
    cls_term: float
    avg_term: float

    @property
    def total(self) -> float:
        return self.cls_term + self.avg_term


def assisted_cls_loss(logits_cls, logits_avg, labels) -> LossBreakdown:
    """Cross-entropy on CLS logits plus cross-entropy on pooled logits."""
    return LossBreakdown(
        cls_term=cross_entropy_logits(logits_cls, labels),
        avg_term=cross_entropy_logits(logits_avg, labels),
    )


def schedule_mode(epoch: int, total_epochs: int, switch_fraction: float) -> str:
    """"layer" for the early fraction of training, "stage" afterwards."""
    if not (0 <= epoch < total_epochs):
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    switch = int(np.floor(switch_fraction * total_epochs))
    return "layer" if epoch < switch else "stage"


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Decay applies only to parameters flagged ``decay`` (weight matrices;
    not LN gains/biases, not CLS/position embeddings).
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamSet, lr: float):
        self.t += 1
        for p in params:
            gr = p.grad
            if not np.isfinite(gr).all():
                raise NumericError(f"non-finite gradient in {p.name}")
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.b1
            m += (1 - self.b1) * gr
            v *= self.b2
            v += (1 - self.b2) * gr * gr
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p.value -= lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and p.decay:
                p.value -= lr * self.weight_decay * p.value


def adam_step(params: ParamSet, optimizer: Adam, lr: float):
    optimizer.step(params, lr)


def _forward(kind, image, params, cfg, evo, mode):
    if kind == "vanilla":
        lc, la, rec, cache = model_forward_vanilla(image, params, cfg)
        return lc, la, cache
    lc, la, rec, sels, cache = model_forward_evo(
        image, params, cfg, evo, mode=mode)
    return lc, la, cache


def _backward(kind, dlc, dla, cache, params, cfg):
    if kind == "vanilla":
        model_backward_vanilla(dlc, dla, cache, params, cfg)
    else:
        model_backward_evo(dlc, dla, cache, params, cfg)


def evaluate(kind, images, labels, params, cfg, evo=None, mode="layer"):
    """Top-1 accuracy. Classification reads the pooled logits only; the
    CLS token drives selection."""
    hits = 0
    for img, lab in zip(images, labels):
        _, logits_avg, _ = _forward(kind, img, params, cfg, evo, mode)
        if int(np.argmax(logits_avg)) == int(lab):
            hits += 1
    return hits / len(labels)


def train(kind: str, dataset, params: ParamSet, cfg: EncoderConfig,
          tcfg: TrainConfig, evo: EvoConfig | None = None,
          metrics_sink=None):
    """Epoch loop with deterministic shuffling; returns metric records.

    ``dataset`` is a dict {train_images, train_labels, eval_images,
    eval_labels}. Each record: {epoch, mode, loss, acc_train, acc_eval,
    seconds}; ``metrics_sink`` (if given) receives each record as it is
    produced.
    """
    if len(dataset["train_images"]) == 0:
        raise ConfigError("empty training set")
    opt = Adam(weight_decay=tcfg.weight_decay)
    shuffle_rng = RngState(tcfg.seed)
    n = len(dataset["train_images"])
    records = []
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        mode = schedule_mode(epoch, tcfg.epochs, tcfg.layer_to_stage_switch) \
            if kind == "evo" else "layer"
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        hits = 0
        for start in range(0, n, tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            params.zero_grads()
            for idx in batch:
                img = dataset["train_images"][idx]
                lab = int(dataset["train_labels"][idx])
                lc, la, cache = _forward(kind, img, params, cfg, evo, mode)
                loss = assisted_cls_loss(lc[None, :], la[None, :], [lab])
                if not np.isfinite(loss.total):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, sample {idx}")
                epoch_loss += loss.total
                if int(np.argmax(la)) == lab:
                    hits += 1
                scale = 1.0 / len(batch)
                dlc = cross_entropy_backward(lc[None, :], [lab])[0] * scale
                dla = cross_entropy_backward(la[None, :], [lab])[0] * scale
                _backward(kind, dlc, dla, cache, params, cfg)
            adam_step(params, opt, tcfg.learning_rate)
        acc_eval = evaluate(
            kind, dataset["eval_images"], dataset["eval_labels"],
            params, cfg, evo, mode)
        record = {
            "epoch": epoch,
            "mode": mode,
            "loss": epoch_loss / n,
            "acc_train": hits / n,
            "acc_eval": acc_eval,
            "seconds": time.perf_counter() - t0,
        }
        records.append(record)
        if metrics_sink is not None:
            metrics_sink(record)
    return records
