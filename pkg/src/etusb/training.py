"""Objective, metrics, optimizers and the minibatch training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .encoder import (
    ModelConfig,
    Params,
    batch_of,
    init_params,
    loss_and_grads,
    predict_proba,
)
from .numerics import NumericError, make_rng

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 3e-4
    epochs: int = 3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 5.0
    seed: int = 0
    validation_fraction: float = 0.10
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# objective


def cross_entropy(probs, label: int) -> float:
    """``-log p[label]``, clamped at ``1e-12`` (with a warning) for zero probabilities."""
    p = float(probs[label])
    if p < PROB_FLOOR:
        log.warning("probability %.3g of the true class clamped to %g", p, PROB_FLOOR)
        p = PROB_FLOOR
    return -math.log(p)


def batch_cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean of the per-sample losses."""
    labels = np.asarray(labels)
    p = probs[np.arange(len(labels)), labels]
    if (p < PROB_FLOOR).any():
        log.warning("%d probabilities clamped to %g", int((p < PROB_FLOOR).sum()), PROB_FLOOR)
    return float(-np.log(np.maximum(p, PROB_FLOOR)).mean())


# ---------------------------------------------------------------------------
# metrics


def rank_classes(scores: np.ndarray, k: int | None = None) -> np.ndarray:
    """Class ids by descending score; ties go to the smaller class id."""
    order = np.argsort(-np.asarray(scores), axis=1, kind="stable")
    return order if k is None else order[:, :k]


def map_at_k(ranked: np.ndarray, labels, k: int = 3) -> float:
    """Mean of ``1/rank`` of the true label when it appears in the top ``k``."""
    ranked = np.asarray(ranked)[:, :k]
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("no samples")
    hits = (ranked == labels[:, None]).sum(axis=0)
    # integer arithmetic up to one final division, so the result is the correctly
    # rounded value of the exact rational mean
    scale = math.lcm(*range(1, ranked.shape[1] + 1))
    num = sum(int(h) * (scale // r) for r, h in enumerate(hits, start=1))
    return num / (scale * len(labels))


def map_at_3(ranked: np.ndarray, labels) -> float:
    return map_at_k(ranked, labels, 3)


def accuracy(scores: np.ndarray, labels) -> float:
    """Top-1 accuracy; argmax ties resolve to the smaller class id."""
    labels = np.asarray(labels)
    return int((np.argmax(np.asarray(scores), axis=1) == labels).sum()) / len(labels)


@dataclass
class MetricsReport:
    map_at_3: float
    accuracy: float
    loss: float
    n: int
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_report(probs: np.ndarray, labels) -> MetricsReport:
    labels = np.asarray(labels)
    pred = np.argmax(probs, axis=1)
    n_classes = probs.shape[1]
    precision, recall = [], []
    for c in range(n_classes):
        tp = int(((pred == c) & (labels == c)).sum())
        npred = int((pred == c).sum())
        ntrue = int((labels == c).sum())
        precision.append(tp / npred if npred else 0.0)
        recall.append(tp / ntrue if ntrue else 0.0)
    return MetricsReport(
        map_at_3=map_at_3(rank_classes(probs, 3), labels),
        accuracy=accuracy(probs, labels),
        loss=batch_cross_entropy(probs, labels),
        n=len(labels),
        precision=precision,
        recall=recall,
    )


def evaluate(data, params: Params, config: ModelConfig) -> MetricsReport:
    return metrics_report(predict_proba(data, params, config), data.labels)


# ---------------------------------------------------------------------------
# optimizers


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


class SGD:
    def __init__(self, learning_rate: float, weight_decay: float = 0.0):
        self.lr = learning_rate
        self.wd = weight_decay

    def step(self, params: Params, grads: Mapping[str, np.ndarray]):
        if self.lr == 0:
            return
        for k, g in grads.items():
            if self.wd:
                g = g + self.wd * params[k]
            params[k] -= self.lr * g


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = learning_rate
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Params, grads: Mapping[str, np.ndarray]):
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if self.wd:
                g = g + self.wd * params[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate, cfg.weight_decay)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)


# ---------------------------------------------------------------------------
# training loop


def stratified_split(labels, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random split; each class contributes ``round(fraction * n_c)`` to validation."""
    labels = np.asarray(labels)
    train_idx, val_idx = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(fraction * len(idx)))
        if fraction > 0 and n_val == len(idx) and len(idx) > 1:
            n_val -= 1
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_map3: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


@dataclass
class TrainResult:
    params: Params
    config: ModelConfig
    history: list[EpochRecord]
    best_epoch: int
    val_report: MetricsReport | None
    train_idx: np.ndarray
    val_idx: np.ndarray
    step_losses: list[float]


def train(data, model_config: ModelConfig, train_config: TrainConfig = TrainConfig(),
          params: Params | None = None) -> TrainResult:
    """Minibatch training with a stratified validation split.

    Returns the parameters of the epoch with the best validation map@3
    (the last epoch when there is no validation split).  Deterministic
    for a fixed ``train_config.seed``.
    """
    labels = np.asarray(data.labels)
    if len(labels) < 2:
        raise ValueError("need at least two samples")
    if (labels < 0).any():
        raise ValueError("training data contains unlabelled samples")
    if len(np.unique(labels)) < 2:
        raise ValueError("training data contains a single class")
    if labels.max() >= model_config.n_classes:
        raise ValueError("label outside the configured class range")
    tc = train_config
    rng = make_rng(tc.seed)
    train_idx, val_idx = stratified_split(labels, tc.validation_fraction, rng)
    if params is None:
        params = init_params(model_config, rng)
    else:
        params = {k: v.copy() for k, v in params.items()}
    opt = make_optimizer(tc)
    val = data_subset(data, val_idx) if len(val_idx) else None

    history: list[EpochRecord] = []
    step_losses: list[float] = []
    best = (-1.0, 0, {k: v.copy() for k, v in params.items()}, None)
    for epoch in range(1, tc.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))] if tc.shuffle else train_idx
        total, seen = 0.0, 0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            loss, grads = loss_and_grads(batch_of(data, idx), params, model_config, train=True, rng=rng)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            if tc.clip_norm is not None:
                clip_global_norm(grads, tc.clip_norm)
            opt.step(params, grads)
            step_losses.append(loss)
            total += loss * len(idx)
            seen += len(idx)
        train_loss = total / max(seen, 1)
        if val is not None:
            rep = evaluate(val, params, model_config)
            rec = EpochRecord(epoch, train_loss, rep.loss, rep.accuracy, rep.map_at_3)
            score = rep.map_at_3
        else:
            rep = None
            rec = EpochRecord(epoch, train_loss, float("nan"), float("nan"), float("nan"))
            score = float(epoch)
        history.append(rec)
        log.info("epoch %d  train_loss %.4f  val_loss %.4f  val_acc %.4f  val_map@3 %.4f",
                 epoch, rec.train_loss, rec.val_loss, rec.val_accuracy, rec.val_map3)
        if score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in params.items()}, rep)
    if tc.epochs == 0:
        best = (0.0, 0, params, evaluate(val, params, model_config) if val is not None else None)
    return TrainResult(best[2], model_config, history, best[1], best[3], train_idx, val_idx, step_losses)


def data_subset(data, idx):
    if hasattr(data, "subset"):
        return data.subset(idx)
    return batch_of(data, idx)


def baseline_nonseq_train(data, model_config: ModelConfig, train_config: TrainConfig = TrainConfig()) -> TrainResult:
    """Same loop with the sequence branch removed: tower -> output layer only."""
    return train(data, replace(model_config, use_sequence=False), train_config)


def format_history(history: Sequence[EpochRecord]) -> str:
    lines = [f"{'epoch':>5} {'train_loss':>10} {'val_loss':>9} {'val_acc':>8} {'val_map@3':>9}"]
    for r in history:
        lines.append(f"{r.epoch:>5} {r.train_loss:>10.4f} {r.val_loss:>9.4f} {r.val_accuracy:>8.4f} {r.val_map3:>9.4f}")
    return "\n".join(lines)


def write_history(history: Sequence[EpochRecord], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in history:
            fh.write(r.to_json() + "\n")
