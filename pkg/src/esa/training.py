"""Losses, AdamW, gradient clipping and the train / evaluate loops."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import metrics
from . import tensor as T
from .graph import Graph, batch
from .model import ESA
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

TASKS = ("regression", "binary", "multiclass", "multilabel")


# -- losses ------------------------------------------------------------------------


def _masked_mean(x: Tensor, mask) -> Tensor:
    if mask is None:
        return x.mean()
    mask = np.asarray(mask, dtype=x.dtype)
    n = mask.sum()
    if n == 0:
        raise ValueError("loss over an empty set of targets")
    return T.scale((x * Tensor(mask)).sum(), 1.0 / n)


def mse(pred, target, mask=None) -> Tensor:
    d = pred - Tensor(np.asarray(target, dtype=pred.dtype).reshape(pred.shape))
    return _masked_mean(d * d, mask)


def mae_loss(pred, target, mask=None) -> Tensor:
    t = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    sign = np.sign(pred.data - t)
    d = T.record(np.abs(pred.data - t), (pred,), lambda g: (g * sign,))
    return _masked_mean(d, mask)


def binary_cross_entropy_with_logits(logits, target, mask=None) -> Tensor:
    """Mean of ``max(x, 0) - x*y + log(1 + exp(-|x|))``."""
    y = np.asarray(target, dtype=logits.dtype).reshape(logits.shape)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("binary targets must lie in [0, 1]")
    x = logits.data
    val = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    elem = T.record(val, (logits,), lambda g: (g * (special.expit(x) - y),))
    return _masked_mean(elem, mask)


def softmax_cross_entropy(logits, labels, mask=None) -> Tensor:
    labels = np.asarray(labels).astype(np.int64).ravel()
    n, k = logits.shape
    if labels.size != n:
        raise ValueError(f"{labels.size} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    picked = T.log_softmax_lastdim(logits)[np.arange(n), labels]
    return T.neg(_masked_mean(picked, mask))


def task_loss(task: str, out: Tensor, target: np.ndarray, mask=None) -> Tensor:
    if task == "regression":
        return mse(out, target, None if mask is None else np.broadcast_to(mask[:, None], out.shape))
    if task == "multiclass":
        return softmax_cross_entropy(out, target, mask)
    if task in ("binary", "multilabel"):
        m = None if mask is None else np.broadcast_to(mask[:, None], out.shape)
        return binary_cross_entropy_with_logits(out, target, m)
    raise ValueError(f"unknown task {task!r}")


# -- optimisation ------------------------------------------------------------------


def clip_grad_norm(grads, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most `max_norm`.

    Returns the norm before clipping.
    """
    grads = [g for g in grads if g is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= g.dtype.type(factor)
    return total


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.01) -> AdamState:
    """One decoupled-weight-decay Adam update, applied to ``p.data`` in place.

    `params` and `grads` are parallel sequences; a None gradient skips the
    moment update but still applies weight decay.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p, g in zip(params, grads):
        p.data *= 1 - lr * weight_decay
        if g is None:
            continue
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 100
    max_steps: int | None = None
    patience: int = 30
    lr_halving_patience: int = 15
    grad_clip_norm: float = 0.5
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    min_rel_improvement: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive")


# -- data ----------------------------------------------------------------------------


@dataclass
class Dataset:
    """Graphs plus a task description and a train/val/test split.

    For graph-level tasks split indices address graphs; for token-level
    (node) tasks they address nodes in the concatenation of all graphs.
    """

    graphs: list[Graph]
    task: str
    level: str = "graph"
    num_classes: int | None = None
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if any(g.target is None for g in self.graphs):
            raise ValueError("every graph needs a target to build a dataset")

    @property
    def num_items(self) -> int:
        if self.level == "graph":
            return len(self.graphs)
        return sum(g.num_nodes for g in self.graphs)

    def targets(self) -> np.ndarray:
        if self.level == "graph":
            return np.stack([g.target for g in self.graphs])
        return np.concatenate([g.target for g in self.graphs])

    def output_dim(self) -> int:
        if self.task == "multiclass":
            return int(self.num_classes)
        if self.level == "graph":
            return int(self.graphs[0].target.size)
        return 1


def random_split(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


# -- loops ---------------------------------------------------------------------------


def _iter_batches(ds: Dataset, items: np.ndarray, batch_size: int, by_item: bool = False):
    """Yield (graph list, target array, node selection or None) per batch.

    Graph-level batches hold `batch_size` graphs. Token-level batches hold
    `batch_size` graphs when evaluating, or `batch_size` target nodes
    (with every graph that owns one of them) when ``by_item`` is set.
    """
    if ds.level == "graph":
        for s in range(0, len(items), batch_size):
            idx = items[s:s + batch_size]
            yield [ds.graphs[i] for i in idx], np.stack([ds.graphs[i].target for i in idx]), None
        return
    offsets = np.concatenate([[0], np.cumsum([g.num_nodes for g in ds.graphs])])
    if by_item:
        for s in range(0, len(items), batch_size):
            chunk = items[s:s + batch_size]
            owners = np.unique(np.searchsorted(offsets, chunk, side="right") - 1)
            gs = [ds.graphs[i] for i in owners]
            local = np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in owners])
            yield gs, np.concatenate([g.target for g in gs]), np.isin(local, chunk)
        return
    chosen = np.zeros(offsets[-1], dtype=bool)
    chosen[items] = True
    for s in range(0, len(ds.graphs), batch_size):
        gs = ds.graphs[s:s + batch_size]
        sel = chosen[offsets[s]:offsets[s] + sum(g.num_nodes for g in gs)]
        if sel.any():
            yield gs, np.concatenate([g.target for g in gs]), sel


def _target_for(task: str, y: np.ndarray) -> np.ndarray:
    return y.ravel() if task == "multiclass" else y


def predict(model: ESA, ds: Dataset, split: str, batch_size: int = 128):
    """Raw outputs and targets over one split (no tape)."""
    outs, ys = [], []
    items = ds.split[split]
    for gs, y, sel in _iter_batches(ds, items, batch_size):
        out = model(batch(gs)).data
        if sel is not None:
            out, y = out[sel], y[sel]
        outs.append(out)
        ys.append(y.reshape(len(out), -1) if ds.task != "multiclass" else y.ravel())
    return np.concatenate(outs), np.concatenate(ys)


def score(task: str, out: np.ndarray, y: np.ndarray, num_classes: int | None = None) -> dict:
    """Loss plus the metrics that apply to `task`."""
    out = np.asarray(out, dtype=np.float64)
    res = {"loss": float(task_loss(task, Tensor(out), _target_for(task, y)).data)}
    if task == "regression":
        res["rmse"] = metrics.rmse(out, y.reshape(out.shape))
        res["mae"] = metrics.mae(out, y.reshape(out.shape))
        try:
            res["r2"] = metrics.r2(out, y.reshape(out.shape))
        except metrics.UndefinedMetricError:
            res["r2"] = float("nan")
    elif task == "multiclass":
        pred = out.argmax(axis=1)
        yt = y.astype(np.int64)
        res["mcc"] = metrics.mcc(metrics.confusion_matrix(yt, pred, num_classes))
        res["accuracy"] = metrics.accuracy(yt, pred)
    elif task == "binary":
        pred = (out.ravel() > 0).astype(np.int64)
        yt = y.ravel().astype(np.int64)
        res["mcc"] = metrics.mcc(metrics.confusion_matrix(yt, pred, 2))
        res["accuracy"] = metrics.accuracy(yt, pred)
    else:
        try:
            res["ap"] = metrics.mean_average_precision(out, y.reshape(out.shape))
        except metrics.UndefinedMetricError:
            res["ap"] = float("nan")
    return res


def evaluate(model: ESA, ds: Dataset, split: str, batch_size: int = 128) -> dict:
    out, y = predict(model, ds, split, batch_size)
    return score(ds.task, out, y, ds.num_classes)


METRIC_COLUMNS = {
    "regression": ("r2", "rmse", "mae"),
    "multiclass": ("mcc", "accuracy"),
    "binary": ("mcc", "accuracy"),
    "multilabel": ("ap",),
}


@dataclass
class MetricReport:
    task: str
    rows: list = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return ["phase", "epoch", "lr", "train_loss", "loss"] + list(METRIC_COLUMNS[self.task])

    def add(self, phase: str, epoch: int, lr: float, train_loss: float, res: dict) -> None:
        row = {"phase": phase, "epoch": epoch, "lr": lr, "train_loss": train_loss}
        row.update({k: res.get(k, float("nan")) for k in ["loss", *METRIC_COLUMNS[self.task]]})
        self.rows.append(row)

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def _improved(val: float, best: float, rel: float) -> bool:
    if math.isinf(best):
        return math.isfinite(val)
    return val < best - rel * abs(best)


def _epoch(model, ds, tcfg, items, lr, state, rng, batch_size, counters):
    params = model.parameters()
    losses = []
    for gs, y, sel in _iter_batches(ds, items, batch_size, by_item=True):
        model.zero_grad()
        with Tape():
            out = model(batch(gs), training=True, rng=rng)
            loss = task_loss(ds.task, out, _target_for(ds.task, y), sel)
            T.backward(loss)
        grads = [p.grad for p in params]
        clip_grad_norm(grads, tcfg.grad_clip_norm)
        adamw_step(params, grads, state, lr, tcfg.betas, tcfg.eps, tcfg.weight_decay)
        losses.append(float(loss.data))
        counters["steps"] += 1
        if tcfg.max_steps is not None and counters["steps"] >= tcfg.max_steps:
            break
    return float(np.mean(losses)) if losses else float("nan")


def train(model: ESA, ds: Dataset, tcfg: TrainConfig) -> MetricReport:
    """Fit `model` in place; the best-on-validation parameters are restored
    before the final test evaluation.

    Learning rate halves after ``lr_halving_patience`` epochs without a
    relative validation-loss improvement; training stops after ``patience``
    such epochs or when ``max_epochs`` / ``max_steps`` is reached.
    """
    for name in ("train", "val", "test"):
        if len(ds.split.get(name, ())) == 0:
            raise ValueError(f"split {name!r} is empty")
    rng = np.random.default_rng(tcfg.seed)
    report = MetricReport(ds.task)
    state = AdamState()
    lr = tcfg.lr
    batch_size = tcfg.batch_size
    best_val, best_state = math.inf, model.state()
    since_best = since_cut = 0
    counters = {"steps": 0}
    items = np.asarray(ds.split["train"])

    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(items)
        while True:
            try:
                train_loss = _epoch(model, ds, tcfg, order, lr, state, rng, batch_size, counters)
                break
            except MemoryError:
                if batch_size == 1:
                    raise
                batch_size //= 2
                log.warning("out of memory; batch size halved to %d", batch_size)
        val = evaluate(model, ds, "val", batch_size)
        report.add("epoch", epoch, lr, train_loss, val)
        log.info("epoch %d lr %.3g train %.5g val %.5g", epoch, lr, train_loss, val["loss"])

        if _improved(val["loss"], best_val, tcfg.min_rel_improvement):
            best_val, best_state = val["loss"], model.state()
            since_best = since_cut = 0
        else:
            since_best += 1
            since_cut += 1
            if since_cut >= tcfg.lr_halving_patience:
                lr *= 0.5
                since_cut = 0
        if since_best >= tcfg.patience:
            break
        if tcfg.max_steps is not None and counters["steps"] >= tcfg.max_steps:
            break

    model.load_state(best_state)
    test = evaluate(model, ds, "test", batch_size)
    report.add("test", epoch, lr, float("nan"), test)
    report.best_val_loss = best_val
    return report
