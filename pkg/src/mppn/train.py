"""Training stages: variant pretraining of CNN1, multi-task next-event
representation learning, and single-task fine-tuning.

All stages share one loop (:func:`fit`): Adam under a triangular cyclical
learning rate, early stopping on validation loss with best-weight restore,
and an optional per-epoch metrics CSV.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from . import net
from .eventlog import Case, EventLog, activity_sequence
from .gafenc import CaseEncoder, gaf_stack
from .tasks import PrefixData, build_prefix_data

logger = logging.getLogger(__name__)

# minimum decrease of the validation loss that counts as an improvement
MIN_DELTA = 1e-6


@dataclass
class TrainConfig:
    batch_size: int = 512
    max_epochs: int = 30
    patience: int = 5
    lr_min: float = 1e-4
    lr_max: float = 1e-3
    cycle_length: int | None = None  # steps per half cycle; None = two epochs
    seed: int = 0
    trunk_lr_factor: float = 0.1
    freeze_trunk: bool = False
    loss_weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError(f"lr_min ({self.lr_min}) must be below lr_max ({self.lr_max})")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


def cyclical_lr(step: int, cfg: TrainConfig, cycle_length: int | None = None) -> float:
    """Triangular policy: lr_min at step 0, lr_max at ``cycle_length``, period ``2 * cycle_length``."""
    half = cycle_length or cfg.cycle_length
    if not half or half < 1:
        raise ValueError("cycle_length must be >= 1")
    pos = step % (2 * half)
    frac = pos / half if pos <= half else 2.0 - pos / half
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac


def best_epoch(history: Sequence[float]) -> int:
    """0-based index of the last strict improvement (by more than MIN_DELTA)."""
    best, idx = math.inf, -1
    for i, v in enumerate(history):
        if v < best - MIN_DELTA:
            best, idx = v, i
    return idx


def early_stop(history: Sequence[float], patience: int) -> bool:
    if not history:
        return False
    return len(history) - 1 - best_epoch(history) >= patience


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    stopped_early: bool

    @property
    def val_losses(self) -> list[float]:
        return [h["val_loss"] for h in self.history]


LossFn = Callable[[torch.Tensor, dict[str, torch.Tensor]], tuple[torch.Tensor, dict[str, float]]]


def _batches(data: PrefixData, batch_size: int, rng: np.random.Generator | None):
    idx = np.arange(len(data)) if rng is None else rng.permutation(len(data))
    for i in range(0, len(idx), batch_size):
        sel = np.sort(idx[i:i + batch_size]) if rng is None else idx[i:i + batch_size]
        x = torch.from_numpy(gaf_stack(data.sequences[sel]))
        y = {h: torch.from_numpy(t[sel]) for h, t in data.targets.items()}
        yield x, y


def _evaluate_loss(module: nn.Module, data: PrefixData, loss_fn: LossFn, batch_size: int) -> float:
    module.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for x, y in _batches(data, batch_size, None):
            loss, _ = loss_fn(x, y)
            total += float(loss) * len(x)
            count += len(x)
    return total / max(count, 1)


def fit(module: nn.Module, param_groups: list[dict], train: PrefixData, val: PrefixData | None,
        loss_fn: LossFn, cfg: TrainConfig, metrics_path: str | Path | None = None) -> FitResult:
    """Optimize ``loss_fn`` on ``train``; early stopping monitors ``val`` (train loss if None).

    Each param group carries an ``lr_scale`` multiplying the scheduled rate.
    """
    if len(train) == 0:
        raise ValueError("no training examples")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    batch_size = min(cfg.batch_size, len(train))
    steps_per_epoch = math.ceil(len(train) / batch_size)
    half = cfg.cycle_length or 2 * steps_per_epoch
    groups = [{"params": g["params"], "lr": cfg.lr_min, "lr_scale": g.get("lr_scale", 1.0)} for g in param_groups]
    opt = torch.optim.Adam(groups, lr=cfg.lr_min, betas=(0.9, 0.999), eps=1e-8)

    history, best_state, best_loss = [], None, math.inf
    monitor: list[float] = []
    step, stopped = 0, False
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            module.train()
            tot, parts, seen = 0.0, {}, 0
            for x, y in _batches(train, batch_size, rng):
                lr = cyclical_lr(step, cfg, half)
                for g in opt.param_groups:
                    g["lr"] = lr * g["lr_scale"]
                opt.zero_grad()
                loss, per_head = loss_fn(x, y)
                loss.backward()
                opt.step()
                step += 1
                tot += float(loss.detach()) * len(x)
                seen += len(x)
                for k, v in per_head.items():
                    parts[k] = parts.get(k, 0.0) + v * len(x)
            train_loss = tot / seen
            val_loss = _evaluate_loss(module, val, loss_fn, batch_size) if val is not None and len(val) else train_loss
            row = {"epoch": epoch, "train_loss": train_loss}
            row.update({f"loss[{k}]": v / seen for k, v in sorted(parts.items())})
            row.update({"val_loss": val_loss, "lr": lr, "wall_time": time.perf_counter() - t0})
            history.append(row)
            if fh is not None:
                if writer is None:
                    writer = csv.DictWriter(fh, fieldnames=list(row))
                    writer.writeheader()
                writer.writerow(row)
                fh.flush()
            logger.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
            monitor.append(val_loss)
            if val_loss < best_loss - MIN_DELTA:
                best_loss, best_state = val_loss, net.clone_state(module)
            if early_stop(monitor, cfg.patience):
                stopped = True
                break
    finally:
        if fh is not None:
            fh.close()
    if best_state is not None:
        module.load_state_dict(best_state)
    return FitResult(history, best_epoch(monitor) + 1, stopped)


# learning rate range test

class LRFinderError(RuntimeError):
    def __init__(self, message: str, lrs: list[float], losses: list[float]):
        super().__init__(message)
        self.lrs = lrs
        self.losses = losses


@dataclass
class LRFindResult:
    lr: float
    lrs: list[float]
    losses: list[float]


def lr_find(module: nn.Module, batches: Iterable | Callable[[], Iterable], loss_fn: Callable,
            lr_lo: float = 1e-7, lr_hi: float = 10.0, steps: int = 100, smoothing: float = 0.9,
            make_optimizer: Callable | None = None) -> LRFindResult:
    """Exponential LR sweep; returns the LR where the smoothed loss falls fastest.

    ``batches`` is re-iterated as needed; ``loss_fn(batch)`` returns a scalar
    tensor.  Weights are restored afterwards.
    """
    if not lr_lo < lr_hi:
        raise ValueError("lr_lo must be below lr_hi")
    make_optimizer = make_optimizer or (lambda params, lr: torch.optim.Adam(params, lr=lr))
    snapshot = net.clone_state(module)
    opt = make_optimizer(module.parameters(), lr_lo)
    mult = (lr_hi / lr_lo) ** (1.0 / max(steps - 1, 1))

    def stream():
        while True:
            got = False
            for b in (batches() if callable(batches) else batches):
                got = True
                yield b
            if not got:
                raise ValueError("lr_find needs at least one batch")

    lrs, smoothed = [], []
    avg, best = 0.0, math.inf
    module.train()
    try:
        it = stream()
        for i in range(steps):
            lr = lr_lo * mult ** i
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            loss = loss_fn(next(it))
            value = float(loss.detach())
            if not math.isfinite(value):
                break
            avg = smoothing * avg + (1 - smoothing) * value
            s = avg / (1 - smoothing ** (i + 1))
            lrs.append(lr)
            smoothed.append(s)
            if s > 4 * best and i > 0:
                break
            best = min(best, s)
            loss.backward()
            opt.step()
    finally:
        module.load_state_dict(snapshot)
    if len(smoothed) < 3:
        raise LRFinderError("loss diverged before any descent was observed", lrs, smoothed)
    grads = np.gradient(np.asarray(smoothed), np.log(np.asarray(lrs)))
    i = int(np.argmin(grads))
    scale = max(abs(smoothed[0]), 1e-12)
    if grads[i] >= -1e-9 * scale:
        raise LRFinderError("no descent found in the learning rate sweep", lrs, smoothed)
    return LRFindResult(lrs[i], lrs, smoothed)


# stages

def _variant_targets(cases: Sequence[Case], activity: str, min_support: int) -> tuple[list[Case], np.ndarray, int]:
    counts: dict = {}
    for c in cases:
        key = activity_sequence(c, activity)
        counts[key] = counts.get(key, 0) + 1
    classes: dict = {}
    keep, labels = [], []
    for c in cases:
        key = activity_sequence(c, activity)
        if counts[key] >= min_support:
            keep.append(c)
            labels.append(classes.setdefault(key, len(classes)))
    return keep, np.asarray(labels, dtype=np.int64), len(classes)


@dataclass
class VariantReport:
    classes: int
    cases: int
    accuracy: float
    fit: FitResult


def pretrain_variant(model: net.MppnModel, log: EventLog, min_support: int = 5, cfg: TrainConfig | None = None,
                     checkpoint: str | Path | None = None, metrics_path: str | Path | None = None) -> VariantReport:
    """Train CNN1 (plus a throwaway head) to classify complete cases by control-flow variant."""
    cfg = cfg or TrainConfig()
    act = log.activity
    cases, labels, k = _variant_targets(log.cases, act, min_support)
    if k < 2:
        raise ValueError(f"need at least 2 variants with >= {min_support} cases, found {k}")
    enc = CaseEncoder.fit(log, cases, [act], n=model.n)
    seqs = np.stack([enc.sequences(c) for c in cases])
    data = PrefixData(seqs, {"variant": labels}, np.array([len(c) for c in cases]))
    head = net.build_layers(net.head_specs(model.feature_dim, k))
    net.init_weights(head, torch.Generator().manual_seed(cfg.seed))
    stage = nn.ModuleDict({"cnn1": model.cnn1, "head": head})

    def loss_fn(x, y):
        logits = head(model.cnn1_features(x[:, 0]))
        loss = net.cross_entropy(logits, y["variant"])
        return loss, {"variant": float(loss.detach())}

    result = fit(stage, [{"params": stage.parameters()}], data, None, loss_fn, cfg, metrics_path)
    stage.eval()
    with torch.no_grad():
        preds = []
        for x, _ in _batches(data, min(cfg.batch_size, len(data)), None):
            preds.append(head(model.cnn1_features(x[:, 0])).argmax(1).numpy())
    acc = float(np.mean(np.concatenate(preds) == labels))
    if checkpoint is not None:
        net.save_checkpoint(model, checkpoint, part="cnn1", extra={"stage": "variant", "classes": k,
                                                                     "accuracy": acc})
    logger.info("variant pretraining: %d classes, train accuracy %.4f", k, acc)
    return VariantReport(k, len(cases), acc, result)


def multitask_loss(model: net.MppnModel, weights: dict[str, float] | None = None) -> LossFn:
    """Sum over heads of cross-entropy (categorical) or MAE (regression) terms."""
    weights = weights or {}

    def loss_fn(x, y):
        fv = model(x)
        total, parts = 0.0, {}
        for name in y:
            term = net.head_loss(model, fv, name, y[name])
            parts[name] = float(term.detach())
            total = total + weights.get(name, 1.0) * term
        return total, parts

    return loss_fn


def representation_heads(model: net.MppnModel) -> dict[str, tuple[str, str]]:
    return {f"next:{a}": ("next", a) for a in model.perspectives}


def pretrain_representation(model: net.MppnModel, train_cases: Sequence[Case], val_cases: Sequence[Case],
                            cfg: TrainConfig | None = None, metrics_path: str | Path | None = None,
                            checkpoint: str | Path | None = None, complete: bool = False) -> FitResult:
    """Self-supervised multi-task next-event training of CNN1 + NN2; heads are dropped afterwards."""
    cfg = cfg or TrainConfig()
    heads = representation_heads(model)
    model.drop_heads()
    for name, (task, attr) in heads.items():
        model.add_task_head(task, attr)
    train = build_prefix_data(train_cases, model.encoder, heads, complete)
    if len(train) == 0:
        raise ValueError("no prefixes to train on (all cases have a single event)")
    val = build_prefix_data(val_cases, model.encoder, heads, complete) if val_cases else None
    loss_fn = multitask_loss(model, cfg.loss_weights)
    result = fit(model, [{"params": model.parameters()}], train, val, loss_fn, cfg, metrics_path)
    model.drop_heads()
    if checkpoint is not None:
        net.save_checkpoint(model, checkpoint, extra={"stage": "represent"})
    return result


def finetune(model: net.MppnModel, task: str, attribute: str, train_cases: Sequence[Case],
             val_cases: Sequence[Case], cfg: TrainConfig | None = None,
             metrics_path: str | Path | None = None, checkpoint: str | Path | None = None) -> FitResult:
    """Add head ``<task>:<attribute>`` on FV and train it (trunk at a reduced rate unless frozen)."""
    cfg = cfg or TrainConfig()
    if model.encoder is None or attribute not in model.encoder.kinds:
        raise ValueError(f"attribute {attribute!r} is not a perspective of the trained trunk")
    name = model.add_task_head(task, attribute)
    heads = {name: (task, attribute)}
    train = build_prefix_data(train_cases, model.encoder, heads)
    val = build_prefix_data(val_cases, model.encoder, heads) if val_cases else None
    hd = model.head_defs[name]
    if hd.kind == "categorical":
        for d in (train, val):
            if d is not None and len(d) and d.targets[name].max() >= hd.out:
                raise ValueError(f"label index exceeds head width {hd.out} for {attribute!r}")
    groups = [{"params": model.heads[net._key(name)].parameters(), "lr_scale": 1.0}]
    trunk = list(model.cnn1.parameters()) + list(model.nn2.parameters())
    if cfg.freeze_trunk:
        for p in trunk:
            p.requires_grad_(False)
    else:
        groups.append({"params": trunk, "lr_scale": cfg.trunk_lr_factor})
    try:
        result = fit(model, groups, train, val, multitask_loss(model), cfg, metrics_path)
    finally:
        for p in trunk:
            p.requires_grad_(True)
    if checkpoint is not None:
        net.save_checkpoint(model, checkpoint, extra={"stage": "finetune", "task": task, "attribute": attribute})
    return result
