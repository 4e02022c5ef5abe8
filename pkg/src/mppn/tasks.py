"""Prefixes, NSP/OUT labels, the case split protocol, metrics and evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .eventlog import Case, Event
from .gafenc import CaseEncoder

SECONDS_PER_DAY = 86400.0
TASKS = ("nsp", "out", "next")


@dataclass(frozen=True)
class Prefix:
    case: Case
    t: int

    @property
    def case_id(self) -> str:
        return self.case.case_id

    @property
    def events(self) -> tuple[Event, ...]:
        return self.case.events[: self.t]


@dataclass(frozen=True)
class TaskLabel:
    task: str
    attribute: str
    target: int | float


@dataclass(frozen=True)
class Split:
    train: frozenset
    val: frozenset
    test: frozenset
    seed: int
    run: int = 0

    def partition(self, cases: Iterable[Case]) -> tuple[list[Case], list[Case], list[Case]]:
        train, val, test = [], [], []
        for c in cases:
            if c.case_id in self.test:
                test.append(c)
            elif c.case_id in self.val:
                val.append(c)
            elif c.case_id in self.train:
                train.append(c)
        return train, val, test


def make_prefixes(case: Case) -> list[Prefix]:
    """Prefixes of length 1..n-1; single-event cases yield none."""
    return [Prefix(case, t) for t in range(1, len(case))]


def prefixes_for(cases: Iterable[Case]) -> tuple[list[Prefix], list[str]]:
    """All prefixes of ``cases`` plus the ids of cases too short to yield any."""
    out, skipped = [], []
    for c in cases:
        p = make_prefixes(c)
        if not p:
            skipped.append(c.case_id)
        out.extend(p)
    return out, skipped


def label_nsp(prefix: Prefix, attribute: str, encoder: CaseEncoder | None = None) -> TaskLabel:
    """Next-step label a(e_{t+1}); encoded (class index / scaled real) when an encoder is given."""
    ev = prefix.case.events[prefix.t] if prefix.t < len(prefix.case) else None
    if encoder is not None:
        return TaskLabel("nsp", attribute, encoder.target(attribute, ev))
    if ev is None:
        raise ValueError("prefix covers the whole case, no next event")
    return TaskLabel("nsp", attribute, ev.values[attribute])


def label_out(prefix: Prefix, attribute: str, encoder: CaseEncoder | None = None) -> TaskLabel:
    """Outcome label a(e_n) of the prefix's case."""
    ev = prefix.case.events[-1]
    if encoder is not None:
        return TaskLabel("out", attribute, encoder.target(attribute, ev))
    return TaskLabel("out", attribute, ev.values[attribute])


def label(prefix: Prefix, task: str, attribute: str, encoder: CaseEncoder | None = None) -> TaskLabel:
    if task in ("nsp", "next"):
        return label_nsp(prefix, attribute, encoder)
    if task == "out":
        return label_out(prefix, attribute, encoder)
    raise ValueError(f"unknown task {task!r}")


def split_cases(case_ids: Sequence[str], seed: int, run: int = 0,
                test_frac: float = 0.2, val_frac: float = 0.1) -> Split:
    """Case-level split: the test set depends on ``seed`` only, train/val also on ``run``."""
    ids = sorted(case_ids)
    n = len(ids)
    if n < 10:
        raise ValueError(f"need at least 10 cases to split, got {n}")
    n_test, n_val = math.floor(n * test_frac), math.floor(n * val_frac)
    if n_test < 1 or n_val < 1 or n - n_test - n_val < 1:
        raise ValueError(f"{n} cases are too few to populate train, validation and test")
    perm = np.random.default_rng(seed).permutation(n)
    test = [ids[i] for i in perm[:n_test]]
    rest = [ids[i] for i in perm[n_test:]]
    rperm = np.random.default_rng([seed, run]).permutation(len(rest))
    val = [rest[i] for i in rperm[:n_val]]
    train = [rest[i] for i in rperm[n_val:]]
    return Split(frozenset(train), frozenset(val), frozenset(test), seed, run)


def accuracy(preds: Sequence, targets: Sequence) -> float:
    if len(preds) != len(targets):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(targets)} targets")
    if len(preds) == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return sum(p == t for p, t in zip(preds, targets)) / len(preds)


def mae(preds: Sequence[float], targets: Sequence[float]) -> float:
    p, t = np.asarray(preds, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("MAE of an empty prediction set is undefined")
    return float(np.mean(np.abs(p - t)))


def mae_days(pred_durations: Sequence[float], target_durations: Sequence[float]) -> float:
    return mae(pred_durations, target_durations) / SECONDS_PER_DAY


@dataclass
class PrefixData:
    """Scaled, padded prefix sequences with their encoded targets per head."""

    sequences: np.ndarray  # (N, P, n)
    targets: dict[str, np.ndarray]
    lengths: np.ndarray  # prefix length t per row
    case_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)


def build_prefix_data(cases: Iterable[Case], encoder: CaseEncoder, heads: dict[str, tuple[str, str]],
                      complete: bool = False) -> PrefixData:
    """Encode all prefixes of ``cases`` (or the complete cases) with targets for each head.

    ``heads`` maps head name -> (task, attribute).
    """
    seqs, lengths, ids = [], [], []
    targets: dict[str, list] = {h: [] for h in heads}
    for case in cases:
        units = [Prefix(case, len(case))] if complete else make_prefixes(case)
        for p in units:
            seqs.append(encoder.sequences(p.events))
            lengths.append(p.t)
            ids.append(p.case_id)
            for h, (task, attr) in heads.items():
                targets[h].append(label(p, task, attr, encoder).target)
    P, n = len(encoder.perspectives), encoder.n
    arr = np.stack(seqs) if seqs else np.zeros((0, P, n))
    tgt = {}
    for h, (task, attr) in heads.items():
        dtype = np.int64 if encoder.kinds[attr] == "categorical" else np.float64
        tgt[h] = np.asarray(targets[h], dtype=dtype)
    return PrefixData(arr, tgt, np.asarray(lengths, dtype=np.int64), ids)


@dataclass
class EvalResult:
    task: str
    attribute: str
    metric: str
    value: float
    count: int
    by_length: list[tuple[int, int, float]]  # (prefix length, count, metric)

    def write_csv(self, path: str | Path, stddev: float = 0.0, runs: int = 1) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "attribute", "metric", "value", "stddev", "runs", "count"])
            w.writerow([self.task, self.attribute, self.metric, repr(self.value), repr(stddev), runs, self.count])

    def write_breakdown(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["prefix_length", "count", self.metric])
            for t, k, v in self.by_length:
                w.writerow([t, k, repr(v)])


def score(kind: str, preds: np.ndarray, targets: np.ndarray) -> tuple[str, float]:
    if kind == "categorical":
        return "accuracy", accuracy(list(preds), list(targets))
    if kind == "temporal":
        return "mae_days", mae_days(preds, targets)
    return "mae", mae(preds, targets)


def evaluate(model, cases: Sequence[Case], task: str, attribute: str, batch_size: int = 512) -> EvalResult:
    """Score head ``<task>:<attribute>`` over every prefix of ``cases``."""
    from .net import predict

    head = f"{task}:{attribute}"
    if head not in model.heads:
        raise KeyError(f"model has no head {head!r}; fine-tune it first")
    enc = model.encoder
    data = build_prefix_data(cases, enc, {head: (task, attribute)})
    if len(data) == 0:
        raise ValueError("no prefixes to evaluate")
    out = predict(model, data.sequences, head, batch_size)
    kind = enc.kinds[attribute]
    if kind == "categorical":
        preds = np.argmax(out, axis=1)  # first maximum wins ties
        targets = data.targets[head]
    else:
        # regression heads work in scaled space; metrics are in raw units
        preds = enc.unscale(attribute, out)
        targets = enc.unscale(attribute, data.targets[head])
    metric, value = score(kind, preds, targets)
    by_length = []
    for t in np.unique(data.lengths):
        m = data.lengths == t
        by_length.append((int(t), int(m.sum()), score(kind, preds[m], targets[m])[1]))
    return EvalResult(task, attribute, metric, float(value), len(data), by_length)
