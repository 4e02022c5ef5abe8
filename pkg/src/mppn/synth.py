"""Synthetic event logs with known structure, for demos and tests."""

from __future__ import annotations

import csv
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from .eventlog import AttributeSchema, EventLog, build_log

BASE_TIME = int(datetime(2021, 1, 4, 8, 0, tzinfo=timezone.utc).timestamp())

SCHEMA = (
    AttributeSchema("case", "categorical", "case", "case_id"),
    AttributeSchema("activity", "categorical", "event", "activity"),
    AttributeSchema("resource", "categorical", "event", "resource"),
    AttributeSchema("timestamp", "temporal", "event", "timestamp"),
    AttributeSchema("cost", "numerical", "case", "other"),
    AttributeSchema("type", "categorical", "case", "other"),
)

REGISTER = "register travel request"
DECIDE = "decide on approval requirements"
FORWARD = "forward request to approver"
CHECK = "check if booking is necessary"
APPROVE = "approve request"
BOOK = "book travel"
ARCHIVE = "archive request"


def _rows(case_id: str, activities, start: int, gaps, resources, cost: float, kind: str) -> list[dict]:
    rows, t = [], start
    for i, a in enumerate(activities):
        if i:
            t += int(gaps[i - 1])
        rows.append({"case": case_id, "activity": a, "resource": resources[i], "timestamp": t,
                     "cost": cost, "type": kind})
    return rows


def branch_log(n_cases: int = 2000, seed: int = 0, threshold: float = 500.0) -> EventLog:
    """Travel-approval process whose branch after DECIDE depends only on the cost.

    cost >= threshold continues with FORWARD, otherwise with CHECK.  Resources,
    type and timing are drawn independently of the cost.
    """
    rng = np.random.default_rng(seed)
    staff = [f"clerk{i}" for i in range(6)]
    rows = []
    start = BASE_TIME
    for i in range(n_cases):
        cost = float(rng.integers(100, 1001))
        if cost >= threshold:
            tail = [FORWARD, APPROVE, BOOK, ARCHIVE]
        else:
            tail = [CHECK, BOOK, ARCHIVE] if rng.random() < 0.6 else [CHECK, ARCHIVE]
        acts = [REGISTER, DECIDE] + tail
        start += int(rng.integers(600, 7200))
        gaps = rng.integers(300, 86400, size=len(acts))
        res = [str(r) for r in rng.choice(staff, size=len(acts))]
        kind = "international" if rng.random() < 0.3 else "domestic"
        rows += _rows(f"c{i:05d}", acts, start, gaps, res, cost, kind)
    return build_log(SCHEMA, rows)


def variant_log(n_variants: int = 30, cases_per_variant: int = 6, seed: int = 0,
                alphabet: int = 8, min_len: int = 3, max_len: int = 8) -> EventLog:
    """Log with ``n_variants`` distinct activity sequences, each repeated ``cases_per_variant`` times."""
    rng = np.random.default_rng(seed)
    acts = [f"act{chr(65 + i)}" for i in range(alphabet)]
    variants: list[tuple] = []
    while len(variants) < n_variants:
        v = tuple(str(a) for a in rng.choice(acts, size=int(rng.integers(min_len, max_len + 1))))
        if v not in variants:
            variants.append(v)
    rows, start, k = [], BASE_TIME, 0
    for rep in range(cases_per_variant):
        for v in variants:
            start += int(rng.integers(600, 7200))
            gaps = rng.integers(60, 36000, size=len(v))
            res = [f"r{int(x)}" for x in rng.integers(0, 4, size=len(v))]
            rows += _rows(f"v{k:05d}", v, start, gaps, res, float(rng.integers(10, 100)), "domestic")
            k += 1
    return build_log(SCHEMA, rows)


def two_group_log(n_per_group: int = 40, seed: int = 0, duplicates: int = 1) -> tuple[EventLog, dict[str, int]]:
    """Two behaviour groups with disjoint activities and far-apart cost ranges.

    Returns the log and a case id -> group map.  The first ``duplicates``
    cases get an exact twin (all attributes equal, id suffixed ``-dup``).
    """
    rng = np.random.default_rng(seed)
    groups = {
        0: ([("a", "b", "c", "d"), ("a", "b", "d"), ("a", "c", "b", "d")], (100, 300), ["ann", "bob"]),
        1: ([("e", "f", "g"), ("e", "g", "f", "h", "i"), ("e", "f", "h", "i")], (5000, 9000), ["cat", "dan"]),
    }
    rows, label, start = [], {}, BASE_TIME
    twins = 0
    for i in range(2 * n_per_group):
        g = i % 2
        variants, (lo, hi), staff = groups[g]
        v = variants[int(rng.integers(len(variants)))]
        start += int(rng.integers(600, 7200))
        gaps = rng.integers(60, 36000, size=len(v))
        res = [str(r) for r in rng.choice(staff, size=len(v))]
        cost = float(rng.integers(lo, hi))
        cid = f"g{g}-{i:04d}"
        rows += _rows(cid, v, start, gaps, res, cost, "domestic")
        label[cid] = g
        if twins < duplicates:
            rows += _rows(cid + "-dup", v, start, gaps, res, cost, "domestic")
            label[cid + "-dup"] = g
            twins += 1
    return build_log(SCHEMA, rows), label


def write_csv(log: EventLog, path: str | Path, delimiter: str = ",") -> None:
    names = [a.name for a in log.schema]
    temporal = {a.name for a in log.schema if a.kind == "temporal"}
    events = sorted((e for c in log.cases for e in c.events), key=lambda e: e.index)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(names)
        for e in events:
            row = []
            for n in names:
                v = e.values[n]
                if v is None:
                    row.append("")
                elif n in temporal:
                    row.append(datetime.fromtimestamp(v, tz=timezone.utc).isoformat())
                elif isinstance(v, float) and v.is_integer():
                    row.append(str(int(v)))
                else:
                    row.append(str(v))
            w.writerow(row)


def write_schema(log: EventLog, path: str | Path, delimiter: str = ",") -> None:
    doc = {"delimiter": delimiter,
           "columns": [{"name": a.name, "kind": a.kind, "level": a.level, "role": a.role} for a in log.schema]}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
