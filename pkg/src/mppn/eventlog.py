"""Event log ingestion: CSV + schema config into immutable, case-grouped logs.

The schema config is a YAML document::

    delimiter: ","            # optional, default ","
    columns:
      - {name: case, kind: categorical, level: case, role: case_id}
      - {name: activity, kind: categorical, level: event, role: activity}
      - {name: resource, kind: categorical, level: event, role: resource}
      - {name: time, kind: temporal, level: event, role: timestamp}
      - {name: cost, kind: numerical, level: case}

``role`` defaults to ``other`` and ``level`` to ``event``.  Columns in the CSV
that are not listed in the schema are ignored.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import yaml

logger = logging.getLogger(__name__)

KINDS = ("categorical", "numerical", "temporal")
LEVELS = ("event", "case")
ROLES = ("case_id", "activity", "resource", "timestamp", "other")


class SchemaError(ValueError):
    """Invalid schema config, or a schema that does not match the CSV header."""


class LogParseError(ValueError):
    """A row of the CSV body could not be parsed."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


@dataclass(frozen=True)
class AttributeSchema:
    name: str
    kind: str
    level: str = "event"
    role: str = "other"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"attribute {self.name!r}: unknown kind {self.kind!r}")
        if self.level not in LEVELS:
            raise SchemaError(f"attribute {self.name!r}: unknown level {self.level!r}")
        if self.role not in ROLES:
            raise SchemaError(f"attribute {self.name!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class Event:
    index: int
    values: Mapping[str, Any]

    def __getitem__(self, name: str) -> Any:
        return self.values[name]


@dataclass(frozen=True)
class Case:
    case_id: str
    events: tuple[Event, ...]

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class Perspective:
    attribute: str
    values: tuple

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class EventLog:
    schema: tuple[AttributeSchema, ...]
    cases: tuple[Case, ...]
    vocab: Mapping[str, tuple] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.cases)

    def attribute(self, name: str) -> AttributeSchema:
        for a in self.schema:
            if a.name == name:
                return a
        raise KeyError(f"unknown attribute {name!r}")

    def by_role(self, role: str) -> AttributeSchema:
        for a in self.schema:
            if a.role == role:
                return a
        raise KeyError(f"no attribute with role {role!r}")

    @property
    def activity(self) -> str:
        return self.by_role("activity").name

    @property
    def timestamp(self) -> str:
        return self.by_role("timestamp").name

    @property
    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]

    def case(self, case_id: str) -> Case:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(f"unknown case {case_id!r}")

    def subset(self, case_ids: Iterable[str]) -> "EventLog":
        keep = set(case_ids)
        return EventLog(self.schema, tuple(c for c in self.cases if c.case_id in keep), self.vocab)


def validate_schema(schema: Sequence[AttributeSchema]) -> None:
    names = [a.name for a in schema]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise SchemaError(f"duplicate attribute names in schema: {', '.join(dupes)}")
    for role in ("case_id", "timestamp", "activity", "resource"):
        holders = [a for a in schema if a.role == role]
        if len(holders) != 1:
            raise SchemaError(f"schema needs exactly one attribute with role {role!r}, found {len(holders)}")
    ts = next(a for a in schema if a.role == "timestamp")
    if ts.kind != "temporal":
        raise SchemaError(f"timestamp attribute {ts.name!r} must be temporal, not {ts.kind}")
    for role in ("activity", "resource"):
        a = next(a for a in schema if a.role == role)
        if a.kind != "categorical":
            raise SchemaError(f"{role} attribute {a.name!r} must be categorical, not {a.kind}")


def load_schema(path: str | Path) -> tuple[tuple[AttributeSchema, ...], str]:
    """Read and validate a schema config; returns ``(schema, delimiter)``."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise SchemaError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("columns"), list):
        raise SchemaError(f"{path}: expected a mapping with a 'columns' list")
    schema = []
    for i, col in enumerate(doc["columns"]):
        if not isinstance(col, dict) or "name" not in col or "kind" not in col:
            raise SchemaError(f"{path}: column #{i} needs at least 'name' and 'kind'")
        unknown = set(col) - {"name", "kind", "level", "role"}
        if unknown:
            raise SchemaError(f"column {col['name']!r}: unknown keys {sorted(unknown)}")
        schema.append(AttributeSchema(str(col["name"]), col["kind"], col.get("level", "event"),
                                      col.get("role", "other")))
    validate_schema(schema)
    return tuple(schema), str(doc.get("delimiter", ","))


def parse_timestamp(text: str) -> int:
    """ISO-8601 to integer seconds since the Unix epoch; naive stamps are taken as UTC."""
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _convert(attr: AttributeSchema, raw: str, row: int):
    if raw is None or raw.strip() == "":
        if attr.role in ("case_id", "timestamp"):
            raise LogParseError(f"missing value for mandatory attribute {attr.name!r}", row)
        return None
    if attr.kind == "temporal":
        try:
            return parse_timestamp(raw)
        except ValueError:
            raise LogParseError(f"unparseable timestamp {raw!r} in column {attr.name!r}", row) from None
    if attr.kind == "numerical":
        try:
            return float(raw)
        except ValueError:
            raise LogParseError(f"non-numeric value {raw!r} in column {attr.name!r}", row) from None
    return raw


def build_log(schema: Sequence[AttributeSchema], rows: Iterable[Mapping[str, Any]]) -> EventLog:
    """Sort converted rows into the global order and group them into cases.

    Rows are dicts attribute-name -> converted value (``None`` for missing).
    Order is timestamp-major with input position as tiebreaker.
    """
    schema = tuple(schema)
    validate_schema(schema)
    cid = next(a.name for a in schema if a.role == "case_id")
    ts = next(a.name for a in schema if a.role == "timestamp")
    rows = list(rows)
    order = sorted(range(len(rows)), key=lambda i: (rows[i][ts], i))

    grouped: dict[str, list[Event]] = {}
    for gidx, i in enumerate(order):
        row = rows[i]
        ev = Event(gidx, {a.name: row.get(a.name) for a in schema})
        grouped.setdefault(str(row[cid]), []).append(ev)

    case_level = [a.name for a in schema if a.level == "case"]
    cases = []
    for case_id, events in grouped.items():
        if case_level:
            events = _broadcast_case_attributes(events, case_level)
        cases.append(Case(case_id, tuple(events)))

    vocab: dict[str, list] = {a.name: [] for a in schema if a.kind == "categorical" and a.role != "case_id"}
    seen: dict[str, set] = {k: set() for k in vocab}
    for case in cases:
        for ev in case.events:
            for name, values in vocab.items():
                v = ev.values[name]
                if v is not None and v not in seen[name]:
                    seen[name].add(v)
                    values.append(v)
    return EventLog(schema, tuple(cases), {k: tuple(v) for k, v in vocab.items()})


def _broadcast_case_attributes(events: list[Event], names: list[str]) -> list[Event]:
    # case attributes often sit on the first event only; the first non-missing value wins
    resolved = {}
    for name in names:
        resolved[name] = next((e.values[name] for e in events if e.values[name] is not None), None)
    return [Event(e.index, {**e.values, **resolved}) for e in events]


def parse_log(path: str | Path, schema_config: str | Path, delimiter: str | None = None) -> EventLog:
    schema, default_delim = load_schema(schema_config)
    delimiter = delimiter or default_delim
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row missing") from None
        dupes = sorted({h for h in header if header.count(h) > 1})
        if dupes:
            raise SchemaError(f"{path}: duplicate header names: {', '.join(dupes)}")
        missing = [a.name for a in schema if a.name not in header]
        if missing:
            raise SchemaError(f"{path}: missing mandatory column(s): {', '.join(missing)}")
        pos = {a.name: header.index(a.name) for a in schema}
        rows = []
        # row numbers are 1-based file lines, header is line 1
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise LogParseError(f"expected {len(header)} fields, got {len(raw)}", lineno)
            rows.append({a.name: _convert(a, raw[pos[a.name]], lineno) for a in schema})
    return build_log(schema, rows)


def extract_perspective(case: Case, attribute: str) -> Perspective:
    if not case.events:
        return Perspective(attribute, ())
    if attribute not in case.events[0].values:
        raise KeyError(f"unknown attribute {attribute!r}")
    return Perspective(attribute, tuple(e.values[attribute] for e in case.events))


def filter_by_length(log: EventLog, max_len: int) -> EventLog:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    kept = tuple(c for c in log.cases if len(c) <= max_len)
    if not kept and log.cases:
        logger.warning("filter_by_length(%d) removed all %d cases", max_len, len(log.cases))
    return EventLog(log.schema, kept, log.vocab)


def activity_sequence(case: Case, activity: str = "activity") -> tuple:
    return tuple(e.values[activity] for e in case.events)


def variant_of(case: Case, index: dict, activity: str = "activity") -> int:
    """Dense variant id of ``case``; ``index`` maps activity tuples to ids and grows in place."""
    key = activity_sequence(case, activity)
    return index.setdefault(key, len(index))


def variant_ids(log: EventLog) -> list[int]:
    index: dict = {}
    return [variant_of(c, index, log.activity) for c in log.cases]
