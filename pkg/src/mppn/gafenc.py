"""Perspective to Gramian Angular (Summation) Field encoding.

Every perspective, whatever its kind, goes through the same pipeline::

    raw values -> numeric sequence -> pad/truncate to n -> scale to [-1, 1] -> GASF (n x n)

Categoricals are integer encoded, timestamps become seconds since a fixed
origin, numericals pass through unchanged.  All fitted state (vocabularies,
origin, medians, scaling ranges) lives in :class:`CaseEncoder` so it can be
stored next to the model weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .eventlog import Case, Event, EventLog, Perspective

UNK = "<UNK>"
MISSING = "<MISSING>"
EOC = "<EOC>"
# arccos domain slack for values that are in range up to rounding
GAF_TOL = 1e-12


@dataclass(frozen=True)
class NumericSequence:
    attribute: str
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError("numeric sequence must be one-dimensional")
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"{self.attribute}: non-finite value in numeric sequence")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ScalingParams:
    attribute: str
    min: float
    max: float

    @property
    def constant(self) -> bool:
        return self.min == self.max


@dataclass(frozen=True)
class GafImage:
    attribute: str
    matrix: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def encode_categorical(perspective: Perspective, vocab: Sequence) -> NumericSequence:
    """Integer-encode against ``vocab``; unseen values map to ``len(vocab)``, missing ones to ``len(vocab) + 1``."""
    index = {v: i for i, v in enumerate(vocab)}
    unk, missing = len(vocab), len(vocab) + 1
    vals = [missing if v is None or v == MISSING else index.get(v, unk) for v in perspective.values]
    return NumericSequence(perspective.attribute, np.array(vals, dtype=np.float64))


def encode_temporal(perspective: Perspective, origin: int, fill: float | None = None) -> NumericSequence:
    raw = [fill if v is None else v for v in perspective.values]
    if any(v is None for v in raw):
        raise ValueError(f"{perspective.attribute}: missing timestamp and no fill value")
    vals = np.array(raw, dtype=np.float64) - float(origin)
    if np.any(vals < 0):
        raise ValueError(f"{perspective.attribute}: timestamp before origin {origin}")
    return NumericSequence(perspective.attribute, vals)


def encode_numerical(perspective: Perspective, fill: float | None = None) -> NumericSequence:
    vals = []
    for v in perspective.values:
        if v is None:
            if fill is None:
                raise ValueError(f"{perspective.attribute}: missing numeric value and no fill value")
            v = fill
        try:
            vals.append(float(v))
        except (TypeError, ValueError):
            raise ValueError(f"{perspective.attribute}: non-numeric value {v!r}") from None
    return NumericSequence(perspective.attribute, np.array(vals, dtype=np.float64))


def normalize_length(seq: NumericSequence, n: int, pad_value: float, pad_mode: str = "front") -> NumericSequence:
    """Truncate to the last ``n`` values or pad with ``pad_value`` up to ``n``."""
    if n < 1:
        raise ValueError("target length must be >= 1")
    if pad_mode not in ("front", "back"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    vals = seq.values[-n:]
    pad = np.full(n - len(vals), pad_value, dtype=np.float64)
    out = np.concatenate([pad, vals] if pad_mode == "front" else [vals, pad])
    return NumericSequence(seq.attribute, out)


def fit_scaling(train_sequences: Sequence[NumericSequence], attribute: str) -> ScalingParams:
    vals = [s.values for s in train_sequences if len(s)]
    if not vals:
        raise ValueError(f"{attribute}: no training values to fit scaling on")
    allv = np.concatenate(vals)
    return ScalingParams(attribute, float(allv.min()), float(allv.max()))


def scale_values(values: np.ndarray, params: ScalingParams) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if params.constant:
        return np.zeros_like(values)
    out = 2.0 * (values - params.min) / (params.max - params.min) - 1.0
    return np.clip(out, -1.0, 1.0)


def unscale_values(values: np.ndarray, params: ScalingParams) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if params.constant:
        return np.full_like(values, params.min)
    return (values + 1.0) / 2.0 * (params.max - params.min) + params.min


def scale_apply(seq: NumericSequence, params: ScalingParams) -> NumericSequence:
    return NumericSequence(seq.attribute, scale_values(seq.values, params))


def _check_domain(x: np.ndarray) -> np.ndarray:
    if np.any(np.abs(x) > 1.0 + GAF_TOL):
        raise ValueError("GAF input must be scaled to [-1, 1]")
    return np.clip(x, -1.0, 1.0)


def gaf_stack(x: np.ndarray) -> np.ndarray:
    """GASF over the last axis: ``(..., n) -> (..., n, n)``.

    Uses cos(a + b) = cos a cos b - sin a sin b with cos(arccos x) = x and
    sin(arccos x) = sqrt(1 - x^2).
    """
    x = _check_domain(np.asarray(x, dtype=np.float64))
    s = np.sqrt(1.0 - x * x)
    m = x[..., :, None] * x[..., None, :] - s[..., :, None] * s[..., None, :]
    return np.clip(m, -1.0, 1.0)


def gaf_transform(seq: NumericSequence) -> GafImage:
    return GafImage(seq.attribute, gaf_stack(seq.values))


def export_grayscale(img: GafImage, path: str | Path) -> None:
    """Write an 8-bit binary PGM (P5); pixel = round-half-up((v + 1) / 2 * 255)."""
    pix = np.floor((img.matrix + 1.0) / 2.0 * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


@dataclass
class CaseEncoder:
    """Fitted encoding state for a fixed, ordered set of perspectives."""

    perspectives: list[str]
    kinds: dict[str, str]
    n: int = 64
    pad_mode: str = "front"
    vocab: dict[str, list] = field(default_factory=dict)
    origins: dict[str, int] = field(default_factory=dict)
    medians: dict[str, float] = field(default_factory=dict)
    scaling: dict[str, ScalingParams] = field(default_factory=dict)

    @classmethod
    def fit(cls, log: EventLog, train_cases: Sequence[Case], perspectives: Sequence[str],
            n: int = 64, pad_mode: str = "front") -> "CaseEncoder":
        kinds = {}
        for name in perspectives:
            attr = log.attribute(name)
            if attr.role == "case_id":
                raise ValueError("the case id is not a perspective")
            kinds[name] = attr.kind
        if not train_cases:
            raise ValueError("cannot fit an encoder on zero training cases")
        enc = cls(list(perspectives), kinds, n, pad_mode)
        for name in perspectives:
            values = [e.values[name] for c in train_cases for e in c.events]
            if kinds[name] == "temporal":
                # log-wide origin so absolute position in time survives encoding
                present = [e.values[name] for c in log.cases for e in c.events if e.values[name] is not None]
                enc.origins[name] = int(min(present))
                train_present = [float(v) for v in values if v is not None]
                if len(train_present) < len(values):
                    enc.medians[name] = float(np.median(train_present))
            if kinds[name] == "categorical":
                seen: dict = {}
                for v in values:
                    if v is not None and v != MISSING:
                        seen.setdefault(v, None)
                enc.vocab[name] = list(seen)
            elif kinds[name] == "numerical":
                present = [float(v) for v in values if v is not None]
                enc.medians[name] = float(np.median(present)) if present else 0.0
            seqs = [enc.raw_sequence(c.events, name) for c in train_cases]
            enc.scaling[name] = fit_scaling(seqs, name)
        return enc

    def raw_sequence(self, events: Sequence[Event], name: str) -> NumericSequence:
        persp = Perspective(name, tuple(e.values[name] for e in events))
        kind = self.kinds[name]
        if kind == "categorical":
            return encode_categorical(persp, self.vocab[name])
        if kind == "temporal":
            return encode_temporal(persp, self.origins[name], self.medians.get(name))
        return encode_numerical(persp, self.medians.get(name))

    def pad_value(self, name: str) -> float:
        return self.scaling[name].min

    def scaled_sequence(self, events: Sequence[Event], name: str) -> NumericSequence:
        seq = normalize_length(self.raw_sequence(events, name), self.n, self.pad_value(name), self.pad_mode)
        return scale_apply(seq, self.scaling[name])

    def sequences(self, events: Sequence[Event] | Case) -> np.ndarray:
        """Scaled, length-normalized sequences, shape ``(len(perspectives), n)``."""
        if isinstance(events, Case):
            events = events.events
        return np.stack([self.scaled_sequence(events, p).values for p in self.perspectives])

    def encode_case(self, events: Sequence[Event] | Case, perspectives: Sequence[str] | None = None) -> list[GafImage]:
        if isinstance(events, Case):
            events = events.events
        names = self.perspectives if perspectives is None else list(perspectives)
        return [gaf_transform(self.scaled_sequence(events, p)) for p in names]

    def images(self, events: Sequence[Event] | Case) -> np.ndarray:
        return gaf_stack(self.sequences(events))

    # targets

    def n_classes(self, name: str) -> int:
        # vocabulary + <UNK> + <MISSING> + end-of-case
        return len(self.vocab[name]) + 3

    def eoc_index(self, name: str) -> int:
        return len(self.vocab[name]) + 2

    def class_label(self, name: str, index: int):
        vocab = self.vocab[name]
        if index < len(vocab):
            return vocab[index]
        return (UNK, MISSING, EOC)[index - len(vocab)]

    def target(self, name: str, event: Event | None):
        """Encoded target for ``event``: class index, or scaled real for numeric kinds."""
        if self.kinds[name] == "categorical":
            if event is None:
                return self.eoc_index(name)
            return int(self.raw_sequence([event], name).values[0])
        if event is None:
            raise ValueError(f"{name}: no end-of-case value for a regression target")
        raw = self.raw_sequence([event], name).values
        return float(scale_values(raw, self.scaling[name])[0])

    def unscale(self, name: str, values) -> np.ndarray:
        return unscale_values(values, self.scaling[name])

    def to_dict(self) -> dict:
        return {
            "perspectives": list(self.perspectives),
            "kinds": dict(self.kinds),
            "n": self.n,
            "pad_mode": self.pad_mode,
            "vocab": {k: list(v) for k, v in self.vocab.items()},
            "origins": dict(self.origins),
            "medians": dict(self.medians),
            "scaling": {k: [p.min, p.max] for k, p in self.scaling.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaseEncoder":
        return cls(
            perspectives=list(d["perspectives"]),
            kinds=dict(d["kinds"]),
            n=int(d["n"]),
            pad_mode=d["pad_mode"],
            vocab={k: list(v) for k, v in d["vocab"].items()},
            origins={k: int(v) for k, v in d["origins"].items()},
            medians={k: float(v) for k, v in d["medians"].items()},
            scaling={k: ScalingParams(k, float(v[0]), float(v[1])) for k, v in d["scaling"].items()},
        )


def encode_case(case: Case, encoder: CaseEncoder, perspectives: Sequence[str] | None = None) -> list[GafImage]:
    return encoder.encode_case(case, perspectives)
