"""Case retrieval over learned feature vectors, retrieval audits and PCA projection.

Store file layout (little-endian)::

    b"MPPNFVS1" | fv_dim uint32 | count uint32 | model checksum (32 bytes)
    count x [ id length uint16 | UTF-8 case id | fv_dim float64 ]
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .eventlog import EventLog
from .gafenc import CaseEncoder

STORE_MAGIC = b"MPPNFVS1"


@dataclass(frozen=True)
class FvStore:
    case_ids: tuple[str, ...]
    vectors: np.ndarray  # (count, fv_dim)
    model_checksum: bytes = b"\0" * 32

    def __post_init__(self):
        if len(set(self.case_ids)) != len(self.case_ids):
            raise ValueError("duplicate case ids in store")
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.case_ids):
            raise ValueError("store vectors must be (count, fv_dim)")

    @property
    def fv_dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.case_ids)

    def index(self, case_id: str) -> int:
        try:
            return self.case_ids.index(case_id)
        except ValueError:
            raise KeyError(f"case {case_id!r} is not in the store") from None

    def save(self, path: str | Path) -> None:
        out = bytearray(STORE_MAGIC)
        out += struct.pack("<II", self.fv_dim, len(self))
        out += self.model_checksum
        for cid, vec in zip(self.case_ids, self.vectors):
            raw = cid.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw
            out += vec.astype("<f8").tobytes()
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path: str | Path) -> "FvStore":
        data = Path(path).read_bytes()
        if data[:8] != STORE_MAGIC or len(data) < 48:
            raise ValueError(f"{path}: not a feature-vector store")
        dim, count = struct.unpack_from("<II", data, 8)
        checksum = data[16:48]
        off, ids, rows = 48, [], []
        for _ in range(count):
            if off + 2 > len(data):
                raise ValueError(f"{path}: truncated store")
            (k,) = struct.unpack_from("<H", data, off)
            off += 2
            if off + k + 8 * dim > len(data):
                raise ValueError(f"{path}: truncated store")
            ids.append(data[off:off + k].decode("utf-8"))
            off += k
            rows.append(np.frombuffer(data[off:off + 8 * dim], dtype="<f8"))
            off += 8 * dim
        if off != len(data):
            raise ValueError(f"{path}: trailing bytes after {count} entries")
        vecs = np.stack(rows) if rows else np.zeros((0, dim))
        return cls(tuple(ids), vecs.astype(np.float64), checksum)


def build_store(model, log: EventLog, batch_size: int = 512, model_checksum: bytes | None = None) -> FvStore:
    """One inference-mode FV per complete case."""
    from .net import features

    if not log.cases:
        raise ValueError("cannot build a store from an empty log")
    enc: CaseEncoder = model.encoder
    seqs = np.stack([enc.sequences(c) for c in log.cases])
    vecs = features(model, seqs, batch_size)
    return FvStore(tuple(log.case_ids), vecs, model_checksum or b"\0" * 32)


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine distance undefined for a zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


@dataclass
class Neighbor:
    case_id: str
    distance: float
    dld: int | None = None
    mae: dict[str, float] | None = None


@dataclass
class RetrievalResult:
    query_id: str
    neighbors: list[Neighbor]
    excluded: list[str]  # zero-norm vectors

    def write_csv(self, path: str | Path, perspectives: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", "neighbor_id", "fv_distance", "dld"] + [f"mae[{p}]" for p in perspectives])
            for nb in self.neighbors:
                maes = [repr((nb.mae or {}).get(p, float("nan"))) for p in perspectives]
                w.writerow([self.query_id, nb.case_id, repr(nb.distance), nb.dld] + maes)


def retrieve(store: FvStore, query_id: str, k: int = 10) -> RetrievalResult:
    """Top-``k`` cases by cosine distance; ties are broken by case id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    qi = store.index(query_id)
    norms = np.linalg.norm(store.vectors, axis=1)
    if norms[qi] == 0:
        raise ValueError(f"query {query_id!r} has a zero-norm feature vector")
    ok = norms > 0
    sims = store.vectors @ store.vectors[qi]
    dist = np.full(len(store), np.inf)
    dist[ok] = 1.0 - sims[ok] / (norms[ok] * norms[qi])
    excluded = [store.case_ids[i] for i in np.flatnonzero(~ok)]
    order = sorted((i for i in range(len(store)) if ok[i] and i != qi),
                   key=lambda i: (dist[i], store.case_ids[i]))
    return RetrievalResult(query_id, [Neighbor(store.case_ids[i], float(dist[i])) for i in order[:k]], excluded)


def damerau_levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Unrestricted Damerau-Levenshtein distance (unit costs, adjacent transpositions).

    Lowrance-Wagner dynamic program with a last-occurrence table.
    """
    la, lb = len(a), len(b)
    inf = la + lb
    d = [[0] * (lb + 2) for _ in range(la + 2)]
    d[0][0] = inf
    for i in range(la + 1):
        d[i + 1][0], d[i + 1][1] = inf, i
    for j in range(lb + 1):
        d[0][j + 1], d[1][j + 1] = inf, j
    last_row: dict = {}
    for i in range(1, la + 1):
        last_col = 0
        for j in range(1, lb + 1):
            i1 = last_row.get(b[j - 1], 0)
            j1 = last_col
            cost = 0 if a[i - 1] == b[j - 1] else 1
            if cost == 0:
                last_col = j
            d[i + 1][j + 1] = min(
                d[i][j] + cost,
                d[i + 1][j] + 1,
                d[i][j + 1] + 1,
                d[i1][j1] + (i - i1 - 1) + 1 + (j - j1 - 1),
            )
        last_row[a[i - 1]] = i
    return d[la + 1][lb + 1]


def audit_similarity(log: EventLog, query_id: str, neighbor_id: str, perspectives: Sequence[str],
                     encoder: CaseEncoder) -> tuple[int, dict[str, float]]:
    """DLD of the activity sequences and MAE per numeric/temporal perspective.

    MAE compares raw encoded values (timestamps as seconds since origin),
    truncated to the shorter case.
    """
    q, nb = log.case(query_id), log.case(neighbor_id)
    act = log.activity
    dld = damerau_levenshtein([e.values[act] for e in q.events], [e.values[act] for e in nb.events])
    maes = {}
    for p in perspectives:
        if encoder.kinds.get(p, log.attribute(p).kind) == "categorical":
            continue
        x = encoder.raw_sequence(q.events, p).values
        y = encoder.raw_sequence(nb.events, p).values
        m = min(len(x), len(y))
        maes[p] = float(np.mean(np.abs(x[:m] - y[:m])))
    return dld, maes


def audit(result: RetrievalResult, log: EventLog, perspectives: Sequence[str], encoder: CaseEncoder) -> RetrievalResult:
    for nb in result.neighbors:
        nb.dld, nb.mae = audit_similarity(log, result.query_id, nb.case_id, perspectives, encoder)
    return result


@dataclass
class Projection:
    case_ids: tuple[str, ...]
    coords: np.ndarray  # (count, dims)
    explained_ratio: np.ndarray
    components: np.ndarray  # (dims, fv_dim)
    mean: np.ndarray

    def write_csv(self, path: str | Path, variants: Sequence[int] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            dims = self.coords.shape[1]
            axes = ["x", "y", "z"][:dims] if dims <= 3 else [f"pc{i + 1}" for i in range(dims)]
            w.writerow(["case_id"] + axes + ["variant_id"])
            for i, cid in enumerate(self.case_ids):
                w.writerow([cid] + [repr(float(v)) for v in self.coords[i]] + [variants[i] if variants else ""])


def pca(x: np.ndarray, dims: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Covariance eigendecomposition PCA; returns (coords, explained ratio, components, mean).

    Components come in descending eigenvalue order, each signed so its first
    non-negligible loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < dims + 1:
        raise ValueError(f"need at least {dims + 1} points for a {dims}-d projection")
    if dims > x.shape[1]:
        raise ValueError(f"cannot project {x.shape[1]}-d data onto {dims} components")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    total = vals.sum()
    if total <= 1e-12 * max(1.0, float(np.abs(x).max())) ** 2:
        raise ValueError("degenerate covariance: all feature vectors are identical")
    comps = vecs[:, :dims].T.copy()
    for c in comps:
        nz = np.flatnonzero(np.abs(c) > 1e-12)
        if len(nz) and c[nz[0]] < 0:
            c *= -1.0
    return xc @ comps.T, vals[:dims] / total, comps, mean


def project_pca(store: FvStore, dims: int = 2) -> Projection:
    coords, ratio, comps, mean = pca(store.vectors, dims)
    return Projection(store.case_ids, coords, ratio, comps, mean)
