"""Stage 1: embedding scoring, candidate selection, compass edge filter.

Scoring is an exhaustive dot product over all reference primaries (a few
thousand at city scale) so results are exact and deterministic; the
min-max confidence rescale preserves the raw cosine ordering.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .angles import angular_difference_deg
from .citygraph import CityGraph, edge_tangent_bearing
from .errors import UnknownIdError, ValidationError

_EMBED_MAGIC = b"EMBD"
_EMBED_VERSION = 1

# All cosines equal (or a single entry): every candidate is equally best,
# so each gets full confidence and the downstream k-cap does the bounding.
_DEGENERATE_CONFIDENCE = 1.0
_SPREAD_TOL = 1e-15


@dataclass(frozen=True)
class Embedding:
    """Fixed-length feature vector with non-zero norm."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1).copy()
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise ValidationError("embedding must be non-empty and finite")
        if np.linalg.norm(v) < 1e-12:
            raise ValidationError("embedding must have non-zero norm")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.size)


class EmbeddingDatabase:
    """Reference embeddings for primary nodes, read-only after load."""

    def __init__(self, entries: dict[str, Embedding]):
        if not entries:
            raise ValidationError("embedding database must be non-empty")
        dims = {e.dim for e in entries.values()}
        if len(dims) != 1:
            raise ValidationError(f"embeddings have mixed dimensions {sorted(dims)}")
        self._ids = tuple(sorted(entries))
        self._index = {node_id: i for i, node_id in enumerate(self._ids)}
        self._matrix = np.stack([entries[i].values for i in self._ids])
        norms = np.linalg.norm(self._matrix, axis=1, keepdims=True)
        self._unit = self._matrix / norms
        self.dim = int(self._matrix.shape[1])

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def get(self, node_id: str) -> Embedding:
        if node_id not in self._index:
            raise UnknownIdError(f"no embedding for node {node_id!r}")
        return Embedding(self._matrix[self._index[node_id]])

    def cosines(self, query: Embedding) -> np.ndarray:
        q = query.values / np.linalg.norm(query.values)
        return self._unit @ q


@dataclass(frozen=True)
class CandidateScore:
    node: str
    raw_cosine: float
    confidence: float


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[CandidateScore, ...]
    theta_c: float
    k: int


def score_candidates(query: Embedding, db: EmbeddingDatabase) -> list[CandidateScore]:
    """Cosine-score every reference, min-max rescaled to [0, 1].

    Sorted by descending confidence (ties broken by node id for
    determinism); the confidence ordering equals the cosine ordering.
    """
    if query.dim != db.dim:
        raise ValidationError(f"query dim {query.dim} != database dim {db.dim}")
    cosines = db.cosines(query)
    lo, hi = float(cosines.min()), float(cosines.max())
    if hi - lo < _SPREAD_TOL:
        confidences = np.full(len(db), _DEGENERATE_CONFIDENCE)
    else:
        confidences = (cosines - lo) / (hi - lo)
    order = np.lexsort((np.array(db.ids), -cosines))
    return [
        CandidateScore(node=db.ids[i], raw_cosine=float(cosines[i]), confidence=float(confidences[i]))
        for i in order
    ]


def select_candidates(scores, theta_c: float, k: int) -> CandidateSet:
    """Keep the top-k scores whose confidence strictly exceeds theta_c."""
    if not 0.0 <= theta_c <= 1.0:
        raise ValidationError(f"theta_c {theta_c} outside [0, 1]")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    kept = tuple(s for i, s in enumerate(scores) if i < k and s.confidence > theta_c)
    return CandidateSet(candidates=kept, theta_c=theta_c, k=k)


def compass_filter_edges(
    graph: CityGraph, candidate: str, compass_yaw: float, yaw_threshold: float
) -> list[str]:
    """Incident edges whose outgoing direction matches the compass.

    Keeps edges whose polyline tangent leaving the candidate is within
    `yaw_threshold` of `compass_yaw` (wrapped difference); 180 degrees
    keeps every incident edge.
    """
    if not 0.0 < yaw_threshold <= 180.0:
        raise ValidationError(f"yaw_threshold {yaw_threshold} outside (0, 180]")
    kept = []
    for eid in graph.incident_edges(candidate):
        outgoing = edge_tangent_bearing(graph, eid, away_from=candidate)
        if angular_difference_deg(outgoing, compass_yaw) <= yaw_threshold:
            kept.append(eid)
    return kept


# ---------------------------------------------------------------------------
# persistence: binary records, with a JSON alternative for fixtures


def save_embeddings(db: EmbeddingDatabase, path) -> None:
    """Binary layout: magic, version u32, dim u32, count u32, then
    per-record id-length u32, id bytes (utf-8), dim little-endian f32."""
    out = bytearray()
    out += _EMBED_MAGIC
    out += struct.pack("<III", _EMBED_VERSION, db.dim, len(db))
    for i, node_id in enumerate(db.ids):
        encoded = node_id.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += db._matrix[i].astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_embeddings(path) -> EmbeddingDatabase:
    """Load the binary format, or the JSON alternative
    ``{"dim": d, "entries": {id: [floats]}}``."""
    data = Path(path).read_bytes()
    if not data.startswith(_EMBED_MAGIC):
        doc = json.loads(data.decode("utf-8"))
        dim = int(doc["dim"])
        entries = {}
        for node_id, values in doc["entries"].items():
            emb = Embedding(np.asarray(values, dtype=float))
            if emb.dim != dim:
                raise ValidationError(f"entry {node_id!r} has dim {emb.dim}, header says {dim}")
            entries[node_id] = emb
        return EmbeddingDatabase(entries)
    version, dim, count = struct.unpack_from("<III", data, 4)
    if version != _EMBED_VERSION:
        raise ValidationError(f"unsupported embedding file version {version}")
    offset = 16
    entries = {}
    for _ in range(count):
        (id_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        node_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        vector = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).astype(float)
        offset += 4 * dim
        entries[node_id] = Embedding(vector)
    if len(entries) != count:
        raise ValidationError("duplicate ids in embedding file")
    return EmbeddingDatabase(entries)
