"""Design matrices from embedding files, random Gaussian rows, or word identity.

Random rows come from a counter-based generator (numpy's Philox): the row for
index ``k`` under ``seed`` is drawn from a stream keyed by ``seed`` whose
counter starts at block ``k``, so it never depends on how many rows are drawn.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .dataset import ProbingDataset, ProbingExample

log = logging.getLogger(__name__)

KINDS = ("file", "random", "word_identity")
POOLINGS = ("mean", "first")
MISSING_POLICIES = ("word_identity", "zeros", "error")
DEFAULT_DIM = 768

_MASK64 = (1 << 64) - 1
# Separates the random and word-identity key spaces.
_RANDOM_TAG = 0x52414E444F4D5F31
_WORD_TAG = 0x574F52445F494431


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class RepresentationSpec:
    kind: str
    dim: int = DEFAULT_DIM
    seed: int | None = 0
    source_path: str | None = None
    pooling: str = "mean"
    missing: str = "word_identity"
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown representation kind {self.kind!r}")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.kind == "file" and not self.source_path:
            raise ValueError("file representations need source_path")
        if self.kind != "file" and self.seed is None:
            raise ValueError(f"{self.kind} representations need a seed")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.missing not in MISSING_POLICIES:
            raise ValueError(f"unknown missing-token policy {self.missing!r}")
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RepresentationSpec":
        return cls(**d)


@dataclass(frozen=True)
class DesignMatrix:
    rows: np.ndarray
    row_ids: tuple[str, ...]
    rep_fingerprint: str

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != len(self.row_ids):
            raise ValueError("rows and row_ids are not aligned")
        if not np.all(np.isfinite(rows)):
            raise ValueError("design matrix has non-finite entries")
        object.__setattr__(self, "rows", rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def select(self, ids: Sequence[str]) -> np.ndarray:
        pos = {i: k for k, i in enumerate(self.row_ids)}
        return self.rows[[pos[i] for i in ids]] if ids else np.zeros((0, self.dim))


@dataclass
class EmbeddingTable:
    vectors: dict[str, np.ndarray]
    dim: int
    duplicates: int = 0

    def __len__(self) -> int:
        return len(self.vectors)


def stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def _stream(key_hi: int, key_lo: int, counter: int = 0) -> np.random.Generator:
    bitgen = np.random.Philox(key=np.array([key_lo & _MASK64, key_hi & _MASK64], dtype=np.uint64),
                              counter=np.array([0, 0, counter & _MASK64, 0], dtype=np.uint64))
    return np.random.Generator(bitgen)


def random_row(seed: int, index: int, dim: int) -> np.ndarray:
    return _stream(seed, _RANDOM_TAG, index).standard_normal(dim)


def random_rows(seed: int, n: int, dim: int) -> np.ndarray:
    """``n`` i.i.d. standard normal rows; row ``k`` depends only on ``(seed, k)``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    out = np.empty((n, dim))
    for k in range(n):
        out[k] = random_row(seed, k, dim)
    return out


def word_identity_row(seed: int, token: str, dim: int) -> np.ndarray:
    if not token:
        raise ValueError("token must be non-empty")
    return _stream(seed ^ _WORD_TAG, stable_hash64(token)).standard_normal(dim)


def load_embedding_file(path) -> EmbeddingTable:
    """Read the word-vector text format: header ``N D``, then ``token v1 ... vD`` rows."""
    vectors: dict[str, np.ndarray] = {}
    duplicates = 0
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise EmbeddingError(f"{path}: header must be 'N D'")
        try:
            n_rows, dim = int(header[0]), int(header[1])
        except ValueError:
            raise EmbeddingError(f"{path}: header must hold two integers") from None
        if dim <= 0 or n_rows < 0:
            raise EmbeddingError(f"{path}: invalid header {header}")
        count = 0
        for rowno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if parts == [""]:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise EmbeddingError(
                    f"{path}: row {rowno} has {len(values)} values, expected {dim}")
            try:
                vec = np.array([float(v) for v in values])
            except ValueError:
                raise EmbeddingError(f"{path}: row {rowno} has a non-numeric value") from None
            if not np.all(np.isfinite(vec)):
                raise EmbeddingError(f"{path}: row {rowno} has non-finite values")
            if token in vectors:
                duplicates += 1
            vectors[token] = vec
            count += 1
    if count != n_rows:
        raise EmbeddingError(f"{path}: header announces {n_rows} rows, found {count}")
    if duplicates:
        log.warning("%s: %d duplicate tokens, kept the last occurrence", path, duplicates)
    return EmbeddingTable(vectors, dim, duplicates)


def save_embedding_file(path, vectors: dict[str, np.ndarray]) -> None:
    dims = {len(v) for v in vectors.values()}
    if len(dims) > 1:
        raise EmbeddingError("vectors have different dimensions")
    dim = dims.pop() if dims else 0
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{len(vectors)} {dim}\n")
        for tok, vec in vectors.items():
            f.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def _token_rows(spec: RepresentationSpec, ex: ProbingExample,
                table: EmbeddingTable | None) -> list[np.ndarray]:
    tokens = ex.tokens[:1] if spec.pooling == "first" else ex.tokens
    if spec.kind == "word_identity":
        return [word_identity_row(spec.seed, t, spec.dim) for t in tokens]
    rows = []
    for t in tokens:
        vec = table.vectors.get(t)
        if vec is None:
            if spec.missing == "error":
                raise EmbeddingError(f"token {t!r} (example {ex.id!r}) not in embedding table")
            if spec.missing == "zeros":
                vec = np.zeros(spec.dim)
            else:
                vec = word_identity_row(spec.seed or 0, t, spec.dim)
        rows.append(vec)
    return rows


def embed_dataset(spec: RepresentationSpec, ds: ProbingDataset,
                  table: EmbeddingTable | None = None) -> DesignMatrix:
    """One row per example, in dataset order.

    ``random`` rows are keyed by the example id, so two examples with the same
    text still get independent vectors.
    """
    if spec.kind == "file":
        if table is None:
            table = load_embedding_file(spec.source_path)
        if table.dim != spec.dim:
            raise EmbeddingError(
                f"embedding file has dimension {table.dim}, representation expects {spec.dim}")
    rows = np.empty((len(ds.examples), spec.dim))
    for k, ex in enumerate(ds.examples):
        if spec.kind == "random":
            rows[k] = random_row(spec.seed, stable_hash64(ex.id), spec.dim)
        else:
            rows[k] = pool_mean(_token_rows(spec, ex, table))
    return DesignMatrix(rows, tuple(e.id for e in ds.examples), spec.fingerprint())


def pool_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinate-wise mean; copies of a single vector pool to that vector exactly."""
    V = np.asarray(vectors, dtype=np.float64)
    if np.all(V == V[0]):
        return V[0].copy()
    return V.mean(axis=0)


def moment_check(rows: np.ndarray) -> tuple[float, float]:
    """Largest |mean| and |var - 1| over coordinates."""
    return float(np.max(np.abs(rows.mean(axis=0)))), float(np.max(np.abs(rows.var(axis=0) - 1.0)))


__all__ = ["RepresentationSpec", "DesignMatrix", "EmbeddingTable", "embed_dataset",
           "random_rows", "random_row", "word_identity_row", "load_embedding_file",
           "save_embedding_file", "stable_hash64"]
