"""Exact cosine-similarity index over memory entries."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Collection, Sequence

import numpy as np

from .errors import DimensionMismatch
from .memory import MemoryEntry

EmbedFn = Callable[[Sequence[str]], "np.ndarray | Sequence[Sequence[float]]"]


@dataclass(frozen=True)
class RetrievalResult:
    query_text: str
    ranked: tuple[tuple[int, str, float], ...]  # (entry_id, mem_type, score)

    @property
    def ids(self) -> list[int]:
        return [r[0] for r in self.ranked]

    def type_counts(self) -> dict[str, int]:
        counts = {"episodic": 0, "semantic": 0, "procedural": 0}
        for _, mem_type, _ in self.ranked:
            counts[mem_type] = counts.get(mem_type, 0) + 1
        return counts


def _normalize(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D batch of vectors, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return arr / norms


class VectorStore:
    """Brute-force top-k store.

    Writers swap in fully built arrays under a lock, so a reader sees
    either the whole of an upserted batch or none of it.
    """

    def __init__(self, dim: int | None = None):
        self._lock = threading.Lock()
        self._dim = dim
        self._ids = np.zeros(0, dtype=np.int64)
        self._types: tuple[str, ...] = ()
        self._matrix = np.zeros((0, dim or 0))

    @property
    def dim(self) -> int | None:
        return self._dim

    def size(self) -> int:
        return len(self._ids)

    __len__ = size

    def copy(self) -> "VectorStore":
        other = VectorStore(self._dim)
        other._ids, other._types, other._matrix = self._snapshot()
        return other

    def _snapshot(self):
        with self._lock:
            return self._ids, self._types, self._matrix

    def upsert(self, entries: Sequence[MemoryEntry], embed_fn: EmbedFn) -> "VectorStore":
        if not entries:
            return self
        vectors = _normalize(embed_fn([e.content for e in entries]))
        if len(vectors) != len(entries):
            raise DimensionMismatch(f"embedder returned {len(vectors)} vectors for {len(entries)} texts")
        self.upsert_vectors([(e.id, e.mem_type) for e in entries], vectors)
        return self

    def upsert_vectors(self, keys: Sequence[tuple[int, str]], vectors) -> None:
        vectors = _normalize(vectors)
        with self._lock:
            dim = self._dim if self._dim is not None else vectors.shape[1]
            if vectors.shape[1] != dim:
                raise DimensionMismatch(f"vector dimension {vectors.shape[1]} != store dimension {dim}")
            index = {int(i): n for n, i in enumerate(self._ids)}
            ids = list(self._ids)
            types = list(self._types)
            rows = list(self._matrix) if len(self._matrix) else []
            for (entry_id, mem_type), vec in zip(keys, vectors):
                pos = index.get(int(entry_id))
                if pos is None:
                    index[int(entry_id)] = len(ids)
                    ids.append(int(entry_id))
                    types.append(mem_type)
                    rows.append(vec)
                else:
                    types[pos] = mem_type
                    rows[pos] = vec
            self._dim = dim
            self._ids = np.asarray(ids, dtype=np.int64)
            self._types = tuple(types)
            self._matrix = np.vstack(rows) if rows else np.zeros((0, dim))

    def vector(self, entry_id: int) -> np.ndarray:
        ids, _, matrix = self._snapshot()
        (pos,) = np.nonzero(ids == entry_id)
        if not len(pos):
            raise KeyError(entry_id)
        return matrix[pos[0]].copy()

    def top_k(
        self,
        query: str,
        k: int,
        embed_fn: EmbedFn,
        type_filter: Collection[str] | None = None,
    ) -> RetrievalResult:
        if k <= 0:
            raise ValueError("k must be positive")
        ids, types, matrix = self._snapshot()
        if not len(ids):
            return RetrievalResult(query, ())
        qvec = _normalize(embed_fn([query]))[0]
        return RetrievalResult(query, self._rank(qvec, k, type_filter, ids, types, matrix))

    def top_k_vector(self, qvec, k: int, type_filter: Collection[str] | None = None) -> RetrievalResult:
        ids, types, matrix = self._snapshot()
        if not len(ids):
            return RetrievalResult("", ())
        return RetrievalResult("", self._rank(_normalize([qvec])[0], k, type_filter, ids, types, matrix))

    def _rank(self, qvec, k, type_filter, ids, types, matrix):
        if qvec.shape[0] != matrix.shape[1]:
            raise DimensionMismatch(f"query dimension {qvec.shape[0]} != store dimension {matrix.shape[1]}")
        mask = np.ones(len(ids), dtype=bool)
        if type_filter is not None:
            allowed = set(type_filter)
            mask = np.array([t in allowed for t in types], dtype=bool)
        (candidates,) = np.nonzero(mask)
        scores = np.clip(matrix[candidates] @ qvec, -1.0, 1.0)
        # lexsort: last key is primary -> descending score, then ascending id
        order = np.lexsort((ids[candidates], -scores))[:k]
        return tuple(
            (int(ids[candidates[i]]), types[candidates[i]], float(scores[i])) for i in order
        )

    def save(self, path: str | Path) -> None:
        ids, types, matrix = self._snapshot()
        with open(path, "w", encoding="utf-8") as fh:
            for i, t, v in zip(ids, types, matrix):
                fh.write(json.dumps({"entry_id": int(i), "mem_type": t, "vector": [float(x) for x in v]}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "VectorStore":
        keys, vectors = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                keys.append((int(rec["entry_id"]), rec["mem_type"]))
                vectors.append(rec["vector"])
        dims = {len(v) for v in vectors}
        if len(dims) > 1:
            raise DimensionMismatch(f"mixed vector dimensions in {path}: {sorted(dims)}")
        store = cls(dims.pop() if dims else None)
        if keys:
            store.upsert_vectors(keys, vectors)
        return store
