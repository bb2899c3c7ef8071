"""Database encoding, lookup-table (AQD) search, exact search and MAP / P@N.

Index file (``.pqx``), little-endian::

    magic   b"PQIX"
    u32     version (1)
    u32     M, K, d
    u64     N (items)
    u64     payload bits (= N * M * ceil(log2 K))
    f32     codebook, M*K*d, row-major, unit-norm codewords
    u8      packed codes, ceil(payload bits / 8) bytes (see pack_codes)
    i32     labels[N]
    N x     (u16 byte length, UTF-8 item id)
"""

from __future__ import annotations

import logging
import statistics
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import _kernels
from .numerics import ShapeError, l2_normalize
from .quantization import Codebook, code_bits, hard_encode, pack_codes, split_embedding, unpack_codes

log = logging.getLogger(__name__)

INDEX_MAGIC = b"PQIX"
INDEX_VERSION = 1


class IndexFileError(ValueError):
    """Malformed or empty index."""


@dataclass
class RetrievalIndex:
    codewords: np.ndarray          # (M, K, d), unit norm, frozen
    codes: np.ndarray              # (N, M) integer indices
    labels: np.ndarray             # (N,)
    ids: List[str]

    def __post_init__(self):
        self.codewords = np.array(self.codewords, dtype=np.float64)
        self.codewords.setflags(write=False)
        M, K, _ = self.codewords.shape
        code_dtype = np.uint8 if K <= 256 else np.uint16 if K <= 65536 else np.uint32
        codes = np.asarray(self.codes).reshape(-1, M)
        if codes.size and (codes.min() < 0 or codes.max() >= K):
            raise IndexFileError(f"code index outside [0, {K})")
        self.codes = codes.astype(code_dtype)
        self.codes.setflags(write=False)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.ids = list(self.ids)
        if not (len(self.labels) == len(self.ids) == len(self.codes)):
            raise ShapeError("codes, labels and ids must have one entry per item")
        self._pos = {item: i for i, item in enumerate(self.ids)}
        if len(self._pos) != len(self.ids):
            raise IndexFileError("item ids are not unique")

    @property
    def M(self) -> int:
        return self.codewords.shape[0]

    @property
    def K(self) -> int:
        return self.codewords.shape[1]

    @property
    def d(self) -> int:
        return self.codewords.shape[2]

    def __len__(self):
        return len(self.ids)

    def position(self, item_id) -> int:
        """Row of ``item_id`` in the index, or -1."""
        return self._pos.get(item_id, -1)

    @property
    def payload_bits(self) -> int:
        return len(self) * self.M * code_bits(self.K)


def encode_database(embeddings: np.ndarray, codebook: Codebook, labels: Sequence[int],
                    ids: Optional[Sequence[str]] = None, chunk: int = 4096) -> RetrievalIndex:
    """Hard-encode database embeddings (N, D) against a codebook snapshot.

    Use :func:`pyrquant.training.embed` to turn feature maps into embeddings.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64).reshape(-1, codebook.D)
    n = len(embeddings)
    if ids is None:
        ids = [str(i) for i in range(n)]
    codes = np.empty((n, codebook.M), dtype=np.int64)
    for s in range(0, n, chunk):
        codes[s:s + chunk] = hard_encode(embeddings[s:s + chunk], codebook)
    return RetrievalIndex(codebook.effective(), codes, labels, ids)


def query_subvectors(z: np.ndarray, M: int) -> np.ndarray:
    """Normalised query sub-vectors (..., M, d)."""
    return l2_normalize(split_embedding(z, M))


def build_lookup(query: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Table ``T[m, k] = <v_m, c_m^k>`` for one query or ``(Q, M, K)`` for a batch.

    ``query`` holds normalised sub-vectors, (M, d) or (Q, M, d).
    """
    query = np.asarray(query)
    if query.shape[-2:] != codewords.shape[::2]:
        raise ShapeError(f"query sub-vectors {query.shape} vs codewords {codewords.shape}")
    # per sub-codebook matmul: (M, Q, d) @ (M, d, K)
    q = query[None] if query.ndim == 2 else query
    cw = codewords.astype(q.dtype, copy=False)
    tab = np.matmul(q.transpose(1, 0, 2), cw.transpose(0, 2, 1)).transpose(1, 0, 2)
    return tab[0] if query.ndim == 2 else np.ascontiguousarray(tab)


def aqd_direct(query: np.ndarray, codewords: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Scores by summing ``<v_m, c_m^{i_m}>`` item by item, without a table."""
    M = codewords.shape[0]
    out = np.zeros(len(codes))
    for n, code in enumerate(np.asarray(codes)):
        s = 0.0
        for m in range(M):
            s += float(np.dot(query[m], codewords[m, code[m]]))
        out[n] = s
    return out


def _rank(scores: np.ndarray, top: int, exclude: np.ndarray) -> np.ndarray:
    return _kernels.top_n_rows(scores, top, exclude)


def _check_top(index_len: int, top: int, any_excluded: bool) -> int:
    if index_len == 0:
        raise IndexFileError("search on an empty index")
    limit = index_len - 1 if any_excluded else index_len
    if not 1 <= top <= index_len:
        raise ValueError(f"topN must lie in [1, {index_len}], got {top}")
    return min(top, max(limit, 1))


def aqd_scores(queries: np.ndarray, index: RetrievalIndex, dtype=np.float64,
               out: Optional[np.ndarray] = None) -> np.ndarray:
    """All AQD scores (Q, N) from raw query embeddings (Q, D).

    ``out`` may be a preallocated (Q, N) buffer of ``dtype`` to fill.
    """
    tables = build_lookup(query_subvectors(np.atleast_2d(queries), index.M).astype(dtype),
                          index.codewords)
    if out is None:
        out = np.empty((len(tables), len(index)), dtype=dtype)
    _kernels.lookup_scores(tables.astype(dtype, copy=False), index.codes, out)
    return out


def aqd_search_batch(queries: np.ndarray, index: RetrievalIndex, top: int,
                     query_ids: Optional[Sequence] = None, dtype=np.float64,
                     chunk: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Top-``top`` database rows and scores for each query (Q, D).

    A query whose id is present in the index is excluded from its own
    ranking. Returns ``(rows (Q, n), scores (Q, n))``.
    """
    queries = np.atleast_2d(queries)
    exclude = _exclusions(index, query_ids, len(queries))
    top = _check_top(len(index), top, bool((exclude >= 0).any()))
    rows = np.empty((len(queries), top), dtype=np.int64)
    scores = np.empty((len(queries), top), dtype=dtype)
    # one score buffer reused across chunks keeps page faults out of the scan
    buf = np.empty((min(chunk, len(queries)), len(index)), dtype=dtype)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        sc = aqd_scores(q, index, dtype, out=buf[:len(q)])
        r = _rank(sc, top, exclude[s:s + chunk])
        rows[s:s + chunk] = r
        scores[s:s + chunk] = np.take_along_axis(sc, r, axis=1)
    return rows, scores


def aqd_search(query: np.ndarray, index: RetrievalIndex, top: int,
               query_id=None) -> List[Tuple[str, float]]:
    """Ranked ``(item id, score)`` pairs for one query embedding (D,)."""
    rows, scores = aqd_search_batch(query[None], index, top,
                                    None if query_id is None else [query_id])
    return [(index.ids[r], float(s)) for r, s in zip(rows[0], scores[0])]


def _exclusions(index: RetrievalIndex, query_ids, n: int) -> np.ndarray:
    if query_ids is None:
        return np.full(n, -1, dtype=np.int64)
    return np.array([index.position(q) for q in query_ids], dtype=np.int64)


def exact_search_batch(queries: np.ndarray, database: np.ndarray, top: int,
                       exclude: Optional[np.ndarray] = None,
                       chunk: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Rank database rows by full inner product with each query."""
    queries = np.atleast_2d(queries)
    database = np.asarray(database)
    if queries.dtype != database.dtype:
        queries = queries.astype(database.dtype)
    if exclude is None:
        exclude = np.full(len(queries), -1, dtype=np.int64)
    top = _check_top(len(database), top, bool((exclude >= 0).any()))
    rows = np.empty((len(queries), top), dtype=np.int64)
    scores = np.empty((len(queries), top), dtype=database.dtype)
    buf = np.empty((min(chunk, len(queries)), len(database)), dtype=database.dtype)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        sc = np.matmul(q, database.T, out=buf[:len(q)])
        r = _rank(sc, top, exclude[s:s + chunk])
        rows[s:s + chunk] = r
        scores[s:s + chunk] = np.take_along_axis(sc, r, axis=1)
    return rows, scores


def exact_search(query: np.ndarray, database: np.ndarray, top: int,
                 ids: Optional[Sequence[str]] = None) -> List[Tuple[str, float]]:
    rows, scores = exact_search_batch(np.asarray(query)[None], database, top)
    ids = ids if ids is not None else [str(i) for i in range(len(database))]
    return [(ids[r], float(s)) for r, s in zip(rows[0], scores[0])]


def average_precision(relevant_flags: Sequence[bool], n_relevant: int) -> float:
    hits = 0
    total = 0.0
    for rank, rel in enumerate(relevant_flags, start=1):
        if rel:
            hits += 1
            total += hits / rank
    return total / n_relevant


def map_eval(rankings: Sequence[Sequence[int]], query_labels: Sequence[int],
             db_labels: Sequence[int], n_relevant: Optional[Sequence[int]] = None) -> float:
    """Mean average precision over queries.

    ``rankings[q]`` lists database rows, best first. ``n_relevant[q]``
    defaults to the number of database items sharing the query's label;
    queries with no relevant item are skipped with a warning.
    """
    db_labels = np.asarray(db_labels)
    query_labels = np.asarray(query_labels)
    if n_relevant is None:
        n_relevant = [int(np.sum(db_labels == y)) for y in query_labels]
    aps = []
    skipped = 0
    for ranking, y, n_rel in zip(rankings, query_labels, n_relevant):
        if n_rel <= 0:
            skipped += 1
            continue
        flags = (db_labels[np.asarray(ranking, dtype=np.int64)] == y).astype(np.float64)
        hits = np.cumsum(flags)
        ranks = np.arange(1, len(flags) + 1)
        # accumulate in rank order so the sum is reproducible term by term
        contrib = np.cumsum(flags * hits / ranks)
        aps.append(float(contrib[-1] if len(contrib) else 0.0) / n_rel)
    if skipped:
        log.warning("%d queries without relevant database items were skipped", skipped)
    if not aps:
        raise ValueError("no query has a relevant database item")
    return float(np.mean(aps))


def p_at_n(rankings: Sequence[Sequence[int]], query_labels: Sequence[int],
           db_labels: Sequence[int], ns: Sequence[int]) -> Dict[int, float]:
    """Mean precision among the top ``n`` returned items, for each ``n`` in ``ns``."""
    db_labels = np.asarray(db_labels)
    query_labels = np.asarray(query_labels)
    out = {}
    for n in ns:
        if not 1 <= n <= len(db_labels):
            raise ValueError(f"N={n} outside [1, {len(db_labels)}]")
        precs = []
        for ranking, y in zip(rankings, query_labels):
            if len(ranking) < n:
                raise ValueError(f"ranking of length {len(ranking)} is shorter than N={n}")
            top = np.asarray(ranking[:n], dtype=np.int64)
            precs.append(float(np.sum(db_labels[top] == y)) / n)
        out[int(n)] = float(np.mean(precs))
    return out


def relevant_counts(index_labels: np.ndarray, query_labels: Sequence[int],
                    exclude: np.ndarray) -> List[int]:
    """Relevant database items per query, not counting an excluded self-match."""
    counts = []
    for y, ex in zip(query_labels, exclude):
        c = int(np.sum(index_labels == y))
        if ex >= 0 and index_labels[ex] == y:
            c -= 1
        counts.append(c)
    return counts


def evaluate_rankings(rows: np.ndarray, query_labels, index_labels, exclude,
                      ns: Sequence[int] = ()) -> dict:
    counts = relevant_counts(np.asarray(index_labels), query_labels, exclude)
    report = {"map": map_eval(rows, query_labels, index_labels, counts)}
    ns = [n for n in ns if n <= rows.shape[1]]
    if ns:
        report["p_at_n"] = p_at_n(rows, query_labels, index_labels, ns)
    return report


def save_index(path: Union[str, Path], index: RetrievalIndex) -> None:
    M, K, d = index.codewords.shape
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IIII", INDEX_VERSION, M, K, d))
        fh.write(struct.pack("<QQ", len(index), index.payload_bits))
        fh.write(index.codewords.astype("<f4").tobytes())
        fh.write(pack_codes(index.codes, K))
        fh.write(index.labels.astype("<i4").tobytes())
        for item in index.ids:
            raw = str(item).encode()
            fh.write(struct.pack("<H", len(raw)) + raw)


def index_layout(M: int, K: int, d: int, n: int) -> Dict[str, int]:
    """Byte size of each fixed-width section of an index file."""
    bits = n * M * code_bits(K)
    return {"header": 4 + 16 + 16, "codebook": 4 * M * K * d,
            "codes": (bits + 7) // 8, "labels": 4 * n}


def load_index(path: Union[str, Path]) -> RetrievalIndex:
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise IndexFileError(f"{path}: bad magic")
    version, M, K, d = struct.unpack_from("<IIII", data, 4)
    if version != INDEX_VERSION:
        raise IndexFileError(f"{path}: unsupported index version {version}")
    n, bits = struct.unpack_from("<QQ", data, 20)
    lay = index_layout(M, K, d, n)
    if bits != n * M * code_bits(K):
        raise IndexFileError(f"{path}: payload bit count {bits} inconsistent with header")
    fixed = sum(lay.values())
    if len(data) < fixed:
        raise IndexFileError(f"{path}: truncated index")
    off = lay["header"]
    cw = np.frombuffer(data, dtype="<f4", count=M * K * d, offset=off).reshape(M, K, d)
    off += lay["codebook"]
    codes = unpack_codes(data[off:off + lay["codes"]], n, M, K)
    off += lay["codes"]
    labels = np.frombuffer(data, dtype="<i4", count=n, offset=off)
    off += lay["labels"]
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        ids.append(data[off + 2:off + 2 + ln].decode())
        off += 2 + ln
    if off != len(data):
        raise IndexFileError(f"{path}: {len(data) - off} trailing bytes")
    return RetrievalIndex(cw.astype(np.float64), codes, labels.astype(np.int64), ids)


def write_results(path: Union[str, Path], query_ids: Sequence[str], rows: np.ndarray,
                  scores: np.ndarray, item_ids: Sequence[str]) -> None:
    """Tab-separated ``query_id, rank, item_id, score`` with 1-based ranks."""
    with open(path, "w") as fh:
        fh.write("query_id\trank\titem_id\tscore\n")
        for q, r_row, s_row in zip(query_ids, rows, scores):
            for rank, (r, s) in enumerate(zip(r_row, s_row), start=1):
                fh.write(f"{q}\t{rank}\t{item_ids[r]}\t{float(s):.9g}\n")


def speed_benchmark(index: RetrievalIndex, database: np.ndarray, queries: np.ndarray,
                    repetitions: int, top: int = 100, query_labels=None,
                    dtype=np.float32) -> dict:
    """Median wall time per 1000 queries for AQD vs exact inner-product search.

    Both engines share the same top-N selection routine and run in
    ``dtype``; one untimed warm-up pass precedes the timed repetitions.
    """
    if repetitions <= 0:
        return {}
    queries = np.ascontiguousarray(queries, dtype=dtype)
    database = np.ascontiguousarray(database, dtype=dtype)
    aqd_search_batch(queries[:2], index, top, dtype=dtype)
    exact_search_batch(queries[:2], database, top)
    per_k = 1000.0 / len(queries)
    times = {"aqd": [], "exact": []}
    for _ in range(repetitions):
        t0 = time.perf_counter()
        aqd_rows, _ = aqd_search_batch(queries, index, top, dtype=dtype)
        times["aqd"].append((time.perf_counter() - t0) * per_k)
        t0 = time.perf_counter()
        exact_rows, _ = exact_search_batch(queries, database, top)
        times["exact"].append((time.perf_counter() - t0) * per_k)
    report = {
        "queries": len(queries), "items": len(index), "repetitions": repetitions,
        "aqd_seconds_per_1k": statistics.median(times["aqd"]),
        "exact_seconds_per_1k": statistics.median(times["exact"]),
    }
    report["speedup"] = report["exact_seconds_per_1k"] / report["aqd_seconds_per_1k"]
    if query_labels is not None:
        report["aqd_map"] = map_eval(aqd_rows, query_labels, index.labels)
        report["exact_map"] = map_eval(exact_rows, query_labels, index.labels)
    return report
