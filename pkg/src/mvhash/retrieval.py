"""Bit-packed Hamming index over {-1,+1} codes with mAP evaluation.

Codes pack 64 bits per machine word (bit j of a row is set iff code bit
j is +1; padding bits above ``k`` stay zero), distance is popcount of
xor, and ranking is a linear scan: bank sizes here stay small enough
that brute force beats any sublinear structure. A retrieved item is
relevant to a query iff they share at least one positive label.

On disk a bank is an MVHF v2 container: magic ``MVHF``, u32 version=2,
u8 dtype code 4 (u64 words), u64 rows, u64 cols (words per code), u64
``k``, u64 label columns; then the packed words and the u8 label matrix,
both row-major little-endian.
"""

from __future__ import annotations

import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MVHF_MAGIC
from .errors import ConfigError, FormatError, ShapeError, ValidationError

WORD_BITS = 64
BANK_VERSION = 2
_BANK_HEADER = struct.Struct("<4sIBQQQQ")
_BANK_DTYPE_CODE = 4

if hasattr(np, "bitwise_count"):
    def _popcount(words: np.ndarray) -> np.ndarray:
        return np.bitwise_count(words)
else:  # numpy < 2.0
    _POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def _popcount(words: np.ndarray) -> np.ndarray:
        as_bytes = words[..., None].view(np.uint8)
        return _POP8[as_bytes].sum(axis=-1, dtype=np.uint64).reshape(words.shape)


def words_per_code(k: int) -> int:
    return (k + WORD_BITS - 1) // WORD_BITS


def pack(codes: np.ndarray) -> np.ndarray:
    """Pack an Sxk {-1,+1} matrix into Sx(ceil(k/64)) uint64 words."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValidationError(f"codes must be a matrix, got shape {codes.shape}")
    if not np.isin(codes, (-1, 1)).all():
        raise ValidationError("codes must contain only -1/+1 entries")
    s, k = codes.shape
    words = np.zeros((s, words_per_code(k)), dtype=np.uint64)
    bits = (codes > 0).astype(np.uint64)
    for j in range(k):
        words[:, j // WORD_BITS] |= bits[:, j] << np.uint64(j % WORD_BITS)
    return words


def unpack(words: np.ndarray, k: int) -> np.ndarray:
    """Inverse of :func:`pack`; returns float64 {-1,+1}."""
    s = words.shape[0]
    codes = np.empty((s, k))
    one = np.uint64(1)
    for j in range(k):
        bit = (words[:, j // WORD_BITS] >> np.uint64(j % WORD_BITS)) & one
        codes[:, j] = 2.0 * bit.astype(np.float64) - 1.0
    return codes


def _padding_mask(k: int) -> np.ndarray:
    """Per-word mask with only the k valid bits set."""
    w = words_per_code(k)
    mask = np.full(w, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    tail = k % WORD_BITS
    if tail:
        mask[-1] = (np.uint64(1) << np.uint64(tail)) - np.uint64(1)
    return mask


@dataclass
class CodeBank:
    """Packed codes with aligned label rows: the retrieval index payload."""

    words: np.ndarray
    k: int
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.words.ndim != 2 or self.words.dtype != np.uint64:
            raise ValidationError("bank words must be a 2-D uint64 matrix")
        if self.words.shape[1] != words_per_code(self.k):
            raise ValidationError(
                f"bank has {self.words.shape[1]} words per code, "
                f"k={self.k} needs {words_per_code(self.k)}")
        if self.labels.shape[0] != self.words.shape[0]:
            raise ValidationError(
                f"bank labels have {self.labels.shape[0]} rows, codes {self.words.shape[0]}")
        pad = ~_padding_mask(self.k)
        if np.any(self.words & pad):
            raise ValidationError("bank has nonzero padding bits beyond k")

    @property
    def n(self) -> int:
        return self.words.shape[0]

    @classmethod
    def from_codes(cls, codes: np.ndarray, labels: np.ndarray) -> "CodeBank":
        return cls(pack(codes), codes.shape[1], np.asarray(labels, dtype=np.uint8))


def hamming(a: np.ndarray, b: np.ndarray, k: int) -> int:
    """Bit positions among the k valid ones where two packed codes differ."""
    if a.shape != b.shape:
        raise ShapeError(f"packed rows differ in length: {a.shape} vs {b.shape}")
    return int(_popcount(np.bitwise_xor(a, b) & _padding_mask(k)).sum())


def distances(query_words: np.ndarray, bank_words: np.ndarray) -> np.ndarray:
    """Hamming distance from one packed query row to every bank row."""
    x = np.bitwise_xor(bank_words, query_words[None, :])
    return _popcount(x).sum(axis=1).astype(np.int64)


def rank(query_words: np.ndarray, bank: CodeBank) -> np.ndarray:
    """Bank indices by ascending distance, ties broken by ascending index."""
    if query_words.shape[0] != bank.words.shape[1]:
        raise ShapeError(
            f"query has {query_words.shape[0]} words, bank codes have {bank.words.shape[1]}")
    return np.argsort(distances(query_words, bank.words), kind="stable")


def _ap_from_relevance(rel_sorted: np.ndarray, total_relevant: int,
                       cutoff: int | None) -> float:
    top = rel_sorted if cutoff is None else rel_sorted[:cutoff]
    denom = total_relevant if cutoff is None else min(total_relevant, cutoff)
    if denom == 0:
        return 0.0
    ranks = np.arange(1, top.size + 1)
    hits = np.cumsum(top)
    return float((hits[top] / ranks[top]).sum() / denom)


def average_precision(ranking: np.ndarray, query_labels: np.ndarray,
                      bank_labels: np.ndarray, cutoff: int | None = None) -> float:
    """AP of one ranked list; relevant = shares >= 1 positive label.

    Precision contributions are summed at each relevant rank within the
    cutoff and normalized by min(total relevant anywhere, cutoff).
    Queries with no relevant item at all score 0.
    """
    if cutoff is not None and cutoff < 1:
        raise ConfigError(f"cutoff must be >= 1, got {cutoff}")
    rel = (bank_labels.astype(np.int64) @ query_labels.astype(np.int64)) > 0
    return _ap_from_relevance(rel[ranking], int(rel.sum()), cutoff)


@dataclass
class EvalReport:
    map: float
    cutoff: int | None
    per_query_ap: list[float] = field(repr=False)
    precision_at: list[tuple[int, float]]
    n_queries: int
    n_retrieval: int
    k: int
    n_zero_relevant: int = 0
    threads: int = 1
    seconds: float | None = None

    def to_dict(self, include_timing: bool = True) -> dict:
        return {
            "map": self.map,
            "cutoff": self.cutoff if self.cutoff is not None else "all",
            "per_query_ap": list(self.per_query_ap),
            "precision_at": [[int(r), p] for r, p in self.precision_at],
            "n_queries": self.n_queries,
            "n_retrieval": self.n_retrieval,
            "k": self.k,
            "n_zero_relevant": self.n_zero_relevant,
            "threads": self.threads,
            "seconds": self.seconds if include_timing else None,
        }

    def precision_csv(self) -> str:
        lines = ["R,precision"]
        lines += [f"{r},{p!r}" for r, p in self.precision_at]
        return "\n".join(lines) + "\n"


def _resolve_threads(requested: int | None) -> int:
    n = requested if requested else min(4, os.cpu_count() or 1)
    cap = os.environ.get("MVHASH_THREADS")
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ConfigError(f"MVHASH_THREADS is not an integer: {cap!r}")
    return max(1, n)


def default_precision_ranks(n: int) -> list[int]:
    return sorted({r for r in (1, 10, 100, min(1000, n)) if 1 <= r <= n})


def evaluate(queries: CodeBank, bank: CodeBank, cutoff: int | None = None,
             threads: int | None = None) -> EvalReport:
    """mAP plus a precision@R curve for every query against the bank.

    Queries are sharded across worker threads (capped by the
    MVHASH_THREADS environment variable) and merged in query order, so
    the report is identical at any thread count.
    """
    if queries.n == 0:
        raise ValidationError("empty query set")
    if queries.k != bank.k:
        raise ShapeError(f"query codes have k={queries.k}, bank has k={bank.k}")
    if queries.labels.shape[1] != bank.labels.shape[1]:
        raise ShapeError(
            f"query labels have {queries.labels.shape[1]} classes, "
            f"bank has {bank.labels.shape[1]}")
    if cutoff is not None and cutoff < 1:
        raise ConfigError(f"cutoff must be >= 1, got {cutoff}")

    started = time.perf_counter()
    ranks_at = default_precision_ranks(bank.n)
    bank_lab = bank.labels.astype(np.int64)
    query_lab = queries.labels.astype(np.int64)

    def shard(idx: np.ndarray):
        aps = np.empty(idx.size)
        zero = 0
        prec = np.zeros(len(ranks_at))
        for j, qi in enumerate(idx):
            order = rank(queries.words[qi], bank)
            rel = (bank_lab @ query_lab[qi]) > 0
            total = int(rel.sum())
            rel_sorted = rel[order]
            aps[j] = _ap_from_relevance(rel_sorted, total, cutoff)
            zero += total == 0
            for t, r in enumerate(ranks_at):
                prec[t] += rel_sorted[:r].mean()
        return aps, zero, prec

    n_threads = _resolve_threads(threads)
    shards = [s for s in np.array_split(np.arange(queries.n), n_threads) if s.size]
    if len(shards) > 1:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            results = list(pool.map(shard, shards))
    else:
        results = [shard(shards[0])]

    per_query = np.concatenate([r[0] for r in results])
    zero_total = sum(r[1] for r in results)
    prec_sums = np.sum([r[2] for r in results], axis=0)
    precision_at = [(r, float(p / queries.n)) for r, p in zip(ranks_at, prec_sums)]
    return EvalReport(
        map=float(per_query.mean()),
        cutoff=cutoff,
        per_query_ap=[float(a) for a in per_query],
        precision_at=precision_at,
        n_queries=queries.n,
        n_retrieval=bank.n,
        k=queries.k,
        n_zero_relevant=int(zero_total),
        threads=n_threads,
        seconds=time.perf_counter() - started,
    )


# ---------------------------------------------------------------------------
# bank files
# ---------------------------------------------------------------------------

def save_bank(bank: CodeBank, path: str | Path) -> None:
    header = _BANK_HEADER.pack(MVHF_MAGIC, BANK_VERSION, _BANK_DTYPE_CODE,
                               bank.n, bank.words.shape[1], bank.k,
                               bank.labels.shape[1])
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(bank.words, dtype="<u8").tobytes())
        f.write(np.ascontiguousarray(bank.labels, dtype="u1").tobytes())


def load_bank(path: str | Path) -> CodeBank:
    raw = Path(path).read_bytes()
    if len(raw) < _BANK_HEADER.size:
        raise FormatError(f"{path}: truncated bank header")
    magic, version, code, n, w, k, c = _BANK_HEADER.unpack_from(raw)
    if magic != MVHF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported bank version {version}")
    if code != _BANK_DTYPE_CODE:
        raise FormatError(f"{path}: unexpected dtype code {code}")
    words_bytes = n * w * 8
    label_bytes = n * c
    payload = raw[_BANK_HEADER.size:]
    if len(payload) != words_bytes + label_bytes:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header implies "
            f"{words_bytes + label_bytes}")
    words = np.frombuffer(payload, dtype="<u8", count=n * w).reshape(n, w).copy()
    labels = np.frombuffer(payload, dtype="u1", offset=words_bytes,
                           count=n * c).reshape(n, c).copy()
    return CodeBank(words.astype(np.uint64, copy=False), int(k), labels)
