"""
Exact substring deduplication over token sequences
Suffix array by prefix doubling, LCP by Kasai, and removal of repeated spans
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from sequence_packing import Document

logger = logging.getLogger(__name__)

DEFAULT_MIN_LEN = 50


def build_suffix_array(seq: np.ndarray) -> np.ndarray:
    """Start positions of all suffixes in sorted order (O(n log^2 n) prefix doubling)"""
    seq = np.asarray(seq)
    n = seq.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rank = np.unique(seq, return_inverse=True)[1].astype(np.int64).reshape(-1)
    sa = np.argsort(rank, kind="stable")
    k = 1
    while k < n:
        second = np.full(n, -1, dtype=np.int64)
        second[:n - k] = rank[k:]
        sa = np.lexsort((second, rank))
        r1, r2 = rank[sa], second[sa]
        changed = (r1[1:] != r1[:-1]) | (r2[1:] != r2[:-1])
        new_rank = np.empty(n, dtype=np.int64)
        new_rank[sa] = np.concatenate(([0], np.cumsum(changed)))
        rank = new_rank
        if rank[sa[-1]] == n - 1:
            break
        k *= 2
    return sa.astype(np.int64)


def build_lcp(seq: np.ndarray, sa: np.ndarray) -> np.ndarray:
    """lcp[i] = longest common prefix of suffixes sa[i] and sa[i + 1]"""
    n = len(sa)
    lcp = np.zeros(max(n - 1, 0), dtype=np.int64)
    if n < 2:
        return lcp
    rank_of = np.empty(n, dtype=np.int64)
    rank_of[sa] = np.arange(n)
    s = np.asarray(seq).tolist()
    h = 0
    for i in range(n):
        r = rank_of[i]
        if r == n - 1:
            h = 0
            continue
        j = sa[r + 1]
        while i + h < n and j + h < n and s[i + h] == s[j + h]:
            h += 1
        lcp[r] = h
        if h > 0:
            h -= 1
    return lcp


def _concatenate(docs: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Join documents with unique negative separators; returns (sequence, document start offsets)"""
    parts, starts = [], []
    offset = 0
    for i, tokens in enumerate(docs):
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.size and tokens.min() < 0:
            raise ValueError(f"document {i} has negative token ids")
        starts.append(offset)
        parts.append(tokens)
        parts.append(np.array([-(i + 1)], dtype=np.int64))
        offset += tokens.size + 1
    if not parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(parts), np.asarray(starts, dtype=np.int64)


def duplicate_mask(seq: np.ndarray, min_len: int = DEFAULT_MIN_LEN) -> np.ndarray:
    """
    Mark every token inside a span of at least min_len tokens that also
    occurs at an earlier position; the earliest copy stays unmarked
    """
    if min_len < 1:
        raise ValueError(f"min_len must be >= 1, got {min_len}")
    n = len(seq)
    marked = np.zeros(n + 1, dtype=np.int64)
    if n < 2:
        return marked[:n].astype(bool)
    sa = build_suffix_array(seq)
    lcp = build_lcp(seq, sa)
    for idx in range(n):
        pos = sa[idx]
        best = 0
        # nearest neighbour on each side (in suffix order) starting earlier in the text
        for step in (-1, 1):
            j, run = idx, None
            while 0 <= j + step < n:
                pair = lcp[min(j, j + step)]
                run = pair if run is None else min(run, pair)
                if run < min_len:
                    break
                j += step
                if sa[j] < pos:
                    best = max(best, run)
                    break
        if best >= min_len:
            marked[pos] += 1
            marked[pos + best] -= 1
    return np.cumsum(marked)[:n] > 0


@dataclass
class DedupResult:
    documents: List[np.ndarray]
    removed_spans: List[List[Tuple[int, int]]]
    removed_tokens: int
    total_tokens: int

    @property
    def removal_rate(self) -> float:
        return self.removed_tokens / self.total_tokens if self.total_tokens else 0.0


def _spans(mask: np.ndarray) -> List[Tuple[int, int]]:
    if not mask.any():
        return []
    edges = np.diff(np.concatenate(([0], mask.astype(np.int8), [0])))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def deduplicate_exact_substrings(docs: Sequence[np.ndarray], min_len: int = DEFAULT_MIN_LEN) -> DedupResult:
    """
    Remove repeated token spans of length >= min_len across a small corpus

    The first occurrence (by corpus order) of each repeated span is kept;
    spans never cross document boundaries.
    """
    docs = [np.asarray(d, dtype=np.int64).reshape(-1) for d in docs]
    seq, starts = _concatenate(docs)
    mask = duplicate_mask(seq, min_len)
    out, spans = [], []
    removed = 0
    for tokens, start in zip(docs, starts):
        doc_mask = mask[start:start + tokens.size]
        out.append(tokens[~doc_mask])
        spans.append(_spans(doc_mask))
        removed += int(doc_mask.sum())
    total = int(sum(d.size for d in docs))
    logger.info("exact substring dedup: removed %d of %d tokens (min span %d)", removed, total, min_len)
    return DedupResult(out, spans, removed, total)


def deduplicate_documents(docs: Sequence[Document], min_len: int = DEFAULT_MIN_LEN) -> Tuple[List[Document], DedupResult]:
    """Document-level wrapper that keeps loss masks aligned with the surviving tokens"""
    result = deduplicate_exact_substrings([d.tokens for d in docs], min_len)
    kept = []
    for doc, spans in zip(docs, result.removed_spans):
        keep = np.ones(len(doc), dtype=bool)
        for start, end in spans:
            keep[start:end] = False
        kept.append(Document(doc.tokens[keep], doc.source, doc.doc_id, doc.loss_mask[keep]))
    return kept, result
