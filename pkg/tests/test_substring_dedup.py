"""
Tests for suffix-array exact substring deduplication
"""

import numpy as np
import pytest

from sequence_packing import Document
from substring_dedup import (
    build_lcp, build_suffix_array, deduplicate_documents, deduplicate_exact_substrings, duplicate_mask,
)


@pytest.mark.parametrize("alphabet", [2, 5, 50])
def test_suffix_array_matches_brute_force(rng, alphabet):
    for n in (1, 2, 7, 40, 131):
        seq = rng.integers(0, alphabet, size=n)
        expected = sorted(range(n), key=lambda i: seq[i:].tolist())
        assert build_suffix_array(seq).tolist() == expected


def test_lcp_matches_brute_force(rng):
    seq = rng.integers(0, 3, size=80)
    sa = build_suffix_array(seq)
    lcp = build_lcp(seq, sa)
    for i in range(len(sa) - 1):
        a, b = seq[sa[i]:], seq[sa[i + 1]:]
        n = min(len(a), len(b))
        mismatch = np.flatnonzero(a[:n] != b[:n])
        assert lcp[i] == (mismatch[0] if mismatch.size else n)


def test_empty_sequence():
    assert build_suffix_array(np.zeros(0, dtype=np.int64)).size == 0
    assert not duplicate_mask(np.zeros(0, dtype=np.int64), 3).any()


@pytest.fixture
def distinct(rng):
    """Token blocks with no repeats inside or across them"""
    ids = rng.permutation(5000)
    return ids[:100], ids[100:130], ids[130:160]


def test_repeated_span_removed_from_later_document_only(distinct):
    first, head, tail = distinct
    second = np.concatenate([head, first[20:80], tail])
    result = deduplicate_exact_substrings([first, second], min_len=50)
    assert result.removed_spans == [[], [(30, 90)]]
    np.testing.assert_array_equal(result.documents[0], first)
    np.testing.assert_array_equal(result.documents[1], np.concatenate([head, tail]))
    assert result.removed_tokens == 60
    assert result.total_tokens == 220
    assert result.removal_rate == pytest.approx(60 / 220)


def test_short_repeats_are_kept(distinct):
    first, head, tail = distinct
    second = np.concatenate([head, first[20:60], tail])
    result = deduplicate_exact_substrings([first, second], min_len=50)
    assert result.removed_tokens == 0
    np.testing.assert_array_equal(result.documents[1], second)


def test_repeat_inside_one_document(distinct):
    first, head, _ = distinct
    doc = np.concatenate([first[:60], head[:10], first[:60]])
    result = deduplicate_exact_substrings([doc], min_len=50)
    assert result.removed_spans == [[(70, 130)]]


def test_spans_do_not_cross_documents(distinct):
    first, _, _ = distinct
    # first[:60] split across two documents must not match a later whole copy
    docs = [first[:30], first[30:60], first[:60]]
    result = deduplicate_exact_substrings(docs, min_len=50)
    assert result.removed_tokens == 0


def test_documents_keep_loss_masks_aligned(distinct):
    first, head, tail = distinct
    mask = np.tile([1, 0], 60)
    docs = [Document(first, "web", "a"), Document(np.concatenate([head, first[:60], tail]), "web", "b",
                                                   loss_mask=mask)]
    kept, result = deduplicate_documents(docs, min_len=50)
    assert len(kept[1]) == 60
    np.testing.assert_array_equal(kept[1].loss_mask, np.concatenate([mask[:30], mask[90:]]))
    assert kept[1].doc_id == "b"
    assert result.removed_tokens == 60


def test_invalid_inputs():
    with pytest.raises(ValueError):
        duplicate_mask(np.arange(5), min_len=0)
    with pytest.raises(ValueError):
        deduplicate_exact_substrings([np.array([1, -2, 3])])
