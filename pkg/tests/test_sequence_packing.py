"""
Tests for long-sample splitting, mixture streams, packing and pack shards
"""

import json

import numpy as np
import pytest

from sequence_packing import (
    STAGE_MIXTURES, DataExhaustedError, Document, MixtureSpec, MixtureStream, StreamPacker, compose_mixture,
    long_sample_token_fraction, pack_sequences, read_documents, read_pack_shards, split_long_samples,
    stack_samples, write_pack_shards,
)


def make_docs(source, lengths, start=0):
    return [Document(np.arange(start + i * 1000, start + i * 1000 + n) % 250, source, f"{source}-{i}")
            for i, n in enumerate(lengths)]


# --- splitting --- #

def test_split_5000_into_2048_pieces():
    doc = Document(np.arange(5000) % 256, "web", "long")
    pieces = split_long_samples(doc, 2048)
    assert [len(p) for p in pieces] == [2048, 2048, 904]
    assert [p.doc_id for p in pieces] == ["long#0", "long#1", "long#2"]
    np.testing.assert_array_equal(np.concatenate([p.tokens for p in pieces]), doc.tokens)


def test_short_doc_is_singleton():
    doc = Document([1, 2, 3])
    assert split_long_samples(doc, 3) == [doc]
    with pytest.raises(ValueError):
        split_long_samples(doc, 0)


def test_long_sample_token_fraction():
    lengths = [3000, 3000, 1000, 1000, 1000, 1000]
    assert long_sample_token_fraction(lengths, 2048) == pytest.approx(0.6)
    assert long_sample_token_fraction([], 2048) == 0.0


# --- mixtures --- #

def test_stage_mixture_presets():
    assert MixtureSpec.for_stage(1).weights == {"english": 0.691, "multilingual": 0.166, "code": 0.022,
                                                 "others": 0.121}
    assert MixtureSpec.for_stage(4) == MixtureSpec.for_stage(3)
    for weights in STAGE_MIXTURES.values():
        assert sum(weights.values()) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        MixtureSpec.for_stage(5)


def test_mixture_spec_validation():
    with pytest.raises(ValueError):
        MixtureSpec({"a": 0.7, "b": 0.7})
    with pytest.raises(ValueError):
        MixtureSpec({"a": 1.5, "b": -0.5})
    with pytest.raises(ValueError):
        MixtureSpec({})
    assert MixtureSpec.from_dict({"a": 1}).weights == {"a": 1.0}


def test_single_source_stream_is_verbatim():
    docs = make_docs("a", [5, 7, 3])
    sample = compose_mixture({"a": docs}, MixtureSpec({"a": 1.0}), seed=0, n_tokens=30)
    once = np.concatenate([d.tokens for d in docs])
    np.testing.assert_array_equal(sample.tokens, np.concatenate([once, once])[:30])
    assert sample.realized_fractions() == {"a": 1.0}


@pytest.mark.slow
def test_even_mixture_fractions_at_one_million_tokens():
    sources = {"a": make_docs("a", [100] * 20), "b": make_docs("b", [100] * 20, start=7)}
    fractions = compose_mixture(sources, MixtureSpec({"a": 0.5, "b": 0.5}), seed=3, n_tokens=1_000_000)
    assert 0.49 <= fractions.realized_fractions()["a"] <= 0.51


def test_stage_one_fractions_follow_weights():
    mixture = MixtureSpec.for_stage(1)
    sources = {name: make_docs(name, [37, 50, 81, 12] * 5) for name in mixture.sources}
    realized = compose_mixture(sources, mixture, seed=1, n_tokens=200_000).realized_fractions()
    for name, weight in mixture.weights.items():
        assert abs(realized[name] - weight) < 0.01, name


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fractions_track_weights_at_every_prefix(seed):
    sources = {"a": make_docs("a", [13, 29, 7, 50]), "b": make_docs("b", [31, 5, 44], start=3)}
    mixture = MixtureSpec({"a": 0.3, "b": 0.7})
    _, names = MixtureStream(sources, mixture, seed=seed).take(0, 5000)
    is_a = np.cumsum(np.array(names) == "a")
    for n in range(250, 5001, 250):
        assert abs(is_a[n - 1] - 0.3 * n) <= 3 * 50, (seed, n)


def test_stream_is_deterministic_and_addressable():
    sources = {"a": make_docs("a", [13, 29, 7]), "b": make_docs("b", [31, 5], start=3)}
    mixture = MixtureSpec({"a": 0.3, "b": 0.7})
    whole, names = MixtureStream(sources, mixture, seed=9).take(0, 400)
    again, _ = MixtureStream(sources, mixture, seed=9).take(0, 400)
    np.testing.assert_array_equal(whole, again)
    part, part_names = MixtureStream(sources, mixture, seed=9).take(150, 100)
    np.testing.assert_array_equal(part, whole[150:250])
    assert part_names == names[150:250]


def test_stream_errors():
    sources = {"a": make_docs("a", [10, 10])}
    with pytest.raises(ValueError):
        MixtureStream(sources, MixtureSpec({"b": 1.0}))
    with pytest.raises(ValueError):
        MixtureStream({"a": [Document([])]}, MixtureSpec({"a": 1.0}))
    stream = MixtureStream(sources, MixtureSpec({"a": 1.0}), max_epochs=1)
    assert stream.take(0, 20)[0].size == 20
    with pytest.raises(DataExhaustedError) as info:
        stream.doc_at(25)
    assert info.value.delivered == 20
    with pytest.raises(ValueError):
        stream.doc_at(-1)


# --- packing --- #

def test_docs_of_exactly_context_length_are_not_padded():
    docs = make_docs("a", [64, 64, 64])
    samples = pack_sequences(docs, 64)
    assert len(samples) == 3
    for sample, doc in zip(samples, docs):
        np.testing.assert_array_equal(sample.tokens, doc.tokens)
        assert sample.loss_mask.sum() == 64
        assert sample.doc_bounds == [(0, 64, doc.doc_id)]


def test_packing_conserves_tokens(rng):
    lengths = rng.integers(1, 300, size=60).tolist()
    docs = make_docs("a", lengths)
    docs[3] = Document(docs[3].tokens, "a", "masked", loss_mask=np.zeros(len(docs[3]), dtype=np.int8))
    samples = pack_sequences(docs, 128, pad_id=255)
    real = np.concatenate([s.tokens[s.segment_ids >= 0] for s in samples])
    np.testing.assert_array_equal(real, np.concatenate([d.tokens for d in docs]))
    assert sum(s.n_real_tokens for s in samples) == sum(lengths)
    assert sum(int(s.loss_mask.sum()) for s in samples) == sum(lengths) - len(docs[3])
    for sample in samples:
        pad = sample.segment_ids < 0
        assert (sample.tokens[pad] == 255).all() and (sample.loss_mask[pad] == 0).all()
        # segments are contiguous and in order
        ids = sample.segment_ids[~pad]
        assert (np.diff(ids) >= 0).all() and (np.diff(ids) <= 1).all()


def test_short_documents_never_cross_windows(rng):
    docs = make_docs("a", rng.integers(1, 128, size=40).tolist())
    samples = pack_sequences(docs, 128)
    placed = {doc_id: end - start for s in samples for start, end, doc_id in s.doc_bounds}
    assert placed == {d.doc_id: len(d) for d in docs}


def test_stack_samples_shapes():
    samples = pack_sequences(make_docs("a", [10, 20, 30]), 32)
    tokens, mask, segments = stack_samples(samples)
    assert tokens.shape == mask.shape == segments.shape == (len(samples), 32)


def test_stream_packer_cursor_is_resumable():
    sources = {"a": make_docs("a", [50, 200, 17, 90]), "b": make_docs("b", [33, 61])}
    mixture = MixtureSpec({"a": 0.6, "b": 0.4})
    packer = StreamPacker(MixtureStream(sources, mixture, seed=2), 64)
    samples, cursor = packer.pack_at(0, 10)
    assert cursor == sum(s.n_real_tokens for s in samples)
    fresh = StreamPacker(MixtureStream(sources, mixture, seed=2), 64)
    first, middle = fresh.pack_at(0, 4)
    rest, end = fresh.pack_at(middle, 6)
    assert end == cursor
    for a, b in zip(samples, first + rest):
        np.testing.assert_array_equal(a.tokens, b.tokens)


def test_shards_round_trip(tmp_path, rng):
    samples = pack_sequences(make_docs("a", rng.integers(1, 40, size=30).tolist()), 40)
    manifest_path = write_pack_shards(samples, str(tmp_path / "packs"), shard_size=3)
    manifest = json.loads(open(manifest_path, encoding="utf-8").read())
    assert len(manifest["shards"]) == -(-len(samples) // 3)
    restored = read_pack_shards(str(tmp_path / "packs"))
    assert len(restored) == len(samples)
    for a, b in zip(samples, restored):
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.loss_mask, b.loss_mask)
        np.testing.assert_array_equal(a.segment_ids, b.segment_ids)
        assert a.doc_bounds == b.doc_bounds
        assert a.sources == b.sources


def test_read_documents(tmp_path):
    path = tmp_path / "docs.jsonl"
    path.write_text(json.dumps({"id": "x", "lang": "en", "text": "hi"}) + "\n"
                    + json.dumps({"id": "y", "source": "code", "tokens": [1, 2, 3]}) + "\n", encoding="utf-8")
    docs = read_documents(str(path))
    assert [(d.doc_id, d.source, len(d)) for d in docs] == [("x", "en", 2), ("y", "code", 3)]
